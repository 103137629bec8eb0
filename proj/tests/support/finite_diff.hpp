#pragma once

// Central finite differences used as an independent gradient oracle.

#include <algorithm>
#include <cmath>
#include <functional>

#include "modec/diffcore/params.hpp"

namespace modec::testing {

/// Numerical d loss / d params. `loss` re-evaluates the full forward from the
/// current parameter values and returns the scalar loss.
inline diffcore::Gradients numeric_gradient(diffcore::ParameterSet& params,
                                            const std::function<double()>& loss,
                                            double h = 1e-5) {
  auto out = params.zeros_like();
  for (auto& [name, tensor] : params) {
    auto& g = out.get(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double saved = tensor[i];
      tensor[i] = saved + h;
      const double up = loss();
      tensor[i] = saved - h;
      const double down = loss();
      tensor[i] = saved;
      g[i] = (up - down) / (2.0 * h);
    }
  }
  return out;
}

/// Largest elementwise |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const diffcore::Gradients& analytic,
                                 const diffcore::Gradients& numeric, double floor = 1e-3) {
  double worst = 0.0;
  auto n = numeric.begin();
  for (auto a = analytic.begin(); a != analytic.end(); ++a, ++n) {
    for (std::size_t i = 0; i < a->second.size(); ++i) {
      const double x = a->second[i];
      const double y = n->second[i];
      const double scale = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / scale);
    }
  }
  return worst;
}

}  // namespace modec::testing
