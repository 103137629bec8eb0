#include "modec/diffcore/optimizer.hpp"

#include <cmath>

namespace modec::diffcore {

void Optimizer::step(ParameterSet& params, const Gradients& grads) {
  if (!params.compatible(grads)) {
    throw ShapeError("optimizer: gradient names/shapes do not match parameters");
  }
  ++state_.step;
  const double lr = config_.learning_rate;

  if (config_.kind == OptimizerKind::kSgd) {
    auto g = grads.begin();
    for (auto p = params.begin(); p != params.end(); ++p, ++g) {
      auto pv = p->second.values();
      auto gv = g->second.values();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= lr * gv[i];
    }
    return;
  }

  if (state_.first_moment.size() == 0) {
    state_.first_moment = params.zeros_like();
    state_.second_moment = params.zeros_like();
  } else if (!state_.first_moment.compatible(params)) {
    throw ShapeError("optimizer: moment shapes do not match parameters");
  }

  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double t = static_cast<double>(state_.step);
  const double c1 = 1.0 - std::pow(b1, t);
  const double c2 = 1.0 - std::pow(b2, t);

  auto g = grads.begin();
  auto m = state_.first_moment.begin();
  auto v = state_.second_moment.begin();
  for (auto p = params.begin(); p != params.end(); ++p, ++g, ++m, ++v) {
    auto pv = p->second.values();
    auto gv = g->second.values();
    auto mv = m->second.values();
    auto vv = v->second.values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = b1 * mv[i] + (1.0 - b1) * gv[i];
      vv[i] = b2 * vv[i] + (1.0 - b2) * gv[i] * gv[i];
      const double mhat = mv[i] / c1;
      const double vhat = vv[i] / c2;
      pv[i] -= lr * mhat / (std::sqrt(vhat) + config_.epsilon);
    }
  }
}

}  // namespace modec::diffcore
