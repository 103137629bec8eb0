#pragma once

#include <cstdint>

#include "modec/diffcore/params.hpp"

namespace modec::diffcore {

enum class OptimizerKind { kAdam, kSgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moment estimates, keyed like the parameters they track.
struct OptimizerState {
  ParameterSet first_moment;
  ParameterSet second_moment;
  std::uint64_t step = 0;
};

class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

  /// Applies one update in-place. Moments are created lazily on first use.
  void step(ParameterSet& params, const Gradients& grads);

  void reset() { state_ = {}; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

  const OptimizerConfig& config() const { return config_; }
  const OptimizerState& state() const { return state_; }

 private:
  OptimizerConfig config_;
  OptimizerState state_;
};

}  // namespace modec::diffcore
