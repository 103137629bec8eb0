#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "modec/diffcore/graph.hpp"
#include "modec/modnet/mask.hpp"

namespace modec::modnet {

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NetShape {
  std::size_t layers = 4;
  std::size_t modules_per_layer = 4;
  std::size_t hidden = 32;
  std::size_t state_dim = 4;
  std::size_t action_dim = 2;
  std::size_t task_count = 4;

  std::size_t module_count() const { return layers * modules_per_layer; }
  bool operator==(const NetShape&) const = default;
};

inline constexpr double kLogStdMin = -10.0;
inline constexpr double kLogStdMax = 2.0;

/// Squashed Gaussian over actions.
struct ActionDistribution {
  diffcore::Tensor mean;     // 1 x A
  diffcore::Tensor log_std;  // 1 x A, inside [kLogStdMin, kLogStdMax]

  diffcore::Tensor deterministic() const;
  diffcore::Tensor sample(std::mt19937_64& rng) const;
};

/// Graph handles produced by ModularPolicyNet::build for a batch.
struct PolicyNodes {
  diffcore::Node mean;      // B x A
  diffcore::Node log_std;   // B x A
  diffcore::Node action;    // tanh(mean), B x A
  std::vector<diffcore::Node> routing;  // per layer, B x M
};

/// The masked soft-modular base network.
///
///   x0      = tanh(s We + be)
///   r       = tanh([x0, e_task] Wr + br)
///   w_l     = softmax over active modules of (r Wl + bl)
///   x_l     = sum_{j active} w_lj * tanh(x_{l-1} W_lj + b_lj)
///   head    = x_L Wh + bh -> (mean, log_std)
///
/// A module whose mask bit is zero in every row of a batch is never evaluated.
class ModularPolicyNet {
 public:
  ModularPolicyNet() = default;
  ModularPolicyNet(NetShape shape, std::mt19937_64& rng);
  ModularPolicyNet(NetShape shape, diffcore::ParameterSet params);

  const NetShape& shape() const { return shape_; }
  const diffcore::ParameterSet& params() const { return params_; }
  diffcore::ParameterSet& params() { return params_; }

  /// `masks` is B x N (one mask per row) or 1 x N (shared by all rows).
  PolicyNodes build(diffcore::Graph& g, diffcore::Node states, diffcore::Node tasks,
                    const diffcore::Tensor& masks, bool trainable = true) const;

  ActionDistribution forward(const diffcore::Tensor& state, const TaskContext& task,
                             const ModuleMask& mask) const;
  std::vector<diffcore::Tensor> routing_weights(const diffcore::Tensor& state,
                                                const TaskContext& task,
                                                const ModuleMask& mask) const;

  /// Deterministic actions (tanh of mean) for a batch with per-row masks.
  diffcore::Tensor deterministic_actions(const diffcore::Tensor& states,
                                         const diffcore::Tensor& tasks,
                                         const diffcore::Tensor& masks) const;

  std::uint64_t flops(const ModuleMask& mask) const;
  std::uint64_t module_flops() const;
  std::uint64_t fixed_flops() const;

  double action_distance(const diffcore::Tensor& state, const TaskContext& task,
                         const ModuleMask& a, const ModuleMask& b) const;

  static std::string module_prefix(std::size_t layer, std::size_t module);

 private:
  void validate(const diffcore::Tensor& state, const TaskContext& task,
                const ModuleMask& mask) const;

  NetShape shape_;
  diffcore::ParameterSet params_;
};

/// L2 distance between two 1 x A action rows.
double action_l2(const diffcore::Tensor& a, const diffcore::Tensor& b);

}  // namespace modec::modnet
