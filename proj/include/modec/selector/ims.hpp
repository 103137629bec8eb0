#pragma once

#include <atomic>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "modec/diffcore/graph.hpp"
#include "modec/modnet/modular_net.hpp"

namespace modec::selector {

class SelectError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SelectMode { kSample, kGreedy };

struct SelectorShape {
  std::size_t state_dim = 4;
  std::size_t task_count = 4;
  std::size_t module_count = 16;
  std::size_t hidden = 64;
  bool task_heads = false;  // one N-wide output head per task, gated by e_tau
};

/// Selector input row [s, e_tau, K/N, extra] for either selector network.
diffcore::Tensor selector_features(const diffcore::Tensor& state,
                                   const modnet::TaskContext& task, std::size_t k,
                                   std::size_t module_count, const modnet::ModuleMask* prefix);

/// Relaxed atomic tally that copies by value, so instrumented nets stay
/// copyable and safe to share across evaluation workers.
class ForwardCounter {
 public:
  ForwardCounter() = default;
  ForwardCounter(const ForwardCounter& o) : n_(o.get()) {}
  ForwardCounter& operator=(const ForwardCounter& o) {
    n_.store(o.get(), std::memory_order_relaxed);
    return *this;
  }
  void bump() { n_.fetch_add(1, std::memory_order_relaxed); }
  void reset() { n_.store(0, std::memory_order_relaxed); }
  std::size_t get() const { return n_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::size_t> n_{0};
};

/// Shared two-hidden-layer tanh MLP with an N-wide linear head, or one head per
/// task when shape.task_heads is set. Every call to scores() counts one forward pass.
class SelectorMlp {
 public:
  SelectorMlp() = default;
  SelectorMlp(SelectorShape shape, std::size_t input_dim, std::mt19937_64& rng);
  SelectorMlp(SelectorShape shape, std::size_t input_dim, diffcore::ParameterSet params);

  const SelectorShape& shape() const { return shape_; }
  std::size_t input_dim() const { return input_dim_; }
  const diffcore::ParameterSet& params() const { return params_; }
  diffcore::ParameterSet& params() { return params_; }

  /// B x N raw scores for a B x input_dim feature batch.
  diffcore::Node build(diffcore::Graph& g, diffcore::Node features, bool trainable = true) const;
  /// 1 x N scores for one feature row.
  diffcore::Tensor scores(const diffcore::Tensor& features) const;

  std::size_t forward_count() const { return forwards_.get(); }
  void reset_forward_count() const { forwards_.reset(); }

 private:
  SelectorShape shape_;
  std::size_t input_dim_ = 0;
  diffcore::ParameterSet params_;
  mutable ForwardCounter forwards_;
};

/// pi_ims: logits over modules given (s, tau, K/N, prefix mask).
class IterativeSelectorNet : public SelectorMlp {
 public:
  IterativeSelectorNet() = default;
  IterativeSelectorNet(SelectorShape shape, std::mt19937_64& rng);
  IterativeSelectorNet(SelectorShape shape, diffcore::ParameterSet params);

  static std::size_t feature_dim(const SelectorShape& s) {
    return s.state_dim + s.task_count + 1 + s.module_count;
  }
  diffcore::Tensor features(const diffcore::Tensor& state, const modnet::TaskContext& task,
                            std::size_t k, const modnet::ModuleMask& prefix) const;
  /// Softmax over modules whose prefix bit is 0 (selected ones get exactly 0).
  diffcore::Tensor probabilities(const diffcore::Tensor& state, const modnet::TaskContext& task,
                                 std::size_t k, const modnet::ModuleMask& prefix) const;
};

/// Index choice from 1 x N logits restricted to positions with prefix bit 0.
/// Greedy takes the first maximum.
std::size_t choose(std::span<const double> logits, const modnet::ModuleMask& prefix,
                   SelectMode mode, std::mt19937_64& rng);

std::size_t select_next(const IterativeSelectorNet& net, const diffcore::Tensor& state,
                        const modnet::TaskContext& task, std::size_t k,
                        const modnet::ModuleMask& prefix, SelectMode mode, std::mt19937_64& rng);

struct SelectionStep {
  modnet::ModuleMask prefix;  // before this choice
  std::size_t choice = 0;
  double reward = 0.0;
};

struct SelectionEpisode {
  diffcore::Tensor state;
  std::size_t task = 0;
  std::size_t task_count = 0;
  std::size_t k = 0;
  std::vector<SelectionStep> steps;
  std::vector<double> returns;
  std::vector<double> gaps;  // Dist(m_{0:0}) .. Dist(m_{0:K})

  modnet::ModuleMask mask() const;
};

/// K sequential choices from the empty mask; rewards left at 0.
SelectionEpisode select_k(const IterativeSelectorNet& net, const diffcore::Tensor& state,
                          const modnet::TaskContext& task, std::size_t k, SelectMode mode,
                          std::mt19937_64& rng);

/// Dist(m) = ||a(m_full) - a(m)|| for the deterministic base action.
double action_gap(const modnet::ModularPolicyNet& base, const diffcore::Tensor& state,
                  const modnet::TaskContext& task, const modnet::ModuleMask& mask);

/// Dist(before) - Dist(after).
double ims_reward(const modnet::ModularPolicyNet& base, const diffcore::Tensor& state,
                  const modnet::TaskContext& task, const modnet::ModuleMask& before,
                  const modnet::ModuleMask& after);

/// Dist of every prefix m_{0:0} .. m_{0:K} in one batched base pass.
std::vector<double> prefix_gaps(const modnet::ModularPolicyNet& base,
                                const SelectionEpisode& episode);

/// G_i = sum_{j >= i} gamma^{j - i} r_j.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

/// Fills rewards (Dist(i-1) - Dist(i)), prefix gaps and discounted returns of
/// `episode`.
void assign_rewards(const modnet::ModularPolicyNet& base, SelectionEpisode& episode, double gamma);

/// -(1/E) sum_e sum_i log pi(choice | prefix) * A_i.
/// group == 1: A_i = G_i - mean G over every step of the batch.
/// group > 1: consecutive runs of `group` episodes share (state, task, K) and
/// A_i = (G_i - Dist_i) - mean over the other group members of the same
/// quantity at step i. Both baselines are independent of the step's choice.
diffcore::Node build_ims_loss(diffcore::Graph& g, const IterativeSelectorNet& net,
                              std::span<const SelectionEpisode> episodes, std::size_t group = 1);

/// outer + eps (inner - outer), returning `inner` exactly at eps = 1.
diffcore::ParameterSet reptile_update(const diffcore::ParameterSet& outer,
                                      const diffcore::ParameterSet& inner, double eps);

/// mean_i || a_frozen(s_i, tau_i, m_full) - a(s_i, tau_i, m_i) || with
/// `current_action` the B x A deterministic action node of the trained base.
diffcore::Node build_regularization_loss(diffcore::Graph& g, const modnet::ModularPolicyNet& frozen,
                                         const diffcore::Tensor& states,
                                         const diffcore::Tensor& tasks,
                                         diffcore::Node current_action);

}  // namespace modec::selector
