#pragma once

#include <functional>
#include <random>
#include <span>
#include <vector>

#include "modec/diffcore/graph.hpp"
#include "modec/diffcore/optimizer.hpp"
#include "modec/modnet/modular_net.hpp"
#include "modec/mtrl/replay.hpp"

namespace modec::mtrl {

/// w_tau = exp(-alpha_tau) / sum exp(-alpha).
std::vector<double> task_weights(std::span<const double> alpha);

/// Per-task log-temperatures, each with its own scalar Adam state.
class TemperatureBank {
 public:
  TemperatureBank() = default;
  TemperatureBank(std::size_t tasks, double initial_log_alpha, double target_entropy,
                  double learning_rate);

  std::size_t size() const { return log_alpha_.size(); }
  double log_alpha(std::size_t task) const { return log_alpha_.at(task); }
  double alpha(std::size_t task) const;
  std::vector<double> alphas() const;
  double target_entropy() const { return target_entropy_; }
  void set_log_alpha(std::size_t task, double value);

  /// One gradient step on  -log_alpha * (log_pi + target_entropy)  averaged
  /// over each task's own rows. Tasks absent from `task_ids` are untouched.
  void update(std::span<const std::size_t> task_ids, std::span<const double> log_probs);

  diffcore::ParameterSet as_params() const;
  void load_params(const diffcore::ParameterSet& params);

 private:
  std::vector<double> log_alpha_;
  std::vector<diffcore::Optimizer> optimizers_;
  std::vector<diffcore::ParameterSet> slots_;
  double target_entropy_ = 0.0;
};

struct CriticShape {
  std::size_t state_dim = 4;
  std::size_t action_dim = 2;
  std::size_t task_count = 4;
  std::size_t hidden = 64;
};

/// Twin relu Q-networks on [s, a, e_tau] ("q1.*", "q2.*") and their targets.
struct CriticPair {
  CriticPair() = default;
  CriticPair(CriticShape shape, std::mt19937_64& rng);

  CriticShape shape;
  diffcore::ParameterSet online;
  diffcore::ParameterSet target;

  /// target <- (1 - tau) target + tau online.
  void soft_update(double tau);
};

/// Q(s, a, e) for one critic (`prefix` = "q1" or "q2"), B x 1.
diffcore::Node critic_forward(diffcore::Graph& g, const diffcore::ParameterSet& set,
                              const std::string& prefix, diffcore::Node states,
                              diffcore::Node actions, diffcore::Node tasks, bool trainable);

/// min(a, b) elementwise via a - relu(a - b).
diffcore::Node elementwise_min(diffcore::Graph& g, diffcore::Node a, diffcore::Node b);

/// Reparameterized tanh-Gaussian sample and its log-density.
struct SquashedSample {
  diffcore::Node action;    // B x A
  diffcore::Node log_prob;  // B x 1
};

SquashedSample squashed_sample(diffcore::Graph& g, const modnet::PolicyNodes& policy,
                               const diffcore::Tensor& noise);

/// Standard normal B x A noise.
diffcore::Tensor gaussian_noise(std::size_t rows, std::size_t cols, std::mt19937_64& rng);

struct ActorLossNodes {
  diffcore::Node loss;      // sac term + extra term
  diffcore::Node sac_loss;
  diffcore::Node log_prob;
  diffcore::Node extra;     // equals a zero constant when no extra term is given
};

/// Additional scalar actor objective built on the policy nodes of the batch.
using ActorExtra = std::function<diffcore::Node(diffcore::Graph&, const Batch&,
                                                const modnet::PolicyNodes&)>;

/// Module masks of a batch: its stored masks, else the shared full mask.
diffcore::Tensor batch_masks(const modnet::ModularPolicyNet& policy, const Batch& batch);

/// mean_i w_tau_i * (alpha_tau_i * log pi - min Q) with actions resampled by
/// reparameterization under the batch masks. Critics, alpha and w are constants.
ActorLossNodes build_actor_loss(diffcore::Graph& g, const modnet::ModularPolicyNet& policy,
                                const CriticPair& critics, std::span<const double> alpha,
                                const Batch& batch, const diffcore::Tensor& noise,
                                const ActorExtra& extra = {});

/// r + gamma (1 - terminal) (min Q_target(s', a') - alpha_tau log pi(a'|s')), B x 1.
diffcore::Tensor critic_targets(const modnet::ModularPolicyNet& policy, const CriticPair& critics,
                                std::span<const double> alpha, const Batch& batch, double gamma,
                                const diffcore::Tensor& noise);

/// mean (Q1 - y)^2 + mean (Q2 - y)^2 over the online critics.
diffcore::Node build_critic_loss(diffcore::Graph& g, const CriticPair& critics, const Batch& batch,
                                 const diffcore::Tensor& targets);

struct SacConfig {
  double gamma = 0.99;
  double tau = 5e-3;
  double actor_lr = 3e-4;
  double critic_lr = 3e-4;
  double alpha_lr = 3e-4;
  double initial_log_alpha = 0.0;
  bool learn_alpha = true;
  std::size_t critic_hidden = 64;
};

struct UpdateStats {
  double actor_loss = 0.0;  // sac term only
  double critic_loss = 0.0;
  double extra_loss = 0.0;
};

/// Policy, twin critics, temperatures and their optimizers.
class SacAgent {
 public:
  SacAgent(modnet::ModularPolicyNet policy, CriticPair critics, TemperatureBank temps,
           SacConfig config);

  /// Critic step, actor step, temperature step, then target soft update.
  UpdateStats update(const Batch& batch, std::mt19937_64& rng);

  void set_actor_extra(ActorExtra extra) { extra_ = std::move(extra); }
  /// Replaces the policy parameters and clears the actor optimizer state.
  void reset_policy(const diffcore::ParameterSet& params);

  const modnet::ModularPolicyNet& policy() const { return policy_; }
  modnet::ModularPolicyNet& policy() { return policy_; }
  const CriticPair& critics() const { return critics_; }
  const TemperatureBank& temperatures() const { return temps_; }
  const SacConfig& config() const { return config_; }

 private:
  modnet::ModularPolicyNet policy_;
  CriticPair critics_;
  TemperatureBank temps_;
  SacConfig config_;
  diffcore::Optimizer actor_opt_;
  diffcore::Optimizer critic_opt_;
  ActorExtra extra_;
};

}  // namespace modec::mtrl
