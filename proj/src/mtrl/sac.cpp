#include "modec/mtrl/sac.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace modec::mtrl {

using diffcore::Graph;
using diffcore::Node;
using diffcore::ParameterSet;
using diffcore::Tensor;

namespace {

constexpr double kSquashEpsilon = 1e-6;

Tensor per_row(const Batch& batch, std::span<const double> values) {
  Tensor out(batch.size(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) out(i, 0) = values[batch.task_ids[i]];
  return out;
}

void check_alpha(std::span<const double> alpha, const Batch& batch) {
  for (auto id : batch.task_ids) {
    if (id >= alpha.size()) throw TrainError("batch task id exceeds temperature count");
  }
}

}  // namespace

std::vector<double> task_weights(std::span<const double> alpha) {
  if (alpha.empty()) throw TrainError("task_weights of an empty task set");
  double lo = alpha[0];
  for (double a : alpha) {
    if (!std::isfinite(a)) throw TrainError("non-finite temperature");
    lo = std::min(lo, a);
  }
  std::vector<double> w(alpha.size());
  double total = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) total += w[i] = std::exp(lo - alpha[i]);
  for (auto& v : w) v /= total;
  return w;
}

TemperatureBank::TemperatureBank(std::size_t tasks, double initial_log_alpha,
                                 double target_entropy, double learning_rate)
    : log_alpha_(tasks, initial_log_alpha), target_entropy_(target_entropy) {
  if (tasks == 0) throw TrainError("temperature bank needs at least one task");
  for (std::size_t t = 0; t < tasks; ++t) {
    optimizers_.emplace_back(diffcore::OptimizerConfig{.learning_rate = learning_rate});
    slots_.emplace_back();
    slots_.back().add("log_alpha", Tensor::scalar(initial_log_alpha));
  }
}

double TemperatureBank::alpha(std::size_t task) const { return std::exp(log_alpha_.at(task)); }

std::vector<double> TemperatureBank::alphas() const {
  std::vector<double> out;
  for (double la : log_alpha_) out.push_back(std::exp(la));
  return out;
}

void TemperatureBank::set_log_alpha(std::size_t task, double value) {
  if (!std::isfinite(value)) throw TrainError("non-finite log temperature");
  log_alpha_.at(task) = value;
  slots_.at(task).get("log_alpha")[0] = value;
}

void TemperatureBank::update(std::span<const std::size_t> task_ids,
                             std::span<const double> log_probs) {
  if (task_ids.size() != log_probs.size()) throw TrainError("temperature update size mismatch");
  std::vector<double> sum(log_alpha_.size(), 0.0);
  std::vector<std::size_t> count(log_alpha_.size(), 0);
  for (std::size_t i = 0; i < task_ids.size(); ++i) {
    sum.at(task_ids[i]) += log_probs[i] + target_entropy_;
    ++count[task_ids[i]];
  }
  for (std::size_t t = 0; t < log_alpha_.size(); ++t) {
    if (count[t] == 0) continue;
    ParameterSet grad;
    grad.add("log_alpha", Tensor::scalar(-sum[t] / static_cast<double>(count[t])));
    optimizers_[t].step(slots_[t], grad);
    log_alpha_[t] = slots_[t].get("log_alpha")[0];
  }
}

ParameterSet TemperatureBank::as_params() const {
  ParameterSet p;
  p.add("log_alpha", Tensor(1, log_alpha_.size(), log_alpha_));
  return p;
}

void TemperatureBank::load_params(const ParameterSet& params) {
  const auto& t = params.get("log_alpha");
  if (t.size() != log_alpha_.size()) throw TrainError("temperature count mismatch on load");
  for (std::size_t i = 0; i < t.size(); ++i) set_log_alpha(i, t[i]);
}

CriticPair::CriticPair(CriticShape s, std::mt19937_64& rng) : shape(s) {
  const auto in = s.state_dim + s.action_dim + s.task_count;
  for (const char* q : {"q1", "q2"}) {
    const std::string p(q);
    diffcore::add_dense(online, p + ".l0", in, s.hidden, rng);
    diffcore::add_dense(online, p + ".l1", s.hidden, s.hidden, rng);
    diffcore::add_dense(online, p + ".out", s.hidden, 1, rng);
  }
  target = online;
}

void CriticPair::soft_update(double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw TrainError("soft update rate must lie in [0, 1]");
  for (auto& [name, t] : target) {
    const auto& o = online.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = (1.0 - tau) * t[i] + tau * o[i];
  }
}

Node critic_forward(Graph& g, const ParameterSet& set, const std::string& prefix, Node states,
                    Node actions, Node tasks, bool trainable) {
  auto in = g.concat_cols(g.concat_cols(states, actions), tasks);
  auto h = g.relu(g.dense(in, set, prefix + ".l0", trainable));
  h = g.relu(g.dense(h, set, prefix + ".l1", trainable));
  return g.dense(h, set, prefix + ".out", trainable);
}

Node elementwise_min(Graph& g, Node a, Node b) { return g.sub(a, g.relu(g.sub(a, b))); }

SquashedSample squashed_sample(Graph& g, const modnet::PolicyNodes& policy, const Tensor& noise) {
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Tensor gauss = noise;
  for (auto& v : gauss.values()) v = -0.5 * v * v - half_log_2pi;
  auto u = g.add(policy.mean, g.mul(g.exp(policy.log_std), g.constant(noise)));
  auto a = g.tanh(u);
  auto density = g.row_sum(g.sub(g.constant(std::move(gauss)), policy.log_std));
  auto jacobian = g.row_sum(g.log(g.add_scalar(g.scale(g.mul(a, a), -1.0), 1.0 + kSquashEpsilon)));
  return {a, g.sub(density, jacobian)};
}

Tensor batch_masks(const modnet::ModularPolicyNet& policy, const Batch& batch) {
  if (batch.masks.rows() == 0) return Tensor(1, policy.shape().module_count(), 1.0);
  if (batch.masks.rows() != batch.size()) throw TrainError("batch mask rows do not match batch");
  return batch.masks;
}

Tensor gaussian_noise(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(rows, cols);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

ActorLossNodes build_actor_loss(Graph& g, const modnet::ModularPolicyNet& policy,
                                const CriticPair& critics, std::span<const double> alpha,
                                const Batch& batch, const Tensor& noise,
                                const ActorExtra& extra) {
  if (batch.size() == 0) throw TrainError("actor loss of an empty batch");
  check_alpha(alpha, batch);
  const auto w = task_weights(alpha);
  Tensor wa = per_row(batch, w);
  Tensor wq = wa;
  for (std::size_t i = 0; i < batch.size(); ++i) wa(i, 0) *= alpha[batch.task_ids[i]];

  auto states = g.constant(batch.states);
  auto tasks = g.constant(batch.tasks);
  auto nodes = policy.build(g, states, tasks, batch_masks(policy, batch));
  auto sample = squashed_sample(g, nodes, noise);
  auto q1 = critic_forward(g, critics.online, "q1", states, sample.action, tasks, false);
  auto q2 = critic_forward(g, critics.online, "q2", states, sample.action, tasks, false);
  auto min_q = elementwise_min(g, q1, q2);
  auto per_sample = g.sub(g.mul(sample.log_prob, g.constant(wa)), g.mul(min_q, g.constant(wq)));
  auto sac = g.mean(per_sample);
  g.label(sac, "actor_loss");
  auto extra_node = extra ? extra(g, batch, nodes) : g.constant(Tensor::scalar(0.0));
  return {g.add(sac, extra_node), sac, sample.log_prob, extra_node};
}

Tensor critic_targets(const modnet::ModularPolicyNet& policy, const CriticPair& critics,
                      std::span<const double> alpha, const Batch& batch, double gamma,
                      const Tensor& noise) {
  check_alpha(alpha, batch);
  Graph g;
  auto next = g.constant(batch.next_states);
  auto tasks = g.constant(batch.tasks);
  auto nodes = policy.build(g, next, tasks, batch_masks(policy, batch), false);
  auto sample = squashed_sample(g, nodes, noise);
  auto q1 = critic_forward(g, critics.target, "q1", next, sample.action, tasks, false);
  auto q2 = critic_forward(g, critics.target, "q2", next, sample.action, tasks, false);
  auto min_q = elementwise_min(g, q1, q2);
  g.evaluate();
  const auto& q = g.value(min_q);
  const auto& logp = g.value(sample.log_prob);
  Tensor y(batch.size(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double soft_v = q(i, 0) - alpha[batch.task_ids[i]] * logp(i, 0);
    y(i, 0) = batch.rewards(i, 0) + gamma * (1.0 - batch.terminal(i, 0)) * soft_v;
  }
  return y;
}

Node build_critic_loss(Graph& g, const CriticPair& critics, const Batch& batch,
                       const Tensor& targets) {
  auto states = g.constant(batch.states);
  auto actions = g.constant(batch.actions);
  auto tasks = g.constant(batch.tasks);
  auto y = g.constant(targets);
  auto d1 = g.sub(critic_forward(g, critics.online, "q1", states, actions, tasks, true), y);
  auto d2 = g.sub(critic_forward(g, critics.online, "q2", states, actions, tasks, true), y);
  auto loss = g.add(g.mean(g.mul(d1, d1)), g.mean(g.mul(d2, d2)));
  g.label(loss, "critic_loss");
  return loss;
}

SacAgent::SacAgent(modnet::ModularPolicyNet policy, CriticPair critics, TemperatureBank temps,
                   SacConfig config)
    : policy_(std::move(policy)),
      critics_(std::move(critics)),
      temps_(std::move(temps)),
      config_(config),
      actor_opt_({.learning_rate = config.actor_lr}),
      critic_opt_({.learning_rate = config.critic_lr}) {}

void SacAgent::reset_policy(const ParameterSet& params) {
  if (!params.compatible(policy_.params())) throw TrainError("policy reset with incompatible parameters");
  policy_.params() = params;
  actor_opt_.reset();
}

UpdateStats SacAgent::update(const Batch& batch, std::mt19937_64& rng) {
  UpdateStats stats;
  const auto alpha = temps_.alphas();
  const auto a_dim = policy_.shape().action_dim;
  try {
    const auto y = critic_targets(policy_, critics_, alpha, batch, config_.gamma,
                                  gaussian_noise(batch.size(), a_dim, rng));
    Graph cg;
    auto closs = build_critic_loss(cg, critics_, batch, y);
    cg.evaluate();
    stats.critic_loss = cg.value(closs).item();
    critic_opt_.step(critics_.online, cg.gradients(closs, critics_.online));

    Graph ag;
    auto actor = build_actor_loss(ag, policy_, critics_, alpha, batch,
                                  gaussian_noise(batch.size(), a_dim, rng), extra_);
    ag.evaluate();
    stats.actor_loss = ag.value(actor.sac_loss).item();
    stats.extra_loss = ag.value(actor.extra).item();
    actor_opt_.step(policy_.params(), ag.gradients(actor.loss, policy_.params()));

    if (config_.learn_alpha) {
      const auto& logp = ag.value(actor.log_prob);
      temps_.update(batch.task_ids, logp.values());
    }
  } catch (const diffcore::DiffError& e) {
    throw TrainError(std::string("SAC update failed: ") + e.what());
  }
  critics_.soft_update(config_.tau);
  return stats;
}

}  // namespace modec::mtrl
