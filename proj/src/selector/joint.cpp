#include "modec/selector/joint.hpp"

#include <algorithm>
#include <deque>
#include <string>

#include "modec/diffcore/optimizer.hpp"
#include "modec/diffcore/seed.hpp"

namespace modec::selector {

using diffcore::derive_seed;
using diffcore::Graph;
using diffcore::Tensor;
using modnet::ModuleMask;
using modnet::TaskContext;

namespace {

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

SelectorShape selector_shape(const modnet::NetShape& shape, const JointConfig& config) {
  return {shape.state_dim, shape.task_count, shape.module_count(), config.selector_hidden,
          config.selector_task_heads};
}

void validate(const JointConfig& c) {
  if (c.reptile_inner_steps == 0) throw SelectError("reptile inner steps must be positive");
  if (!(c.reptile_eps >= 0.0 && c.reptile_eps <= 1.0)) throw SelectError("reptile eps outside [0, 1]");
  if (c.ims_batch == 0 || c.ims_buffer < c.ims_batch) throw SelectError("bad selector batch sizes");
  if (c.ims_group == 0 || c.ims_batch % c.ims_group != 0) {
    throw SelectError("selector batch must be a multiple of the group size");
  }
  if (c.ims_update_every == 0 || c.base_update_every == 0) throw SelectError("update period of 0");
  if (c.batch_size == 0) throw SelectError("batch size must be positive");
}

}  // namespace

IterativeSelectorNet initial_selector(const modnet::NetShape& shape, const JointConfig& config,
                                      std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "joint/ims-init"));
  return IterativeSelectorNet(selector_shape(shape, config), rng);
}

JointResult joint_learn(const envs::SuiteConfig& suite, const mtrl::PretrainResult& pretrained,
                        const JointConfig& config, std::uint64_t seed, const JointSink& sink) {
  validate(config);
  const auto shape = pretrained.policy.shape();
  if (shape.task_count != suite.tasks) throw SelectError("pretrained net does not match the suite");
  const auto n = shape.module_count();
  auto ims = initial_selector(shape, config, seed);

  const modnet::ModularPolicyNet& frozen = pretrained.policy;
  mtrl::SacAgent agent(pretrained.policy, pretrained.critics, pretrained.temperatures, config.sac);
  const double beta = config.rg_weight;
  agent.set_actor_extra([&frozen, beta](Graph& g, const mtrl::Batch& batch,
                                        const modnet::PolicyNodes& nodes) {
    return g.scale(build_regularization_loss(g, frozen, batch.states, batch.tasks, nodes.action),
                   beta);
  });

  envs::SuiteConfig env_cfg = suite;
  env_cfg.seed = derive_seed(seed, "joint/env");
  envs::EnvSuite env(env_cfg);
  std::mt19937_64 k_rng(derive_seed(seed, "joint/k"));
  std::mt19937_64 select_rng(derive_seed(seed, "joint/select"));
  std::mt19937_64 act_rng(derive_seed(seed, "joint/act"));
  std::mt19937_64 replay_rng(derive_seed(seed, "joint/replay"));
  std::mt19937_64 noise_rng(derive_seed(seed, "joint/noise"));
  std::uniform_int_distribution<std::size_t> pick_k(1, n);

  mtrl::ReplayBuffer base_buffer(config.buffer_capacity, shape.state_dim, shape.action_dim,
                                 shape.task_count);
  // Groups of ims_group episodes sharing (state, task, K); the first one acts.
  std::deque<std::vector<SelectionEpisode>> ims_buffer;
  const std::size_t group = config.ims_group;
  const std::size_t buffer_groups = std::max<std::size_t>(1, config.ims_buffer / group);
  const std::size_t batch_groups = config.ims_batch / group;
  std::vector<JointMetricsRow> metrics;
  // Inner-loop Adam moments persist across Reptile rounds; each round restarts
  // only the weights from the outer selector.
  diffcore::Optimizer inner_opt({.learning_rate = config.ims_lr});
  std::size_t global_step = 0;

  for (std::size_t episode = 0; episode < config.episodes; ++episode) {
    if (config.reset_base_each_episode) agent.reset_policy(frozen.params());
    const std::size_t k = pick_k(k_rng);
    auto obs = env.reset(config.schedule);
    JointMetricsRow row{episode, k, 0.0, 0.0, 0.0, 0.0, false};
    std::size_t steps = 0, ims_updates = 0, base_updates = 0;

    while (true) {
      ++global_step;
      const TaskContext task(obs.task, shape.task_count);
      std::vector<SelectionEpisode> sels;
      for (std::size_t i = 0; i < group; ++i) {
        sels.push_back(select_k(ims, obs.state, task, k, SelectMode::kSample, select_rng));
        assign_rewards(agent.policy(), sels.back(), config.selection_gamma);
      }
      const auto mask = sels.front().mask();
      row.dist0 += sels.front().gaps.front();
      row.dist_k += sels.front().gaps.back();
      ims_buffer.push_back(std::move(sels));
      if (ims_buffer.size() > buffer_groups) ims_buffer.pop_front();

      if (global_step % config.ims_update_every == 0 && ims_buffer.size() >= batch_groups) {
        IterativeSelectorNet inner = ims;
        std::uniform_int_distribution<std::size_t> pick(0, ims_buffer.size() - 1);
        for (std::size_t it = 0; it < config.reptile_inner_steps; ++it) {
          std::vector<SelectionEpisode> batch;
          for (std::size_t b = 0; b < batch_groups; ++b) {
            const auto& members = ims_buffer[pick(replay_rng)];
            batch.insert(batch.end(), members.begin(), members.end());
          }
          Graph g;
          auto loss = build_ims_loss(g, inner, batch, group);
          g.evaluate();
          row.ims_loss += g.value(loss).item();
          ++ims_updates;
          inner_opt.step(inner.params(), g.gradients(loss, inner.params()));
        }
        ims.params() = reptile_update(ims.params(), inner.params(), config.reptile_eps);
      }

      const auto dist = agent.policy().forward(obs.state, task, mask);
      const auto action = to_vector(dist.sample(act_rng));
      envs::StepResult r;
      try {
        r = env.step(action);
      } catch (const envs::EnvError& e) {
        throw SelectError("joint episode " + std::to_string(episode) + ": " + e.what());
      }
      std::vector<double> mask_row(n);
      for (std::size_t j = 0; j < n; ++j) mask_row[j] = mask.test(j);
      base_buffer.add({to_vector(obs.state), action, r.reward, to_vector(r.state), obs.task, r.done,
                       r.success, std::move(mask_row)});

      if (global_step % config.base_update_every == 0 && base_buffer.size() >= config.batch_size) {
        try {
          const auto stats =
              agent.update(base_buffer.sample(config.batch_size, replay_rng), noise_rng);
          row.rg_loss += beta != 0.0 ? stats.extra_loss / beta : 0.0;
          ++base_updates;
        } catch (const mtrl::TrainError& e) {
          throw SelectError("joint episode " + std::to_string(episode) + ": " + e.what());
        }
      }
      ++steps;
      obs.state = r.state;
      if (r.done) {
        row.success = r.success;
        break;
      }
    }
    row.dist0 /= static_cast<double>(steps);
    row.dist_k /= static_cast<double>(steps);
    if (ims_updates) row.ims_loss /= static_cast<double>(ims_updates);
    if (base_updates) row.rg_loss /= static_cast<double>(base_updates);
    metrics.push_back(row);
    if (sink) sink(row);
  }
  return {agent.policy(), std::move(ims), agent.critics(), agent.temperatures(),
          std::move(metrics)};
}

std::vector<StateSample> sample_states(const envs::SuiteConfig& suite, std::size_t count,
                                       std::uint64_t seed) {
  envs::SuiteConfig cfg = suite;
  cfg.seed = seed;
  envs::EnvSuite env(cfg);
  std::mt19937_64 rng(derive_seed(seed, "states/walk"));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> walk(0, 30);
  std::vector<StateSample> out;
  out.reserve(count);
  while (out.size() < count) {
    auto obs = env.reset(envs::TaskSchedule::kUniform);
    const auto len = walk(rng);
    for (std::size_t t = 0; t < len; ++t) {
      const auto r = env.step(std::vector<double>{u(rng), u(rng)});
      obs.state = r.state;
      if (r.done) break;
    }
    out.push_back({obs.state, obs.task});
  }
  return out;
}

double mean_selection_gap(const modnet::ModularPolicyNet& base, const IterativeSelectorNet& ims,
                          std::span<const StateSample> states, std::size_t k) {
  if (states.empty()) throw SelectError("no evaluation states");
  std::mt19937_64 unused(0);
  double total = 0.0;
  for (const auto& s : states) {
    const TaskContext task(s.task, base.shape().task_count);
    const auto ep = select_k(ims, s.state, task, k, SelectMode::kGreedy, unused);
    total += action_gap(base, s.state, task, ep.mask());
  }
  return total / static_cast<double>(states.size());
}

}  // namespace modec::selector
