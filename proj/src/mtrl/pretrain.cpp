#include "modec/mtrl/pretrain.hpp"

#include <string>

#include "modec/diffcore/seed.hpp"

namespace modec::mtrl {

using diffcore::derive_seed;
using diffcore::Tensor;

namespace {

void check_shape(const envs::SuiteConfig& suite, const modnet::NetShape& shape) {
  if (shape.state_dim != envs::EnvSuite::kStateDim ||
      shape.action_dim != envs::EnvSuite::kActionDim || shape.task_count != suite.tasks) {
    throw TrainError("network shape does not match the environment suite");
  }
}

std::vector<double> to_vector(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

PretrainResult initial_state(const modnet::NetShape& shape, const PretrainConfig& config,
                             std::uint64_t seed) {
  std::mt19937_64 init(derive_seed(seed, "pretrain/init"));
  modnet::ModularPolicyNet policy(shape, init);
  CriticPair critics({shape.state_dim, shape.action_dim, shape.task_count, config.sac.critic_hidden},
                     init);
  TemperatureBank temps(shape.task_count, config.sac.initial_log_alpha,
                        -static_cast<double>(shape.action_dim), config.sac.alpha_lr);
  return {std::move(policy), std::move(critics), std::move(temps), {}};
}

PretrainResult pretrain(const envs::SuiteConfig& suite, const modnet::NetShape& shape,
                        const PretrainConfig& config, std::uint64_t seed,
                        const MetricsSink& sink) {
  check_shape(suite, shape);
  if (config.batch_size == 0) throw TrainError("batch size must be positive");
  if (config.log_interval == 0) throw TrainError("log interval must be positive");
  auto init = initial_state(shape, config, seed);
  if (config.steps == 0) return init;

  SacAgent agent(std::move(init.policy), std::move(init.critics), std::move(init.temperatures),
                 config.sac);
  envs::SuiteConfig env_cfg = suite;
  env_cfg.seed = derive_seed(seed, "pretrain/env");
  envs::EnvSuite env(env_cfg);
  std::mt19937_64 act_rng(derive_seed(seed, "pretrain/act"));
  std::mt19937_64 replay_rng(derive_seed(seed, "pretrain/replay"));
  std::mt19937_64 noise_rng(derive_seed(seed, "pretrain/noise"));
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  ReplayBuffer buffer(config.buffer_capacity, shape.state_dim, shape.action_dim, shape.task_count);
  const auto full = modnet::ModuleMask::full(shape.module_count());
  std::vector<MetricsRow> metrics;

  std::vector<std::size_t> wins(shape.task_count, 0), episodes(shape.task_count, 0);
  double actor_sum = 0.0, critic_sum = 0.0;
  std::size_t update_count = 0;

  auto obs = env.reset(config.schedule);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    std::vector<double> action(shape.action_dim);
    if (step <= config.warmup_steps) {
      for (auto& a : action) a = uniform(act_rng);
    } else {
      const auto dist =
          agent.policy().forward(obs.state, modnet::TaskContext(obs.task, shape.task_count), full);
      action = to_vector(dist.sample(act_rng));
    }
    envs::StepResult r;
    try {
      r = env.step(action);
    } catch (const envs::EnvError& e) {
      throw TrainError("environment failure at step " + std::to_string(step) + ": " + e.what());
    }
    buffer.add({to_vector(obs.state), action, r.reward, to_vector(r.state), obs.task, r.done,
                r.success});
    if (r.done) {
      ++episodes[obs.task];
      wins[obs.task] += r.success;
      obs = env.reset(config.schedule);
    } else {
      obs.state = r.state;
    }

    if (step > config.warmup_steps && buffer.size() >= config.batch_size) {
      for (std::size_t u = 0; u < config.updates_per_step; ++u) {
        try {
          const auto stats = agent.update(buffer.sample(config.batch_size, replay_rng), noise_rng);
          actor_sum += stats.actor_loss;
          critic_sum += stats.critic_loss;
          ++update_count;
        } catch (const TrainError& e) {
          throw TrainError("pretrain step " + std::to_string(step) + ": " + e.what());
        }
      }
    }

    if (step % config.log_interval == 0 || step == config.steps) {
      const double n = update_count ? static_cast<double>(update_count) : 1.0;
      for (std::size_t t = 0; t < shape.task_count; ++t) {
        MetricsRow row{step,
                       t,
                       episodes[t] ? static_cast<double>(wins[t]) / episodes[t] : -1.0,
                       actor_sum / n,
                       critic_sum / n,
                       agent.temperatures().alpha(t)};
        metrics.push_back(row);
        if (sink) sink(row);
      }
      std::fill(wins.begin(), wins.end(), 0);
      std::fill(episodes.begin(), episodes.end(), 0);
      actor_sum = critic_sum = 0.0;
      update_count = 0;
    }
  }
  return {agent.policy(), agent.critics(), agent.temperatures(), std::move(metrics)};
}

double rollout_success(const modnet::ModularPolicyNet& policy, const envs::SuiteConfig& suite,
                       std::size_t episodes_per_task, std::uint64_t seed,
                       const modnet::ModuleMask* mask) {
  envs::SuiteConfig cfg = suite;
  cfg.seed = seed;
  envs::EnvSuite env(cfg);
  const auto full = modnet::ModuleMask::full(policy.shape().module_count());
  const auto& m = mask ? *mask : full;
  std::size_t wins = 0, total = 0;
  for (std::size_t task = 0; task < cfg.tasks; ++task) {
    for (std::size_t ep = 0; ep < episodes_per_task; ++ep) {
      auto obs = env.reset_task(task);
      while (true) {
        const auto a = policy.forward(obs.state, modnet::TaskContext(task, cfg.tasks), m);
        const auto r = env.step(a.deterministic().values());
        obs.state = r.state;
        if (r.done) {
          wins += r.success;
          break;
        }
      }
      ++total;
    }
  }
  return total ? static_cast<double>(wins) / static_cast<double>(total) : 0.0;
}

}  // namespace modec::mtrl
