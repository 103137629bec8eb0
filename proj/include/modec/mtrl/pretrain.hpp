#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "modec/envs/env_suite.hpp"
#include "modec/mtrl/sac.hpp"

namespace modec::mtrl {

struct PretrainConfig {
  std::size_t steps = 20000;
  std::size_t batch_size = 128;
  std::size_t buffer_capacity = 100000;
  std::size_t warmup_steps = 1000;   // uniform random actions before learning starts
  std::size_t updates_per_step = 1;
  std::size_t log_interval = 1000;
  envs::TaskSchedule schedule = envs::TaskSchedule::kRoundRobin;
  SacConfig sac;
};

/// One row per task per log interval.
struct MetricsRow {
  std::size_t step = 0;
  std::size_t task = 0;
  double success_rate = 0.0;  // over training episodes finished in the interval; -1 if none
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double alpha = 0.0;
};

using MetricsSink = std::function<void(const MetricsRow&)>;

struct PretrainResult {
  modnet::ModularPolicyNet policy;
  CriticPair critics;
  TemperatureBank temperatures;
  std::vector<MetricsRow> metrics;
};

/// Initial networks for `seed`; pretrain with steps = 0 returns exactly these.
PretrainResult initial_state(const modnet::NetShape& shape, const PretrainConfig& config,
                             std::uint64_t seed);

/// Multi-task SAC on `suite` with the full mask for every forward.
PretrainResult pretrain(const envs::SuiteConfig& suite, const modnet::NetShape& shape,
                        const PretrainConfig& config, std::uint64_t seed,
                        const MetricsSink& sink = {});

/// Success rate of deterministic full-mask (or `mask`) rollouts, `episodes`
/// per task on a fresh suite seeded with `seed`.
double rollout_success(const modnet::ModularPolicyNet& policy, const envs::SuiteConfig& suite,
                       std::size_t episodes_per_task, std::uint64_t seed,
                       const modnet::ModuleMask* mask = nullptr);

}  // namespace modec::mtrl
