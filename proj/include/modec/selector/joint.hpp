#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "modec/envs/env_suite.hpp"
#include "modec/mtrl/pretrain.hpp"
#include "modec/selector/ims.hpp"

namespace modec::selector {

struct JointConfig {
  std::size_t episodes = 240;
  bool reset_base_each_episode = true;
  double rg_weight = 1.0;           // beta on the regularization loss
  double selection_gamma = 1.0;
  std::size_t reptile_inner_steps = 4;
  double reptile_eps = 0.5;
  double ims_lr = 1e-3;
  std::size_t ims_batch = 32;       // selection episodes per inner step
  std::size_t ims_buffer = 32;      // selection episodes kept; small keeps D_ims near on-policy
  std::size_t ims_group = 4;        // episodes sampled per env step for a leave-one-out baseline
  std::size_t ims_update_every = 8; // env steps between Reptile rounds
  std::size_t base_update_every = 1;
  std::size_t batch_size = 64;
  std::size_t buffer_capacity = 100000;
  std::size_t selector_hidden = 64;
  bool selector_task_heads = true;  // per-task output heads in the iterative selector
  envs::TaskSchedule schedule = envs::TaskSchedule::kRoundRobin;
  mtrl::SacConfig sac;
};

struct JointMetricsRow {
  std::size_t episode = 0;
  std::size_t k = 0;
  double dist0 = 0.0;    // mean over the episode's env steps
  double dist_k = 0.0;
  double ims_loss = 0.0;
  double rg_loss = 0.0;
  bool success = false;
};

using JointSink = std::function<void(const JointMetricsRow&)>;

struct JointResult {
  modnet::ModularPolicyNet base;
  IterativeSelectorNet ims;
  mtrl::CriticPair critics;
  mtrl::TemperatureBank temperatures;
  std::vector<JointMetricsRow> metrics;
};

/// Untrained selector for `seed`; joint_learn starts from exactly this net.
IterativeSelectorNet initial_selector(const modnet::NetShape& shape, const JointConfig& config,
                                      std::uint64_t seed);

/// Alternating selector (REINFORCE inside Reptile) and base (SAC + beta * RG)
/// training starting from the pretrained state.
JointResult joint_learn(const envs::SuiteConfig& suite, const mtrl::PretrainResult& pretrained,
                        const JointConfig& config, std::uint64_t seed, const JointSink& sink = {});

/// Held-out evaluation states: fresh resets followed by random-action steps.
struct StateSample {
  diffcore::Tensor state;
  std::size_t task = 0;
};
std::vector<StateSample> sample_states(const envs::SuiteConfig& suite, std::size_t count,
                                       std::uint64_t seed);

/// Mean Dist(K) of greedy selections over `states`.
double mean_selection_gap(const modnet::ModularPolicyNet& base, const IterativeSelectorNet& ims,
                          std::span<const StateSample> states, std::size_t k);

}  // namespace modec::selector
