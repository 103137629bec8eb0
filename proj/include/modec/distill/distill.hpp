#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "modec/envs/env_suite.hpp"
#include "modec/modnet/modular_net.hpp"
#include "modec/selector/ims.hpp"
#include "modec/selector/joint.hpp"

namespace modec::distill {

using selector::SelectError;

/// pi_ms: one forward from (s, tau, K/N) to N module scores.
class OneShotSelectorNet : public selector::SelectorMlp {
 public:
  OneShotSelectorNet() = default;
  OneShotSelectorNet(selector::SelectorShape shape, std::mt19937_64& rng);
  OneShotSelectorNet(selector::SelectorShape shape, diffcore::ParameterSet params);

  static std::size_t feature_dim(const selector::SelectorShape& s) {
    return s.state_dim + s.task_count + 1;
  }
  diffcore::Tensor features(const diffcore::Tensor& state, const modnet::TaskContext& task,
                            std::size_t k) const;
};

/// Indices of the K largest scores, descending, lowest index first on ties.
std::vector<std::size_t> topk_order(std::span<const double> scores, std::size_t k);
modnet::ModuleMask topk_mask(std::span<const double> scores, std::size_t k);

/// Exactly one student forward.
modnet::ModuleMask select_topk(const OneShotSelectorNet& student, const diffcore::Tensor& state,
                               const modnet::TaskContext& task, std::size_t k);

/// Greedy iterative selection (K teacher forwards).
modnet::ModuleMask teacher_mask(const selector::IterativeSelectorNet& teacher,
                                const diffcore::Tensor& state, const modnet::TaskContext& task,
                                std::size_t k);

/// r - ||m - teacher||_2; for binary masks the penalty is sqrt(Hamming distance).
double shaped_reward(double reward, const modnet::ModuleMask& mask,
                     const modnet::ModuleMask& teacher);

/// 1 - Hamming(a, b) / N.
double mask_agreement(const modnet::ModuleMask& a, const modnet::ModuleMask& b);

struct DistillSample {
  diffcore::Tensor state;
  std::size_t task = 0;
  std::size_t task_count = 0;
  std::size_t k = 0;
  modnet::ModuleMask teacher;            // empty when trained without a teacher
  std::vector<std::size_t> order;        // student choices in selection order
  double shaped_reward = 0.0;
};

/// mean_i || scores_i - teacher_i ||.
diffcore::Node build_kd_loss(diffcore::Graph& g, const OneShotSelectorNet& student,
                             std::span<const DistillSample> batch);

/// -(1/B) sum_i (R_i - mean R) log P(order_i), with P the sequential
/// without-replacement softmax over the student scores.
diffcore::Node build_mask_reinforce_loss(diffcore::Graph& g, const OneShotSelectorNet& student,
                                         std::span<const DistillSample> batch);

struct DistillConfig {
  std::size_t steps = 20000;        // environment steps
  std::size_t batch_size = 64;
  std::size_t buffer_capacity = 100000;
  std::size_t warmup_steps = 256;
  std::size_t updates_per_step = 1;
  double lr = 1e-3;
  double env_weight = 0.1;          // coefficient of the REINFORCE term
  double explore_prob = 0.1;        // sample instead of top-K during training
  std::size_t hidden = 64;
  std::size_t log_interval = 1000;
  envs::TaskSchedule schedule = envs::TaskSchedule::kRoundRobin;
};

struct DistillMetricsRow {
  std::size_t step = 0;
  double kd_loss = 0.0;
  double hamming_agreement = 0.0;   // -1 without a teacher
  double shaped_reward = 0.0;
};

using DistillSink = std::function<void(const DistillMetricsRow&)>;

struct DistillResult {
  OneShotSelectorNet student;
  std::vector<DistillMetricsRow> metrics;
};

OneShotSelectorNet initial_student(const modnet::NetShape& shape, const DistillConfig& config,
                                   std::uint64_t seed);

/// Trains pi_ms against the frozen base and teacher. A null teacher trains
/// from scratch on the environment reward alone.
DistillResult distill_train(const envs::SuiteConfig& suite, const modnet::ModularPolicyNet& base,
                            const selector::IterativeSelectorNet* teacher,
                            const DistillConfig& config, std::uint64_t seed,
                            const DistillSink& sink = {});

struct AgreementReport {
  double hamming_agreement = 0.0;   // mean per-bit agreement
  double exact_match = 0.0;         // fraction of identical masks
};

/// Held-out (s, tau, K) triples: the given states with K uniform in [1, N].
AgreementReport heldout_agreement(const OneShotSelectorNet& student,
                                  const selector::IterativeSelectorNet& teacher,
                                  std::span<const selector::StateSample> states,
                                  std::uint64_t seed);

}  // namespace modec::distill
