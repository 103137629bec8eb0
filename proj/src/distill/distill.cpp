#include "modec/distill/distill.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <string>

#include "modec/diffcore/optimizer.hpp"
#include "modec/diffcore/seed.hpp"

namespace modec::distill {

using diffcore::derive_seed;
using diffcore::Graph;
using diffcore::Node;
using diffcore::Tensor;
using modnet::ModuleMask;
using modnet::TaskContext;

namespace {

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    throw SelectError("K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
}

ModuleMask mask_of(std::span<const std::size_t> order, std::size_t n) {
  ModuleMask m(n);
  for (auto i : order) m.set(i);
  return m;
}

void validate(const DistillConfig& c, bool has_teacher) {
  if (c.batch_size == 0 || c.buffer_capacity < c.batch_size) throw SelectError("bad distill batch sizes");
  if (c.log_interval == 0) throw SelectError("log interval must be positive");
  if (!(c.explore_prob >= 0.0 && c.explore_prob <= 1.0)) throw SelectError("explore_prob outside [0, 1]");
  if (!(c.env_weight >= 0.0)) throw SelectError("env_weight must be non-negative");
  if (!has_teacher && c.env_weight == 0.0) throw SelectError("no teacher and no reward term: nothing to learn");
}

}  // namespace

OneShotSelectorNet::OneShotSelectorNet(selector::SelectorShape shape, std::mt19937_64& rng)
    : SelectorMlp(shape, feature_dim(shape), rng) {}

OneShotSelectorNet::OneShotSelectorNet(selector::SelectorShape shape, diffcore::ParameterSet params)
    : SelectorMlp(shape, feature_dim(shape), std::move(params)) {}

Tensor OneShotSelectorNet::features(const Tensor& state, const TaskContext& task,
                                    std::size_t k) const {
  return selector::selector_features(state, task, k, shape().module_count, nullptr);
}

std::vector<std::size_t> topk_order(std::span<const double> scores, std::size_t k) {
  check_k(k, scores.size());
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(k);
  return idx;
}

ModuleMask topk_mask(std::span<const double> scores, std::size_t k) {
  return mask_of(topk_order(scores, k), scores.size());
}

ModuleMask select_topk(const OneShotSelectorNet& student, const Tensor& state,
                       const TaskContext& task, std::size_t k) {
  check_k(k, student.shape().module_count);
  return topk_mask(student.scores(student.features(state, task, k)).values(), k);
}

ModuleMask teacher_mask(const selector::IterativeSelectorNet& teacher, const Tensor& state,
                        const TaskContext& task, std::size_t k) {
  std::mt19937_64 unused(0);
  return selector::select_k(teacher, state, task, k, selector::SelectMode::kGreedy, unused).mask();
}

double shaped_reward(double reward, const ModuleMask& mask, const ModuleMask& teacher) {
  if (mask.size() != teacher.size()) throw SelectError("shaped reward of masks of different length");
  return reward - std::sqrt(static_cast<double>(modnet::hamming_distance(mask, teacher)));
}

double mask_agreement(const ModuleMask& a, const ModuleMask& b) {
  if (a.size() != b.size() || a.size() == 0) throw SelectError("agreement of incompatible masks");
  return 1.0 - static_cast<double>(modnet::hamming_distance(a, b)) / static_cast<double>(a.size());
}

Node build_kd_loss(Graph& g, const OneShotSelectorNet& student,
                   std::span<const DistillSample> batch) {
  if (batch.empty()) throw SelectError("distillation loss of an empty batch");
  const auto n = student.shape().module_count;
  Tensor features(batch.size(), student.input_dim());
  Tensor targets(batch.size(), n);
  for (std::size_t r = 0; r < batch.size(); ++r) {
    const auto& b = batch[r];
    if (b.teacher.size() != n) throw SelectError("distillation sample has no teacher mask");
    const auto f = student.features(b.state, TaskContext(b.task, b.task_count), b.k);
    for (std::size_t c = 0; c < f.cols(); ++c) features(r, c) = f[c];
    for (std::size_t c = 0; c < n; ++c) targets(r, c) = b.teacher.test(c);
  }
  auto scores = student.build(g, g.constant(features));
  auto loss = g.mean(g.row_norm(g.sub(scores, g.constant(targets))));
  g.label(loss, "kd_loss");
  return loss;
}

Node build_mask_reinforce_loss(Graph& g, const OneShotSelectorNet& student,
                               std::span<const DistillSample> batch) {
  if (batch.empty()) throw SelectError("reinforce loss of an empty batch");
  const auto n = student.shape().module_count;
  std::size_t rows = 0;
  double mean_r = 0.0;
  for (const auto& b : batch) {
    if (b.order.size() != b.k) throw SelectError("distillation sample order does not hold K choices");
    if (!std::isfinite(b.shaped_reward)) throw SelectError("non-finite shaped reward");
    rows += b.k;
    mean_r += b.shaped_reward;
  }
  mean_r /= static_cast<double>(batch.size());

  Tensor features(rows, student.input_dim());
  Tensor legal(rows, n);
  Tensor chosen(rows, n);
  Tensor advantage(rows, 1);
  std::size_t r = 0;
  for (const auto& b : batch) {
    const auto f = student.features(b.state, TaskContext(b.task, b.task_count), b.k);
    ModuleMask taken(n);
    for (auto choice : b.order) {
      if (taken.test(choice)) throw SelectError("distillation sample repeats a module");
      for (std::size_t c = 0; c < f.cols(); ++c) features(r, c) = f[c];
      for (std::size_t c = 0; c < n; ++c) legal(r, c) = taken.test(c) ? 0.0 : 1.0;
      chosen(r, choice) = 1.0;
      advantage(r, 0) = b.shaped_reward - mean_r;
      taken.set(choice);
      ++r;
    }
  }
  auto log_probs =
      g.masked_log_softmax(student.build(g, g.constant(features)), g.constant(legal));
  auto logp = g.row_sum(g.mul(log_probs, g.constant(chosen)));
  auto loss = g.scale(g.sum(g.mul(logp, g.constant(advantage))),
                      -1.0 / static_cast<double>(batch.size()));
  g.label(loss, "mask_reinforce_loss");
  return loss;
}

OneShotSelectorNet initial_student(const modnet::NetShape& shape, const DistillConfig& config,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "distill/init"));
  return OneShotSelectorNet(
      {shape.state_dim, shape.task_count, shape.module_count(), config.hidden}, rng);
}

DistillResult distill_train(const envs::SuiteConfig& suite, const modnet::ModularPolicyNet& base,
                            const selector::IterativeSelectorNet* teacher,
                            const DistillConfig& config, std::uint64_t seed,
                            const DistillSink& sink) {
  validate(config, teacher != nullptr);
  const auto shape = base.shape();
  const auto n = shape.module_count();
  if (shape.task_count != suite.tasks) throw SelectError("base net does not match the suite");
  if (teacher && teacher->shape().module_count != n) {
    throw SelectError("teacher selector does not match the base net");
  }
  auto student = initial_student(shape, config, seed);
  diffcore::Optimizer opt({.learning_rate = config.lr});

  envs::SuiteConfig env_cfg = suite;
  env_cfg.seed = derive_seed(seed, "distill/env");
  envs::EnvSuite env(env_cfg);
  std::mt19937_64 k_rng(derive_seed(seed, "distill/k"));
  std::mt19937_64 explore_rng(derive_seed(seed, "distill/explore"));
  std::mt19937_64 replay_rng(derive_seed(seed, "distill/replay"));
  std::uniform_int_distribution<std::size_t> pick_k(1, n);
  std::bernoulli_distribution explore(config.explore_prob);

  std::deque<DistillSample> buffer;
  std::vector<DistillMetricsRow> metrics;
  double kd_sum = 0.0, agree_sum = 0.0, shaped_sum = 0.0;
  std::size_t kd_count = 0, step_count = 0;

  auto obs = env.reset(config.schedule);
  std::size_t k = pick_k(k_rng);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const TaskContext task(obs.task, shape.task_count);
    ModuleMask target = teacher ? teacher_mask(*teacher, obs.state, task, k) : ModuleMask();
    const auto scores = student.scores(student.features(obs.state, task, k));
    std::vector<std::size_t> order;
    if (explore(explore_rng)) {
      ModuleMask taken(n);
      for (std::size_t i = 0; i < k; ++i) {
        order.push_back(selector::choose(scores.values(), taken, selector::SelectMode::kSample,
                                         explore_rng));
        taken.set(order.back());
      }
    } else {
      order = topk_order(scores.values(), k);
    }
    const auto mask = mask_of(order, n);
    if (teacher) agree_sum += mask_agreement(topk_mask(scores.values(), k), target);

    envs::StepResult r;
    try {
      const auto action = base.forward(obs.state, task, mask).deterministic();
      r = env.step(action.values());
    } catch (const envs::EnvError& e) {
      throw SelectError("distill step " + std::to_string(step) + ": " + e.what());
    }
    const double shaped = teacher ? shaped_reward(r.reward, mask, target) : r.reward;
    shaped_sum += shaped;
    ++step_count;
    buffer.push_back({obs.state, obs.task, shape.task_count, k, std::move(target), std::move(order),
                      shaped});
    if (buffer.size() > config.buffer_capacity) buffer.pop_front();

    if (buffer.size() >= std::max(config.batch_size, config.warmup_steps)) {
      std::uniform_int_distribution<std::size_t> pick(0, buffer.size() - 1);
      for (std::size_t u = 0; u < config.updates_per_step; ++u) {
        std::vector<DistillSample> batch;
        batch.reserve(config.batch_size);
        for (std::size_t b = 0; b < config.batch_size; ++b) batch.push_back(buffer[pick(replay_rng)]);
        Graph g;
        Node loss;
        if (teacher) {
          auto kd = build_kd_loss(g, student, batch);
          loss = config.env_weight > 0.0
                     ? g.add(kd, g.scale(build_mask_reinforce_loss(g, student, batch),
                                         config.env_weight))
                     : kd;
          g.evaluate();
          kd_sum += g.value(kd).item();
          ++kd_count;
        } else {
          loss = g.scale(build_mask_reinforce_loss(g, student, batch), config.env_weight);
          g.evaluate();
        }
        opt.step(student.params(), g.gradients(loss, student.params()));
      }
    }

    obs.state = r.state;
    if (r.done) {
      obs = env.reset(config.schedule);
      k = pick_k(k_rng);
    }
    if (step % config.log_interval == 0 || step == config.steps) {
      const double count = static_cast<double>(step_count);
      DistillMetricsRow row{step, kd_count ? kd_sum / static_cast<double>(kd_count) : 0.0,
                            teacher ? agree_sum / count : -1.0, shaped_sum / count};
      metrics.push_back(row);
      if (sink) sink(row);
      kd_sum = agree_sum = shaped_sum = 0.0;
      kd_count = step_count = 0;
    }
  }
  student.reset_forward_count();
  return {std::move(student), std::move(metrics)};
}

AgreementReport heldout_agreement(const OneShotSelectorNet& student,
                                  const selector::IterativeSelectorNet& teacher,
                                  std::span<const selector::StateSample> states,
                                  std::uint64_t seed) {
  if (states.empty()) throw SelectError("no held-out states");
  const auto n = student.shape().module_count;
  std::mt19937_64 rng(derive_seed(seed, "distill/heldout-k"));
  std::uniform_int_distribution<std::size_t> pick_k(1, n);
  AgreementReport out;
  for (const auto& s : states) {
    const TaskContext task(s.task, student.shape().task_count);
    const auto k = pick_k(rng);
    const auto a = select_topk(student, s.state, task, k);
    const auto b = teacher_mask(teacher, s.state, task, k);
    out.hamming_agreement += mask_agreement(a, b);
    out.exact_match += a == b ? 1.0 : 0.0;
  }
  out.hamming_agreement /= static_cast<double>(states.size());
  out.exact_match /= static_cast<double>(states.size());
  return out;
}

}  // namespace modec::distill
