#include <cmath>
#include <random>

#include "doctest.h"
#include "modec/distill/distill.hpp"
#include "support/finite_diff.hpp"

using namespace modec;
using namespace modec::distill;
using diffcore::Graph;
using diffcore::Tensor;
using modnet::ModuleMask;
using modnet::TaskContext;

namespace {

modnet::NetShape net_shape(std::size_t layers = 2, std::size_t per_layer = 2) {
  return {.layers = layers, .modules_per_layer = per_layer, .hidden = 6, .state_dim = 4,
          .action_dim = 2, .task_count = 2};
}

selector::SelectorShape sel_shape(std::size_t n, std::size_t hidden = 5) {
  return {4, 2, n, hidden};
}

Tensor random_state(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return Tensor::row({u(rng), u(rng), u(rng), u(rng)});
}

std::vector<DistillSample> random_batch(std::size_t size, std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick_k(1, n);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::bernoulli_distribution bit(0.5);
  std::vector<DistillSample> out;
  for (std::size_t i = 0; i < size; ++i) {
    DistillSample s{random_state(rng), i % 2, 2, pick_k(rng), ModuleMask(n), {}, noise(rng)};
    for (std::size_t j = 0; j < n; ++j)
      if (bit(rng)) s.teacher.set(j);
    std::vector<double> perm(n);
    for (auto& v : perm) v = noise(rng);
    s.order = topk_order(perm, s.k);
    out.push_back(s);
  }
  return out;
}

double eval_loss(const OneShotSelectorNet& net, const std::vector<DistillSample>& batch, bool kd) {
  Graph g;
  auto loss = kd ? build_kd_loss(g, net, batch) : build_mask_reinforce_loss(g, net, batch);
  g.evaluate();
  return g.value(loss).item();
}

}  // namespace

TEST_CASE("top-K: direct, tie rule, exhaustive, range errors") {
  CHECK(topk_mask(std::vector<double>{0.9, 0.1, 0.9, 0.2}, 2) ==
        ModuleMask(std::vector<std::uint8_t>{1, 0, 1, 0}));
  CHECK(topk_mask(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 2) ==
        ModuleMask(std::vector<std::uint8_t>{1, 1, 0, 0}));
  CHECK(topk_mask(std::vector<double>{3.0, -1.0, 7.0, 0.0}, 4) == ModuleMask::full(4));
  CHECK(topk_order(std::vector<double>{0.1, 0.7, 0.4}, 3) == std::vector<std::size_t>{1, 2, 0});
  CHECK_THROWS_AS(topk_mask(std::vector<double>{1.0, 2.0}, 0), SelectError);
  CHECK_THROWS_AS(topk_mask(std::vector<double>{1.0, 2.0}, 3), SelectError);
}

TEST_CASE("select_topk: exactly K distinct modules for every K on a 4x4 net") {
  std::mt19937_64 rng(3);
  OneShotSelectorNet net(sel_shape(16), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const auto s = random_state(rng);
    const TaskContext task(trial % 2, 2);
    for (std::size_t k = 1; k <= 16; ++k) {
      const auto m = select_topk(net, s, task, k);
      CHECK(m.count() == k);
      // Every selected score dominates every unselected one.
      const auto scores = net.scores(net.features(s, task, k));
      for (std::size_t a = 0; a < 16; ++a)
        for (std::size_t b = 0; b < 16; ++b)
          if (m.test(a) && !m.test(b)) CHECK(scores[a] >= scores[b]);
    }
    CHECK(select_topk(net, s, task, 16) == ModuleMask::full(16));
  }
}

TEST_CASE("forward counts: one student pass versus K teacher passes") {
  std::mt19937_64 rng(5);
  OneShotSelectorNet student(sel_shape(16), rng);
  selector::IterativeSelectorNet teacher(sel_shape(16), rng);
  const TaskContext task(1, 2);
  for (std::size_t k = 1; k <= 16; ++k) {
    const auto s = random_state(rng);
    student.reset_forward_count();
    teacher.reset_forward_count();
    const auto a = select_topk(student, s, task, k);
    const auto b = teacher_mask(teacher, s, task, k);
    CHECK(student.forward_count() == 1);
    CHECK(teacher.forward_count() == k);
    CHECK(a.count() == k);
    CHECK(b.count() == k);
  }
}

TEST_CASE("shaped reward and agreement arithmetic") {
  const ModuleMask a(std::vector<std::uint8_t>{1, 1, 0, 0, 1, 0});
  CHECK(shaped_reward(0.7, a, a) == 0.7);
  const ModuleMask b(std::vector<std::uint8_t>{0, 0, 1, 1, 1, 0});
  CHECK(shaped_reward(1.0, a, b) == -1.0);
  const ModuleMask c(std::vector<std::uint8_t>{0, 1, 0, 0, 1, 1});
  CHECK(shaped_reward(0.0, a, c) == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-15));
  CHECK(mask_agreement(a, a) == 1.0);
  CHECK(mask_agreement(a, b) == doctest::Approx(2.0 / 6.0).epsilon(1e-15));
  CHECK_THROWS_AS(shaped_reward(0.0, a, ModuleMask(4)), SelectError);
}

TEST_CASE("kd loss: zero exactly at the teacher mask, positive otherwise") {
  std::mt19937_64 rng(7);
  OneShotSelectorNet net(sel_shape(4), rng);
  // Zero weights leave the head bias as the score for every input.
  for (auto& v : net.params().get("out.w").values()) v = 0.0;
  auto& bias = net.params().get("out.b");
  const ModuleMask teacher(std::vector<std::uint8_t>{0, 1, 1, 0});
  for (std::size_t j = 0; j < 4; ++j) bias[j] = teacher.test(j);
  std::vector<DistillSample> batch;
  for (int i = 0; i < 4; ++i) batch.push_back({random_state(rng), 0, 2, 2, teacher, {}, 0.0});
  CHECK(eval_loss(net, batch, true) == 0.0);
  bias[0] = 0.5;
  CHECK(eval_loss(net, batch, true) == doctest::Approx(0.5).epsilon(1e-15));
  batch[0].teacher = ModuleMask();
  Graph g;
  CHECK_THROWS_AS(build_kd_loss(g, net, batch), SelectError);
}

TEST_CASE("kd loss ignores the base network") {
  std::mt19937_64 rng(9);
  OneShotSelectorNet net(sel_shape(4), rng);
  selector::IterativeSelectorNet teacher(sel_shape(4), rng);
  std::vector<DistillSample> batch;
  for (int i = 0; i < 6; ++i) {
    const auto s = random_state(rng);
    batch.push_back({s, 1, 2, 2, teacher_mask(teacher, s, TaskContext(1, 2), 2), {}, 0.0});
  }
  const double before = eval_loss(net, batch, true);
  modnet::ModularPolicyNet base(net_shape(), rng);
  for (auto& [name, t] : base.params())
    for (auto& v : t.values()) v += 0.3;
  CHECK(eval_loss(net, batch, true) == before);
}

TEST_CASE("kd and mask-reinforce gradients match finite differences") {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    OneShotSelectorNet net(sel_shape(4, 4), rng);
    const auto batch = random_batch(3, 4, rng);
    for (bool kd : {true, false}) {
      Graph g;
      auto loss = kd ? build_kd_loss(g, net, batch) : build_mask_reinforce_loss(g, net, batch);
      g.evaluate();
      const auto analytic = g.gradients(loss, net.params());
      const auto numeric =
          testing::numeric_gradient(net.params(), [&] { return eval_loss(net, batch, kd); });
      CAPTURE(seed);
      CAPTURE(kd);
      CHECK(testing::max_relative_error(analytic, numeric) < 1e-4);
    }
  }
}

TEST_CASE("mask-reinforce: equal rewards give zero gradient, sign raises rewarded order") {
  std::mt19937_64 rng(11);
  OneShotSelectorNet net(sel_shape(4), rng);
  auto batch = random_batch(4, 4, rng);
  for (auto& b : batch) b.shaped_reward = 2.5;
  Graph g;
  auto loss = build_mask_reinforce_loss(g, net, batch);
  g.evaluate();
  for (const auto& [name, t] : g.gradients(loss, net.params()))
    for (double v : t.values()) CHECK(v == 0.0);

  const auto s = random_state(rng);
  std::vector<DistillSample> pair{{s, 0, 2, 1, {}, {2}, 1.0}, {s, 0, 2, 1, {}, {0}, 0.0}};
  auto prob = [&](std::size_t j) {
    const auto sc = net.scores(net.features(s, TaskContext(0, 2), 1));
    double z = 0.0;
    for (double v : sc.values()) z += std::exp(v);
    return std::exp(sc[j]) / z;
  };
  const double before = prob(2);
  Graph h;
  auto l = build_mask_reinforce_loss(h, net, pair);
  h.evaluate();
  diffcore::Optimizer opt({.kind = diffcore::OptimizerKind::kSgd, .learning_rate = 0.05});
  opt.step(net.params(), h.gradients(l, net.params()));
  CHECK(prob(2) > before);
}

TEST_CASE("distill_train: deterministic, logs, learns toward the teacher") {
  std::mt19937_64 rng(13);
  const auto shape = net_shape();
  modnet::ModularPolicyNet base(shape, rng);
  selector::IterativeSelectorNet teacher(sel_shape(4, 8), rng);
  envs::SuiteConfig suite{.kind = envs::SuiteKind::kMultiGoal, .tasks = 2, .horizon = 20, .seed = 1};
  DistillConfig cfg;
  cfg.steps = 600;
  cfg.batch_size = 16;
  cfg.warmup_steps = 16;
  cfg.hidden = 16;
  cfg.lr = 3e-3;
  cfg.log_interval = 200;
  std::vector<DistillMetricsRow> rows;
  const auto a = distill_train(suite, base, &teacher, cfg, 5,
                               [&](const DistillMetricsRow& r) { rows.push_back(r); });
  const auto b = distill_train(suite, base, &teacher, cfg, 5);
  CHECK(a.student.params().identical(b.student.params()));
  REQUIRE(rows.size() == 3);
  CHECK(rows[2].step == 600);
  for (const auto& r : rows) {
    CHECK(r.hamming_agreement >= 0.0);
    CHECK(r.hamming_agreement <= 1.0);
    CHECK(r.shaped_reward <= 0.0);
  }
  CHECK(rows[2].kd_loss < rows[0].kd_loss);

  const auto states = selector::sample_states(suite, 64, 77);
  const auto trained = heldout_agreement(a.student, teacher, states, 3);
  const auto untrained = heldout_agreement(initial_student(shape, cfg, 5), teacher, states, 3);
  CHECK(trained.hamming_agreement > untrained.hamming_agreement);

  cfg.env_weight = 1.0;
  const auto scratch = distill_train(suite, base, nullptr, cfg, 5);
  CHECK(scratch.metrics.back().hamming_agreement == -1.0);
  cfg.env_weight = 0.0;
  CHECK_THROWS_AS(distill_train(suite, base, nullptr, cfg, 5), SelectError);
  selector::IterativeSelectorNet wrong(sel_shape(16), rng);
  CHECK_THROWS_AS(distill_train(suite, base, &wrong, cfg, 5), SelectError);
}
