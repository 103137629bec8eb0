#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "doctest.h"
#include "modec/device/device.hpp"
#include "support/finite_diff.hpp"

using namespace modec;
using namespace modec::device;
using diffcore::Graph;
using diffcore::Tensor;
using modnet::TaskContext;

namespace {

struct Nets {
  modnet::ModularPolicyNet base;
  distill::OneShotSelectorNet student;
};

Nets make_nets(std::size_t layers = 4, std::size_t per_layer = 4) {
  std::mt19937_64 rng(1);
  modnet::NetShape shape{.layers = layers, .modules_per_layer = per_layer, .hidden = 8,
                         .state_dim = 4, .action_dim = 2, .task_count = 4};
  Nets n{modnet::ModularPolicyNet(shape, rng), {}};
  n.student = distill::OneShotSelectorNet({4, 4, shape.module_count(), 8}, rng);
  return n;
}

DeviceProfile example_profile(double sigma_us = 0.0) {
  return {"example", 1500.0, 2000.0, sigma_us, LatencyMode::kSimulated};
}

double eval_da(const DeviceAdapterNet& net, const std::vector<LatencySample>& batch, double p) {
  Graph g;
  auto loss = build_da_loss(g, net, batch, p);
  g.evaluate();
  return g.value(loss).item();
}

}  // namespace

TEST_CASE("profiles: parsing, validation, round trip") {
  const auto p = parse_profile(
      R"({"name": "mid", "per_module_us": 900, "overhead_us": 1200, "noise_sigma_us": 50, "mode": "simulated"})");
  CHECK(p.name == "mid");
  CHECK(p.per_module_us == 900.0);
  CHECK(p.expected_ms(4) == doctest::Approx(4.8).epsilon(1e-15));
  const auto q = parse_profile(profile_to_json(p));
  CHECK(q.name == p.name);
  CHECK(q.per_module_us == p.per_module_us);
  CHECK(q.overhead_us == p.overhead_us);
  CHECK(q.noise_sigma_us == p.noise_sigma_us);
  CHECK(q.mode == p.mode);
  CHECK_THROWS_AS(parse_profile(R"({"name": "x", "per_module_us": 1, "overhead_us": 1, "typo": 2})"),
                  DeviceError);
  CHECK_THROWS_AS(parse_profile(R"({"name": "x", "per_module_us": -1, "overhead_us": 1})"),
                  DeviceError);
  CHECK_THROWS_AS(parse_profile(R"({"name": "x", "per_module_us": 1, "overhead_us": 1, "mode": "gpu"})"),
                  DeviceError);
  CHECK_THROWS_AS(parse_profile("not json"), DeviceError);
  CHECK_THROWS_AS(load_profile("/nonexistent/profile.json"), DeviceError);

  const auto path = std::filesystem::temp_directory_path() / "modec_profile_test.json";
  std::ofstream(path) << profile_to_json(p);
  CHECK(load_profile(path).overhead_us == 1200.0);
  std::filesystem::remove(path);
}

TEST_CASE("simulated latency: formula, monotone in K, noise truncated at zero") {
  std::mt19937_64 rng(3);
  const auto p = example_profile();
  CHECK(simulated_latency_ms(p, 4, rng) == doctest::Approx(8.0).epsilon(1e-15));
  for (std::size_t k = 1; k < 16; ++k) {
    CHECK(simulated_latency_ms(p, k + 1, rng) > simulated_latency_ms(p, k, rng));
  }
  DeviceProfile loud{"loud", 1.0, 1.0, 1e6, LatencyMode::kSimulated};
  bool saw_zero = false;
  for (int i = 0; i < 1000; ++i) {
    const double v = simulated_latency_ms(loud, 1, rng);
    CHECK(v >= 0.0);
    saw_zero = saw_zero || v == 0.0;
  }
  CHECK(saw_zero);
}

TEST_CASE("measure_latency runs the deployment path in both modes") {
  auto nets = make_nets();
  std::mt19937_64 rng(5);
  const auto s = Tensor::row({0.1, 0.0, -0.2, 0.3});
  const TaskContext task(2, 4);
  nets.student.reset_forward_count();
  const auto m = measure_latency(example_profile(), nets.base, nets.student, s, task, 4, rng);
  CHECK(m.latency_ms == doctest::Approx(8.0).epsilon(1e-15));
  CHECK(m.mask.count() == 4);
  CHECK(nets.student.forward_count() == 1);
  for (double v : m.action.values()) CHECK(std::abs(v) < 1.0);

  DeviceProfile wall{"host", 1.0, 1.0, 0.0, LatencyMode::kWallclock};
  std::vector<double> times;
  for (int i = 0; i < 30; ++i) times.push_back(measure_latency(wall, nets.base, nets.student, s, task, 8, rng).latency_ms);
  double mean = 0.0, var = 0.0;
  for (double t : times) mean += t / 30.0;
  for (double t : times) var += (t - mean) * (t - mean) / 29.0;
  MESSAGE("wall-clock coefficient of variation " << std::sqrt(var) / mean);
  CHECK(mean > 0.0);
  CHECK_THROWS_AS(measure_latency(example_profile(), nets.base, nets.student, s, task, 0, rng),
                  DeviceError);
}

TEST_CASE("latency dataset: exact curve, coverage, empty budget") {
  auto nets = make_nets();
  envs::SuiteConfig suite;
  const auto p = example_profile();
  const auto curve = collect_latency_dataset(suite, p, nets.base, nets.student, {1, 0}, 1);
  REQUIRE(curve.size() == 16);
  for (std::size_t k = 1; k <= 16; ++k) {
    CHECK(curve[k - 1].k == k);
    CHECK(curve[k - 1].c_ms == p.expected_ms(k));
  }
  CHECK(collect_latency_dataset(suite, p, nets.base, nets.student, {0, 0}, 1).empty());
  CHECK(collect_latency_dataset(suite, p, nets.base, nets.student, {20, 0}, 1).size() == 320);

  // Coupon collector: 10 N ln N uniform draws cover {1..N} with probability >= 0.99.
  const auto draws = static_cast<std::size_t>(std::ceil(10.0 * 16.0 * std::log(16.0)));
  int covered = 0;
  const int seeds = 100;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto d = collect_latency_dataset(suite, p, nets.base, nets.student, {0, draws},
                                           static_cast<std::uint64_t>(seed));
    CHECK(d.size() == draws);
    std::set<std::size_t> ks;
    for (const auto& s : d) ks.insert(s.k);
    covered += ks.size() == 16;
  }
  CHECK(covered >= 99);
}

TEST_CASE("adapter loss: identity, unit under-prediction, asymmetric weight, gradient") {
  std::mt19937_64 rng(7);
  DeviceAdapterNet net(16, 4, 10.0, 5.0, rng);
  // Constant prediction 7: zero every weight feeding the output, bias only.
  for (const char* name : {"skip.w", "out.w", "out.b"})
    for (auto& v : net.params().get(name).values()) v = 0.0;
  net.params().get("skip.b")[0] = (7.0 - 8.5) / 7.5;
  REQUIRE(net.predict(3.0) == doctest::Approx(7.0).epsilon(1e-15));
  std::vector<LatencySample> one{{7, 8.0}};
  CHECK(eval_da(net, one, 1.0) == doctest::Approx(0.0).epsilon(1e-12));
  one[0].k += 1;  // prediction = K - 1
  CHECK(eval_da(net, one, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
  one[0].k -= 2;  // prediction = K + 1, weight 1 + p
  CHECK(eval_da(net, one, 1.0) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(eval_da(net, one, 3.0) == doctest::Approx(4.0).epsilon(1e-12));
  {
    Graph g;
    auto l = build_da_loss(g, net, one, 0.25, true);
    g.evaluate();
    CHECK(g.value(l).item() == doctest::Approx(0.75).epsilon(1e-12));
    Graph h;
    CHECK_THROWS_AS(build_da_loss(h, net, one, 1.0, true), DeviceError);
  }

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 r(seed);
    DeviceAdapterNet n(16, 4, 10.0, 5.0, r);
    std::uniform_real_distribution<double> c(2.0, 26.0);
    std::uniform_int_distribution<std::size_t> k(1, 16);
    std::vector<LatencySample> b;
    for (int i = 0; i < 6; ++i) b.push_back({k(r), c(r)});
    Graph g;
    auto loss = build_da_loss(g, n, b, 2.0);
    g.evaluate();
    const auto analytic = g.gradients(loss, n.params());
    auto numeric = testing::numeric_gradient(n.params(), [&] { return eval_da(n, b, 2.0); });
    // Normalization is a fixed input transform, never trained.
    for (double v : analytic.get("norm").values()) CHECK(v == 0.0);
    for (auto& v : numeric.get("norm").values()) v = 0.0;
    CAPTURE(seed);
    CHECK(testing::max_relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("adapt: exact inversion of a noiseless profile") {
  auto nets = make_nets();
  envs::SuiteConfig suite;
  const auto p = example_profile();
  AdapterConfig cfg;
  cfg.collect.shots_per_k = 1;
  const auto result = adapt(suite, p, nets.base, nets.student, cfg, 3);
  const auto& a = result.adapter;
  CHECK(a.deployed_k(10.0) == 5);
  CHECK(a.deployed_k(100.0) == 16);
  CHECK(a.deployed_k(1.0) == 1);
  CHECK(max_feasible_k(p, 1.0, 16) == 0);
  const double lo = p.expected_ms(1), hi = p.expected_ms(16);
  int exact = 0;
  for (int i = 0; i < 100; ++i) {
    const double c = lo + (hi - lo) * i / 99.0;
    exact += a.deployed_k(c) == max_feasible_k(p, c, 16);
  }
  CHECK(exact == 100);

  const auto restored = DeviceAdapterNet(16, a.params());
  CHECK(restored.predict(12.3) == a.predict(12.3));

  std::vector<LatencySample> single{{3, 6.5}, {3, 6.6}};
  CHECK_THROWS_AS(fit_adapter(single, 16, cfg, 1), DeviceError);
  CHECK_THROWS_AS(fit_adapter(std::vector<LatencySample>{{0, 1.0}, {2, 2.0}}, 16, cfg, 1),
                  DeviceError);
}

TEST_CASE("deploy_step: K in range, boundary satisfaction, noisy headroom") {
  auto nets = make_nets();
  envs::SuiteConfig suite;
  AdapterConfig cfg;
  cfg.collect.shots_per_k = 1;
  const auto p = example_profile();
  const auto a = adapt(suite, p, nets.base, nets.student, cfg, 3).adapter;
  std::mt19937_64 rng(9);
  const auto s = Tensor::row({0.2, -0.1, 0.3, 0.4});
  const TaskContext task(1, 4);
  for (double c : {0.5, 3.0, 7.9, 8.0, 10.0, 17.0, 26.0, 40.0}) {
    const auto d = deploy_step(a, nets.student, nets.base, p, s, task, c, rng);
    CHECK(d.k >= 1);
    CHECK(d.k <= 16);
    CHECK(d.mask.count() == d.k);
    CHECK(d.violation == (c < p.expected_ms(1)));
  }
  // Budget equal to the exact latency of the chosen K satisfies it.
  const auto at = deploy_step(a, nets.student, nets.base, p, s, task, p.expected_ms(6), rng);
  CHECK(at.k == 6);
  CHECK(at.latency_ms == p.expected_ms(6));
  CHECK_FALSE(at.violation);

  // K fixed, 3-sigma headroom: violation rate <= 1% over 1e4 steps.
  const auto noisy = example_profile(200.0);
  const double budget = noisy.expected_ms(6) + 0.6;
  int violations = 0;
  for (int i = 0; i < 10000; ++i) violations += simulated_latency_ms(noisy, 6, rng) > budget;
  CHECK(violations <= 100);
  CHECK_THROWS_AS(deploy_step(a, nets.student, nets.base, p, s, task, 0.0, rng), DeviceError);
}
