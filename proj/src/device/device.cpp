#include "modec/device/device.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "modec/diffcore/optimizer.hpp"
#include "modec/diffcore/seed.hpp"

namespace modec::device {

using diffcore::derive_seed;
using diffcore::Graph;
using diffcore::Node;
using diffcore::Tensor;
using modnet::ModuleMask;
using modnet::TaskContext;

namespace {

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    throw DeviceError("K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
}

// Output is K = center + half_range * raw so raw stays O(1) for any N.
double k_center(std::size_t n) { return 0.5 * static_cast<double>(n + 1); }
double k_half_range(std::size_t n) { return std::max(0.5 * static_cast<double>(n - 1), 0.5); }

}  // namespace

LatencyMode parse_mode(const std::string& s) {
  if (s == "simulated") return LatencyMode::kSimulated;
  if (s == "wallclock") return LatencyMode::kWallclock;
  throw DeviceError("unknown latency mode '" + s + "'");
}

std::string mode_name(LatencyMode m) {
  return m == LatencyMode::kSimulated ? "simulated" : "wallclock";
}

void DeviceProfile::validate() const {
  if (name.empty()) throw DeviceError("device profile needs a name");
  for (double v : {per_module_us, overhead_us, noise_sigma_us}) {
    if (!std::isfinite(v) || v < 0.0) throw DeviceError("profile '" + name + "' has a negative or non-finite cost");
  }
  if (per_module_us == 0.0) throw DeviceError("profile '" + name + "' has zero per-module cost");
}

double DeviceProfile::expected_ms(std::size_t k) const {
  return (overhead_us + static_cast<double>(k) * per_module_us) / 1000.0;
}

DeviceProfile parse_profile(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DeviceError(std::string("device profile is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw DeviceError("device profile must be a JSON object");
  static const std::set<std::string> known{"name", "per_module_us", "overhead_us",
                                           "noise_sigma_us", "mode"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw DeviceError("unknown device profile key '" + key + "'");
  }
  DeviceProfile p;
  try {
    p.name = j.at("name").get<std::string>();
    p.per_module_us = j.at("per_module_us").get<double>();
    p.overhead_us = j.at("overhead_us").get<double>();
    p.noise_sigma_us = j.value("noise_sigma_us", 0.0);
    p.mode = parse_mode(j.value("mode", std::string("simulated")));
  } catch (const nlohmann::json::exception& e) {
    throw DeviceError(std::string("device profile: ") + e.what());
  }
  p.validate();
  return p;
}

DeviceProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DeviceError("cannot open device profile " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_profile(ss.str());
}

std::string profile_to_json(const DeviceProfile& p) {
  nlohmann::ordered_json j;
  j["name"] = p.name;
  j["per_module_us"] = p.per_module_us;
  j["overhead_us"] = p.overhead_us;
  j["noise_sigma_us"] = p.noise_sigma_us;
  j["mode"] = mode_name(p.mode);
  return j.dump(2);
}

std::size_t max_feasible_k(const DeviceProfile& p, double budget_ms, std::size_t module_count) {
  std::size_t best = 0;
  for (std::size_t k = 1; k <= module_count; ++k) {
    if (p.expected_ms(k) <= budget_ms) best = k;
  }
  return best;
}

double simulated_latency_ms(const DeviceProfile& p, std::size_t k, std::mt19937_64& rng) {
  double us = p.overhead_us + static_cast<double>(k) * p.per_module_us;
  if (p.noise_sigma_us > 0.0) us += std::normal_distribution<double>(0.0, p.noise_sigma_us)(rng);
  return std::max(us, 0.0) / 1000.0;
}

double timed_latency_ms(const DeviceProfile& p, std::size_t k, std::mt19937_64& rng,
                        const std::function<void()>& path) {
  if (p.mode == LatencyMode::kSimulated) {
    path();
    return simulated_latency_ms(p, k, rng);
  }
  const auto t0 = std::chrono::steady_clock::now();
  path();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

MaskSelector student_selector(const distill::OneShotSelectorNet& student) {
  return [&student](const Tensor& state, const TaskContext& task, std::size_t k) {
    return distill::select_topk(student, state, task, k);
  };
}

Measurement measure_latency(const DeviceProfile& p, const modnet::ModularPolicyNet& base,
                            const MaskSelector& select, const Tensor& state,
                            const TaskContext& task, std::size_t k, std::mt19937_64& rng) {
  p.validate();
  check_k(k, base.shape().module_count());
  Measurement m;
  m.latency_ms = timed_latency_ms(p, k, rng, [&] {
    m.mask = select(state, task, k);
    m.action = base.forward(state, task, m.mask).deterministic();
  });
  if (m.mask.count() != k) throw DeviceError("selector returned a mask without K modules");
  return m;
}

Measurement measure_latency(const DeviceProfile& p, const modnet::ModularPolicyNet& base,
                            const distill::OneShotSelectorNet& student, const Tensor& state,
                            const TaskContext& task, std::size_t k, std::mt19937_64& rng) {
  return measure_latency(p, base, student_selector(student), state, task, k, rng);
}

std::vector<LatencySample> collect_latency_dataset(const envs::SuiteConfig& suite,
                                                   const DeviceProfile& p,
                                                   const modnet::ModularPolicyNet& base,
                                                   const MaskSelector& select,
                                                   const CollectConfig& config,
                                                   std::uint64_t seed) {
  p.validate();
  const auto n = base.shape().module_count();
  std::vector<std::size_t> ks;
  if (config.uniform_draws > 0) {
    std::mt19937_64 k_rng(derive_seed(seed, "adapt/k"));
    std::uniform_int_distribution<std::size_t> pick(1, n);
    for (std::size_t i = 0; i < config.uniform_draws; ++i) ks.push_back(pick(k_rng));
  } else {
    for (std::size_t s = 0; s < config.shots_per_k; ++s)
      for (std::size_t k = 1; k <= n; ++k) ks.push_back(k);
  }
  std::vector<LatencySample> out;
  if (ks.empty()) return out;

  envs::SuiteConfig env_cfg = suite;
  env_cfg.seed = derive_seed(seed, "adapt/env");
  envs::EnvSuite env(env_cfg);
  std::mt19937_64 noise(derive_seed(seed, "adapt/noise"));
  auto obs = env.reset(envs::TaskSchedule::kRoundRobin);
  out.reserve(ks.size());
  for (auto k : ks) {
    const TaskContext task(obs.task, base.shape().task_count);
    const auto m = measure_latency(p, base, select, obs.state, task, k, noise);
    out.push_back({k, m.latency_ms});
    const auto r = env.step(m.action.values());
    obs.state = r.state;
    if (r.done) obs = env.reset(envs::TaskSchedule::kRoundRobin);
  }
  return out;
}

std::vector<LatencySample> collect_latency_dataset(const envs::SuiteConfig& suite,
                                                   const DeviceProfile& p,
                                                   const modnet::ModularPolicyNet& base,
                                                   const distill::OneShotSelectorNet& student,
                                                   const CollectConfig& config,
                                                   std::uint64_t seed) {
  return collect_latency_dataset(suite, p, base, student_selector(student), config, seed);
}

DeviceAdapterNet::DeviceAdapterNet(std::size_t module_count, std::size_t hidden, double c_center,
                                   double c_scale, std::mt19937_64& rng)
    : n_(module_count) {
  if (module_count == 0 || hidden == 0) throw DeviceError("adapter shape has a zero");
  if (!(c_scale > 0.0) || !std::isfinite(c_center)) throw DeviceError("bad adapter normalization");
  params_.add("norm", Tensor::row({c_center, c_scale}));
  params_.add("skip.w", Tensor(1, 1, 1.0));
  params_.add("skip.b", Tensor(1, 1, 0.0));
  diffcore::add_dense(params_, "l0", 1, hidden, rng);
  diffcore::add_dense(params_, "l1", hidden, hidden, rng);
  diffcore::add_dense(params_, "out", hidden, 1, rng);
  // The correction starts at zero, so the linear warm start is the initial fit.
  for (const char* name : {"out.w", "out.b"}) {
    for (auto& v : params_.get(name).values()) v = 0.0;
  }
}

DeviceAdapterNet::DeviceAdapterNet(std::size_t module_count, diffcore::ParameterSet params)
    : n_(module_count), params_(std::move(params)) {
  for (const char* name : {"norm", "skip.w", "skip.b", "l0.w", "l0.b", "l1.w", "l1.b", "out.w", "out.b"}) {
    if (!params_.contains(name)) throw DeviceError(std::string("adapter parameters miss ") + name);
  }
  if (params_.get("norm").size() != 2 || !(params_.get("norm")[1] > 0.0)) {
    throw DeviceError("bad adapter normalization");
  }
}

Node DeviceAdapterNet::build(Graph& g, const Tensor& budgets_ms) const {
  if (budgets_ms.cols() != 1) throw DeviceError("adapter input must be a column of budgets");
  const auto& norm = params_.get("norm");
  Tensor x(budgets_ms.rows(), 1);
  for (std::size_t i = 0; i < x.rows(); ++i) x(i, 0) = (budgets_ms(i, 0) - norm[0]) / norm[1];
  auto in = g.constant(x);
  auto linear = g.dense(in, params_, "skip");
  auto h = g.tanh(g.dense(in, params_, "l0"));
  h = g.tanh(g.dense(h, params_, "l1"));
  auto raw = g.add(linear, g.dense(h, params_, "out"));
  return g.add_scalar(g.scale(raw, k_half_range(n_)), k_center(n_));
}

double DeviceAdapterNet::predict(double budget_ms) const {
  if (!std::isfinite(budget_ms)) throw DeviceError("non-finite time budget");
  Graph g;
  auto out = build(g, Tensor(1, 1, budget_ms));
  g.evaluate();
  return g.value(out).item();
}

std::size_t DeviceAdapterNet::deployed_k(double budget_ms) const {
  const double k = std::floor(predict(budget_ms) + kFloorSnap);
  return static_cast<std::size_t>(std::clamp(k, 1.0, static_cast<double>(n_)));
}

Node build_da_loss(Graph& g, const DeviceAdapterNet& net, std::span<const LatencySample> batch,
                   double penalty, bool literal_penalty) {
  if (batch.empty()) throw DeviceError("adapter loss of an empty batch");
  if (!std::isfinite(penalty) || penalty < 0.0) throw DeviceError("penalty must be non-negative");
  if (literal_penalty && penalty >= 1.0) throw DeviceError("literal penalty needs p < 1");
  const double w_over = literal_penalty ? 1.0 - penalty : 1.0 + penalty;
  Tensor budgets(batch.size(), 1), targets(batch.size(), 1);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    budgets(i, 0) = batch[i].c_ms;
    targets(i, 0) = static_cast<double>(batch[i].k);
  }
  auto diff = g.sub(net.build(g, budgets), g.constant(targets));
  auto over = g.scale(g.relu(diff), w_over);
  auto under = g.relu(g.scale(diff, -1.0));
  auto loss = g.mean(g.add(over, under));
  g.label(loss, "da_loss");
  return loss;
}

DeviceAdapterNet fit_adapter(std::span<const LatencySample> dataset, std::size_t module_count,
                             const AdapterConfig& config, std::uint64_t seed) {
  std::set<std::size_t> distinct;
  double mean_c = 0.0;
  for (const auto& s : dataset) {
    if (s.k < 1 || s.k > module_count) throw DeviceError("latency sample with K out of range");
    if (!(s.c_ms > 0.0) || !std::isfinite(s.c_ms)) throw DeviceError("latency sample must be positive");
    distinct.insert(s.k);
    mean_c += s.c_ms;
  }
  if (distinct.size() < 2) throw DeviceError("latency dataset needs at least 2 distinct K values");
  mean_c /= static_cast<double>(dataset.size());
  double var = 0.0, cov = 0.0, mean_k = 0.0;
  for (const auto& s : dataset) mean_k += static_cast<double>(s.k);
  mean_k /= static_cast<double>(dataset.size());
  for (const auto& s : dataset) {
    var += (s.c_ms - mean_c) * (s.c_ms - mean_c);
    cov += (s.c_ms - mean_c) * (static_cast<double>(s.k) - mean_k);
  }
  const double scale = std::sqrt(var / static_cast<double>(dataset.size()));
  if (!(scale > 0.0)) throw DeviceError("latency dataset has no budget spread");

  std::mt19937_64 rng(derive_seed(seed, "adapt/init"));
  DeviceAdapterNet net(module_count, config.hidden, mean_c, scale, rng);
  // Least-squares warm start of the linear path.
  const double slope = cov / var * scale;
  net.params().get("skip.w")[0] = slope / k_half_range(module_count);
  net.params().get("skip.b")[0] = (mean_k - k_center(module_count)) / k_half_range(module_count);

  diffcore::Optimizer opt({.learning_rate = config.lr});
  const double decay =
      config.steps > 1 ? std::pow(config.final_lr / config.lr, 1.0 / static_cast<double>(config.steps - 1))
                       : 1.0;
  double lr = config.lr;
  // Subgradient steps do not descend monotonically; keep the best iterate.
  auto best = net.params();
  double best_loss = std::numeric_limits<double>::infinity();
  const auto track = [&](double value) {
    if (value < best_loss) {
      best_loss = value;
      best = net.params();
    }
  };
  for (std::size_t step = 0; step < config.steps; ++step) {
    Graph g;
    auto loss = build_da_loss(g, net, dataset, config.penalty, config.literal_penalty);
    g.evaluate();
    track(g.value(loss).item());
    auto grads = g.gradients(loss, net.params());
    for (auto& v : grads.get("norm").values()) v = 0.0;
    opt.set_learning_rate(lr);
    opt.step(net.params(), grads);
    lr *= decay;
  }
  {
    Graph g;
    auto loss = build_da_loss(g, net, dataset, config.penalty, config.literal_penalty);
    g.evaluate();
    track(g.value(loss).item());
  }
  net.params() = std::move(best);
  return net;
}

AdaptResult adapt(const envs::SuiteConfig& suite, const DeviceProfile& profile,
                  const modnet::ModularPolicyNet& base, const MaskSelector& select,
                  const AdapterConfig& config, std::uint64_t seed) {
  auto dataset = collect_latency_dataset(suite, profile, base, select, config.collect, seed);
  auto adapter = fit_adapter(dataset, base.shape().module_count(), config, seed);
  return {std::move(adapter), std::move(dataset)};
}

AdaptResult adapt(const envs::SuiteConfig& suite, const DeviceProfile& profile,
                  const modnet::ModularPolicyNet& base, const distill::OneShotSelectorNet& student,
                  const AdapterConfig& config, std::uint64_t seed) {
  return adapt(suite, profile, base, student_selector(student), config, seed);
}

DeployResult deploy_step(const DeviceAdapterNet& adapter, const distill::OneShotSelectorNet& student,
                         const modnet::ModularPolicyNet& base, const DeviceProfile& profile,
                         const Tensor& state, const TaskContext& task, double budget_ms,
                         std::mt19937_64& rng) {
  if (!(budget_ms > 0.0)) throw DeviceError("time budget must be positive");
  if (adapter.module_count() != base.shape().module_count()) {
    throw DeviceError("adapter does not match the base net");
  }
  DeployResult out;
  out.k = adapter.deployed_k(budget_ms);
  auto m = measure_latency(profile, base, student, state, task, out.k, rng);
  out.action = std::move(m.action);
  out.mask = std::move(m.mask);
  out.latency_ms = m.latency_ms;
  out.violation = out.latency_ms > budget_ms;
  return out;
}

}  // namespace modec::device
