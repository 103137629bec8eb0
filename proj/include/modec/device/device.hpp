#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "modec/distill/distill.hpp"
#include "modec/envs/env_suite.hpp"
#include "modec/modnet/modular_net.hpp"

namespace modec::device {

class DeviceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LatencyMode { kSimulated, kWallclock };

LatencyMode parse_mode(const std::string& s);
std::string mode_name(LatencyMode m);

/// Homogeneous-module cost model. Costs in microseconds.
struct DeviceProfile {
  std::string name;
  double per_module_us = 0.0;
  double overhead_us = 0.0;
  double noise_sigma_us = 0.0;
  LatencyMode mode = LatencyMode::kSimulated;

  void validate() const;
  /// Noise-free latency of a K-module forward in milliseconds.
  double expected_ms(std::size_t k) const;
};

/// Reads {name, per_module_us, overhead_us, noise_sigma_us, mode} from JSON
/// text; unknown keys are rejected.
DeviceProfile parse_profile(const std::string& json_text);
DeviceProfile load_profile(const std::filesystem::path& path);
std::string profile_to_json(const DeviceProfile& p);

/// Largest K in [1, N] with expected_ms(K) <= c, or 0 when even K = 1 misses.
std::size_t max_feasible_k(const DeviceProfile& p, double budget_ms, std::size_t module_count);

/// expected_ms(K) plus Gaussian noise, truncated at 0.
double simulated_latency_ms(const DeviceProfile& p, std::size_t k, std::mt19937_64& rng);

/// Runs `path` once and returns its latency: the simulated formula for K
/// modules, or the monotonic-clock elapsed time in wall-clock mode.
double timed_latency_ms(const DeviceProfile& p, std::size_t k, std::mt19937_64& rng,
                        const std::function<void()>& path);

struct Measurement {
  double latency_ms = 0.0;
  modnet::ModuleMask mask;
  diffcore::Tensor action;
};

/// Mask producer of a deployment path: (state, task, K) -> K-module mask.
using MaskSelector = std::function<modnet::ModuleMask(const diffcore::Tensor&,
                                                      const modnet::TaskContext&, std::size_t)>;

MaskSelector student_selector(const distill::OneShotSelectorNet& student);

/// Full deployment path: `select`, then the masked base forward.
Measurement measure_latency(const DeviceProfile& p, const modnet::ModularPolicyNet& base,
                            const MaskSelector& select, const diffcore::Tensor& state,
                            const modnet::TaskContext& task, std::size_t k, std::mt19937_64& rng);

/// measure_latency with the top-K student path.
Measurement measure_latency(const DeviceProfile& p, const modnet::ModularPolicyNet& base,
                            const distill::OneShotSelectorNet& student,
                            const diffcore::Tensor& state, const modnet::TaskContext& task,
                            std::size_t k, std::mt19937_64& rng);

struct LatencySample {
  std::size_t k = 0;
  double c_ms = 0.0;
};

struct CollectConfig {
  std::size_t shots_per_k = 20;   // used when uniform_draws == 0
  std::size_t uniform_draws = 0;  // K ~ Uniform{1..N} per draw when nonzero
};

/// Latency samples measured on states visited by masked base rollouts.
/// shots_per_k = 0 and uniform_draws = 0 gives an empty dataset.
std::vector<LatencySample> collect_latency_dataset(const envs::SuiteConfig& suite,
                                                   const DeviceProfile& p,
                                                   const modnet::ModularPolicyNet& base,
                                                   const MaskSelector& select,
                                                   const CollectConfig& config,
                                                   std::uint64_t seed);
std::vector<LatencySample> collect_latency_dataset(const envs::SuiteConfig& suite,
                                                   const DeviceProfile& p,
                                                   const modnet::ModularPolicyNet& base,
                                                   const distill::OneShotSelectorNet& student,
                                                   const CollectConfig& config,
                                                   std::uint64_t seed);

/// pi_da: budget (ms) to a real-valued module count. A linear path plus a
/// tanh MLP correction on the normalized budget.
class DeviceAdapterNet {
 public:
  DeviceAdapterNet() = default;
  DeviceAdapterNet(std::size_t module_count, std::size_t hidden, double c_center, double c_scale,
                   std::mt19937_64& rng);
  /// Restores from parameters; normalization lives in the "norm" tensor.
  DeviceAdapterNet(std::size_t module_count, diffcore::ParameterSet params);

  std::size_t module_count() const { return n_; }
  const diffcore::ParameterSet& params() const { return params_; }
  diffcore::ParameterSet& params() { return params_; }

  /// B x 1 predictions for a B x 1 column of budgets in ms.
  diffcore::Node build(diffcore::Graph& g, const diffcore::Tensor& budgets_ms) const;
  double predict(double budget_ms) const;
  /// clamp(floor(predict(c)), 1, N).
  std::size_t deployed_k(double budget_ms) const;

 private:
  std::size_t n_ = 0;
  diffcore::ParameterSet params_;
};

/// Tolerance added before flooring so that an exact-fit prediction K - tiny
/// still deploys K.
inline constexpr double kFloorSnap = 1e-3;

struct AdapterConfig {
  std::size_t steps = 3000;       // full-batch Adam steps
  double lr = 1e-2;
  double final_lr = 1e-6;         // exponential decay target
  std::size_t hidden = 16;
  double penalty = 1.0;           // p
  bool literal_penalty = false;   // weight over-predictions by 1 - p instead of 1 + p
  CollectConfig collect;
};

/// mean_i |pi_da(c_i) - K_i| * w_i with w_i = w_over when pi_da(c_i) > K_i and
/// 1 otherwise.
diffcore::Node build_da_loss(diffcore::Graph& g, const DeviceAdapterNet& net,
                             std::span<const LatencySample> batch, double penalty,
                             bool literal_penalty = false);

DeviceAdapterNet fit_adapter(std::span<const LatencySample> dataset, std::size_t module_count,
                             const AdapterConfig& config, std::uint64_t seed);

struct AdaptResult {
  DeviceAdapterNet adapter;
  std::vector<LatencySample> dataset;
};

/// Collects the few-shot dataset on `profile` and fits the adapter.
AdaptResult adapt(const envs::SuiteConfig& suite, const DeviceProfile& profile,
                  const modnet::ModularPolicyNet& base, const MaskSelector& select,
                  const AdapterConfig& config, std::uint64_t seed);
AdaptResult adapt(const envs::SuiteConfig& suite, const DeviceProfile& profile,
                  const modnet::ModularPolicyNet& base, const distill::OneShotSelectorNet& student,
                  const AdapterConfig& config, std::uint64_t seed);

struct DeployResult {
  diffcore::Tensor action;
  double latency_ms = 0.0;
  bool violation = false;  // latency > budget
  std::size_t k = 0;
  modnet::ModuleMask mask;
};

DeployResult deploy_step(const DeviceAdapterNet& adapter, const distill::OneShotSelectorNet& student,
                         const modnet::ModularPolicyNet& base, const DeviceProfile& profile,
                         const diffcore::Tensor& state, const modnet::TaskContext& task,
                         double budget_ms, std::mt19937_64& rng);

}  // namespace modec::device
