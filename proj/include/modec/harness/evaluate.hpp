#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "modec/device/device.hpp"
#include "modec/envs/env_suite.hpp"
#include "modec/modnet/modular_net.hpp"

namespace modec::harness {

struct EvalCell {
  std::string device;
  double constraint_ms = 0.0;
  double success_rate = 0.0;
  double ci95 = 0.0;            // half-width, normal approximation
  double flops = 0.0;           // mean over steps
  double violation_rate = 0.0;  // fraction of steps with latency > constraint
  double mean_k = 0.0;
  std::size_t episodes = 0;
  bool infeasible = false;      // constraint below the noise-free K = 1 latency

  bool operator==(const EvalCell&) const = default;
};

/// Cells sorted by (device, constraint).
struct EvalReport {
  std::vector<EvalCell> cells;
};

/// 1.96 * sqrt(p (1 - p) / n).
double ci95(double p, std::size_t n);

/// Module count chosen for a time budget.
using KPolicy = std::function<std::size_t(double budget_ms)>;

/// Runs `episodes` episodes with one deployment per env step. Episode e
/// starts task e mod T on its own derived streams; episodes are spread over
/// `workers` threads (0 = hardware concurrency) and the result does not depend
/// on the worker count. `select` and `k_policy` must be safe to call
/// concurrently.
EvalCell evaluate_cell(const envs::SuiteConfig& suite, const modnet::ModularPolicyNet& base,
                       const device::MaskSelector& select, const KPolicy& k_policy,
                       const device::DeviceProfile& profile, double constraint_ms,
                       std::size_t episodes, std::uint64_t seed, std::size_t workers = 0);

void sort_cells(EvalReport& report);

/// CSV with header device,constraint_ms,success_rate,ci95,flops,violation_rate,mean_K.
std::string report_csv(const EvalReport& report);
/// Parses report_csv output; fields absent from the CSV keep their defaults.
EvalReport parse_report_csv(const std::string& text);
/// One JSON object per cell, all fields.
std::string report_jsonl(const EvalReport& report);

/// Writes `stem`.csv and `stem`.jsonl.
void report_emit(const EvalReport& report, const std::filesystem::path& stem);

}  // namespace modec::harness
