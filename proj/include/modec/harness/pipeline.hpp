#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "modec/harness/artifacts.hpp"
#include "modec/harness/config.hpp"
#include "modec/harness/evaluate.hpp"

namespace modec::harness {

/// A stage failure; the message names the stage.
class PipelineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PipelineOptions {
  bool resume = true;              // reuse stage checkpoints whose hash matches
  bool write_metrics = true;       // <stage>_metrics.jsonl under out_dir
  std::ostream* log = nullptr;     // progress lines; null is silent
};

struct StageRecord {
  std::string name;                // "pretrain", "joint", "distill", "adapt/<device>", "eval"
  std::string config_hash;
  std::string checkpoint_hash;     // of the primary checkpoint; empty for eval
  bool reused = false;
};

struct DeviceAdapter {
  std::string device;
  device::DeviceAdapterNet adapter;
  std::vector<device::LatencySample> dataset;  // empty when reused from disk
};

struct PipelineResult {
  mtrl::PretrainResult pretrained;              // metrics empty when reused
  selector::JointResult joint;                  // metrics empty when reused
  std::optional<distill::DistillResult> distilled;
  std::vector<DeviceAdapter> adapters;
  EvalReport report;
  std::vector<StageRecord> stages;
};

/// Stage checkpoint paths under `out_dir`.
std::filesystem::path pretrain_path(const std::filesystem::path& dir);
std::filesystem::path joint_base_path(const std::filesystem::path& dir);
std::filesystem::path joint_ims_path(const std::filesystem::path& dir);
std::filesystem::path distill_path(const std::filesystem::path& dir, bool with_teacher);
std::filesystem::path adapter_path(const std::filesystem::path& dir, const std::string& device,
                                   bool iterative);
std::filesystem::path report_stem(const std::filesystem::path& dir, Variant v);

/// Adapt-stage hash for one device: stage_hash(kAdapt) combined with the profile.
std::string adapter_hash(const ExperimentConfig& c, const device::DeviceProfile& p);

/// Per-variant deployment: the mask path and the K rule for one device.
struct Deployment {
  device::MaskSelector select;
  KPolicy k_policy;
};

/// Evaluates every (device, constraint) cell. `deployment_for` is called once
/// per device.
EvalReport evaluate_devices(const ExperimentConfig& c, const modnet::ModularPolicyNet& base,
                            const std::function<Deployment(const DeviceSpec&)>& deployment_for);

/// pretrain -> joint -> distill -> adapt (per device) -> eval, as the variant
/// requires. Writes checkpoints, metrics and report_<variant>.{csv,jsonl}.
PipelineResult run_pipeline(const ExperimentConfig& c, const PipelineOptions& options = {});

}  // namespace modec::harness
