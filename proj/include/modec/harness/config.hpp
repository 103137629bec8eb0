#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "modec/device/device.hpp"
#include "modec/distill/distill.hpp"
#include "modec/envs/env_suite.hpp"
#include "modec/modnet/modular_net.hpp"
#include "modec/mtrl/pretrain.hpp"
#include "modec/selector/joint.hpp"

namespace modec::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pipeline ablations: full method, iterative selector at deployment, one-shot
/// selector trained without a teacher, and a fixed module count.
enum class Variant { kModec, kModecI, kModecO, kFixedK };

Variant parse_variant(const std::string& s);
std::string variant_name(Variant v);

/// "4x4", "2x8" or "8x2": layers x modules per layer.
modnet::NetShape shape_preset(const std::string& name, std::size_t hidden, std::size_t tasks);

struct DeviceSpec {
  device::DeviceProfile profile;
  std::filesystem::path profile_path;  // empty when given inline
  std::vector<double> constraints_ms;
};

struct EvalConfig {
  std::size_t episodes = 30;       // per (device, constraint) cell
  std::size_t fixed_k = 0;         // used by the fixed_k variant
  std::size_t heldout_states = 256;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  Variant variant = Variant::kModec;
  std::filesystem::path out_dir = "runs/default";
  envs::SuiteConfig suite;
  modnet::NetShape shape;
  mtrl::PretrainConfig pretrain;
  selector::JointConfig joint;
  distill::DistillConfig distill;
  device::AdapterConfig adapt;
  std::vector<DeviceSpec> devices;
  EvalConfig eval;
};

/// Parses JSON text. Unknown keys anywhere are errors; relative profile
/// paths resolve against `base_dir`.
ExperimentConfig parse_config(const std::string& json_text,
                              const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Canonical JSON of every field (profiles inlined).
std::string config_to_json(const ExperimentConfig& c);

enum class Stage { kPretrain, kJoint, kDistill, kAdapt };
std::string stage_name(Stage s);

/// Hash of the configuration that determines the output of `stage` (its own
/// settings plus everything upstream), hex encoded.
std::string stage_hash(const ExperimentConfig& c, Stage stage);

}  // namespace modec::harness
