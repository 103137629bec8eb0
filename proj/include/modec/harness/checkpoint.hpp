#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "modec/diffcore/params.hpp"

namespace modec::harness {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormat = 1;

/// Versioned parameter file. `meta` carries shapes and other non-tensor data
/// needed to rebuild the networks.
struct Checkpoint {
  int format_version = kCheckpointFormat;
  std::string stage;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  diffcore::ParameterSet params;
};

/// JSON text; doubles are written with round-trip precision.
std::string serialize(const Checkpoint& c);
Checkpoint deserialize(const std::string& text);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c);
/// A non-empty `expected_hash` that differs from the stored one prints a
/// warning to stderr; the checkpoint still loads.
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash = {});

/// FNV-1a over stage, seed, config hash, meta and every tensor's name, shape
/// and raw bytes. Hex encoded.
std::string checkpoint_hash(const Checkpoint& c);

/// Copies every tensor of `from` into `into` under `prefix` + name.
void merge_params(diffcore::ParameterSet& into, const diffcore::ParameterSet& from,
                  const std::string& prefix);
/// Tensors whose name starts with `prefix`, with the prefix stripped.
diffcore::ParameterSet extract_params(const diffcore::ParameterSet& from, const std::string& prefix);

}  // namespace modec::harness
