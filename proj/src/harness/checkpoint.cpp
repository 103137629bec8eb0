#include "modec/harness/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "modec/diffcore/seed.hpp"

namespace modec::harness {

using diffcore::ParameterSet;
using diffcore::Tensor;
using nlohmann::ordered_json;

namespace {

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

std::string serialize(const Checkpoint& c) {
  ordered_json j;
  j["format_version"] = c.format_version;
  j["stage"] = c.stage;
  j["seed"] = c.seed;
  j["config_hash"] = c.config_hash;
  j["meta"] = c.meta;
  ordered_json params = ordered_json::object();
  for (const auto& [name, t] : c.params) {
    params[name] = {{"rows", t.rows()},
                    {"cols", t.cols()},
                    {"data", std::vector<double>(t.values().begin(), t.values().end())}};
  }
  j["params"] = params;
  return j.dump(1);
}

Checkpoint deserialize(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint is not valid JSON: ") + e.what());
  }
  Checkpoint c;
  try {
    c.format_version = j.at("format_version").get<int>();
    if (c.format_version != kCheckpointFormat) {
      throw CheckpointError("unsupported checkpoint format " + std::to_string(c.format_version));
    }
    c.stage = j.at("stage").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.config_hash = j.at("config_hash").get<std::string>();
    c.meta = j.at("meta");
    for (const auto& [name, t] : j.at("params").items()) {
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      c.params.add(name, Tensor(rows, cols, t.at("data").get<std::vector<double>>()));
    }
  } catch (const ordered_json::exception& e) {
    throw CheckpointError(std::string("malformed checkpoint: ") + e.what());
  } catch (const diffcore::ShapeError& e) {
    throw CheckpointError(std::string("malformed checkpoint tensor: ") + e.what());
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out << serialize(c) << '\n';
    if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  Checkpoint c;
  try {
    c = deserialize(ss.str());
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  if (!expected_hash.empty() && expected_hash != c.config_hash) {
    std::cerr << "warning: " << path.string() << " was written under config hash " << c.config_hash
              << ", current config hashes to " << expected_hash << '\n';
  }
  return c;
}

std::string checkpoint_hash(const Checkpoint& c) {
  std::uint64_t h = diffcore::fnv1a(c.stage);
  h = diffcore::fnv1a(std::to_string(c.seed) + "|" + c.config_hash + "|" + c.meta.dump(), h);
  for (const auto& [name, t] : c.params) {
    h = diffcore::fnv1a(name + "|" + t.shape_string(), h);
    for (double v : t.values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      char raw[8];
      for (int b = 0; b < 8; ++b) raw[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      h = diffcore::fnv1a(std::string_view(raw, 8), h);
    }
  }
  return hex(h);
}

void merge_params(ParameterSet& into, const ParameterSet& from, const std::string& prefix) {
  for (const auto& [name, t] : from) into.add(prefix + name, t);
}

ParameterSet extract_params(const ParameterSet& from, const std::string& prefix) {
  ParameterSet out;
  for (const auto& [name, t] : from) {
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), t);
  }
  if (out.size() == 0) throw CheckpointError("checkpoint has no parameters under '" + prefix + "'");
  return out;
}

}  // namespace modec::harness
