#include "modec/harness/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "modec/diffcore/seed.hpp"

namespace modec::harness {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Typed optional-field access that remembers which keys were consumed.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  void opt(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    const std::string at = where_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(at + " must be a boolean");
      out = v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
        throw ConfigError(at + " must be a non-negative integer");
      }
      out = v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(at + " must be a number");
      out = v.get<T>();
    } else {
      if (!v.is_string()) throw ConfigError(at + " must be a string");
      out = v.get<std::string>();
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const char* key) const { return where_ + "." + key; }

  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError("unknown key " + where_ + "." + key);
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

envs::TaskSchedule read_schedule(Reader& r, envs::TaskSchedule fallback) {
  std::string s = fallback == envs::TaskSchedule::kRoundRobin ? "round_robin" : "uniform";
  r.opt("schedule", s);
  try {
    return envs::parse_schedule(s);
  } catch (const envs::EnvError& e) {
    throw ConfigError(e.what());
  }
}

void read_sac(const json& j, const std::string& where, mtrl::SacConfig& c) {
  Reader r(j, where);
  r.opt("gamma", c.gamma);
  r.opt("tau", c.tau);
  r.opt("actor_lr", c.actor_lr);
  r.opt("critic_lr", c.critic_lr);
  r.opt("alpha_lr", c.alpha_lr);
  r.opt("initial_log_alpha", c.initial_log_alpha);
  r.opt("learn_alpha", c.learn_alpha);
  r.opt("critic_hidden", c.critic_hidden);
  r.done();
}

void read_pretrain(const json& j, mtrl::PretrainConfig& c) {
  Reader r(j, "pretrain");
  r.opt("steps", c.steps);
  r.opt("batch_size", c.batch_size);
  r.opt("buffer_capacity", c.buffer_capacity);
  r.opt("warmup_steps", c.warmup_steps);
  r.opt("updates_per_step", c.updates_per_step);
  r.opt("log_interval", c.log_interval);
  c.schedule = read_schedule(r, c.schedule);
  if (const auto* s = r.child("sac")) read_sac(*s, "pretrain.sac", c.sac);
  r.done();
}

void read_joint(const json& j, selector::JointConfig& c) {
  Reader r(j, "joint");
  r.opt("episodes", c.episodes);
  r.opt("reset_base_each_episode", c.reset_base_each_episode);
  r.opt("rg_weight", c.rg_weight);
  r.opt("selection_gamma", c.selection_gamma);
  r.opt("reptile_inner_steps", c.reptile_inner_steps);
  r.opt("reptile_eps", c.reptile_eps);
  r.opt("ims_lr", c.ims_lr);
  r.opt("ims_batch", c.ims_batch);
  r.opt("ims_buffer", c.ims_buffer);
  r.opt("ims_group", c.ims_group);
  r.opt("ims_update_every", c.ims_update_every);
  r.opt("base_update_every", c.base_update_every);
  r.opt("batch_size", c.batch_size);
  r.opt("buffer_capacity", c.buffer_capacity);
  r.opt("selector_hidden", c.selector_hidden);
  r.opt("selector_task_heads", c.selector_task_heads);
  c.schedule = read_schedule(r, c.schedule);
  if (const auto* s = r.child("sac")) read_sac(*s, "joint.sac", c.sac);
  r.done();
}

void read_distill(const json& j, distill::DistillConfig& c) {
  Reader r(j, "distill");
  r.opt("steps", c.steps);
  r.opt("batch_size", c.batch_size);
  r.opt("buffer_capacity", c.buffer_capacity);
  r.opt("warmup_steps", c.warmup_steps);
  r.opt("updates_per_step", c.updates_per_step);
  r.opt("lr", c.lr);
  r.opt("env_weight", c.env_weight);
  r.opt("explore_prob", c.explore_prob);
  r.opt("hidden", c.hidden);
  r.opt("log_interval", c.log_interval);
  c.schedule = read_schedule(r, c.schedule);
  r.done();
}

void read_adapt(const json& j, device::AdapterConfig& c) {
  Reader r(j, "adapt");
  r.opt("steps", c.steps);
  r.opt("lr", c.lr);
  r.opt("final_lr", c.final_lr);
  r.opt("hidden", c.hidden);
  r.opt("penalty", c.penalty);
  r.opt("literal_penalty", c.literal_penalty);
  r.opt("shots_per_k", c.collect.shots_per_k);
  r.opt("uniform_draws", c.collect.uniform_draws);
  r.done();
}

DeviceSpec read_device(const json& j, std::size_t index, const std::filesystem::path& base_dir) {
  const std::string where = "devices[" + std::to_string(index) + "]";
  Reader r(j, where);
  DeviceSpec d;
  const auto* profile = r.child("profile");
  if (!profile) throw ConfigError(where + ".profile is required");
  try {
    if (profile->is_string()) {
      d.profile_path = profile->get<std::string>();
      if (d.profile_path.is_relative() && !base_dir.empty()) d.profile_path = base_dir / d.profile_path;
      d.profile = device::load_profile(d.profile_path);
    } else {
      d.profile = device::parse_profile(profile->dump());
    }
  } catch (const device::DeviceError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  const auto* grid = r.child("constraints_ms");
  if (!grid || !grid->is_array() || grid->empty()) {
    throw ConfigError(where + ".constraints_ms must be a non-empty array");
  }
  for (const auto& v : *grid) {
    if (!v.is_number() || !(v.get<double>() > 0.0)) {
      throw ConfigError(where + ".constraints_ms entries must be positive numbers");
    }
    d.constraints_ms.push_back(v.get<double>());
  }
  r.done();
  return d;
}

void validate(const ExperimentConfig& c) {
  if (c.shape.layers == 0 || c.shape.modules_per_layer == 0 || c.shape.hidden == 0) {
    throw ConfigError("shape needs positive layers, modules_per_layer and hidden");
  }
  if (c.suite.tasks == 0 || c.suite.horizon == 0) throw ConfigError("suite needs tasks and horizon");
  if (c.joint.sac.critic_hidden != c.pretrain.sac.critic_hidden) {
    throw ConfigError("joint.sac.critic_hidden must match pretrain.sac.critic_hidden");
  }
  if (c.eval.episodes < 30) throw ConfigError("eval.episodes must be at least 30");
  if (c.variant == Variant::kFixedK &&
      (c.eval.fixed_k < 1 || c.eval.fixed_k > c.shape.module_count())) {
    throw ConfigError("fixed_k variant needs eval.fixed_k in [1, N]");
  }
  if (c.variant == Variant::kModecO && !(c.distill.env_weight > 0.0)) {
    throw ConfigError("modec_o trains without a teacher and needs distill.env_weight > 0");
  }
  std::set<std::string> names;
  for (const auto& d : c.devices) {
    if (d.profile.name.find_first_of(",\"\n/\\") != std::string::npos) {
      throw ConfigError("device name '" + d.profile.name + "' contains a comma, quote, slash or newline");
    }
    if (!names.insert(d.profile.name).second) throw ConfigError("duplicate device " + d.profile.name);
  }
}

ordered_json sac_json(const mtrl::SacConfig& c) {
  return {{"gamma", c.gamma},           {"tau", c.tau},
          {"actor_lr", c.actor_lr},     {"critic_lr", c.critic_lr},
          {"alpha_lr", c.alpha_lr},     {"initial_log_alpha", c.initial_log_alpha},
          {"learn_alpha", c.learn_alpha}, {"critic_hidden", c.critic_hidden}};
}

std::string schedule_name(envs::TaskSchedule s) {
  return s == envs::TaskSchedule::kRoundRobin ? "round_robin" : "uniform";
}

ordered_json sections(const ExperimentConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["variant"] = variant_name(c.variant);
  j["out_dir"] = c.out_dir.string();
  j["suite"] = {{"kind", envs::suite_name(c.suite.kind)},
                {"tasks", c.suite.tasks},
                {"horizon", c.suite.horizon},
                {"observation_noise", c.suite.observation_noise}};
  j["shape"] = {{"layers", c.shape.layers},
                {"modules_per_layer", c.shape.modules_per_layer},
                {"hidden", c.shape.hidden}};
  const auto& p = c.pretrain;
  j["pretrain"] = {{"steps", p.steps},
                   {"batch_size", p.batch_size},
                   {"buffer_capacity", p.buffer_capacity},
                   {"warmup_steps", p.warmup_steps},
                   {"updates_per_step", p.updates_per_step},
                   {"log_interval", p.log_interval},
                   {"schedule", schedule_name(p.schedule)},
                   {"sac", sac_json(p.sac)}};
  const auto& jc = c.joint;
  j["joint"] = {{"episodes", jc.episodes},
                {"reset_base_each_episode", jc.reset_base_each_episode},
                {"rg_weight", jc.rg_weight},
                {"selection_gamma", jc.selection_gamma},
                {"reptile_inner_steps", jc.reptile_inner_steps},
                {"reptile_eps", jc.reptile_eps},
                {"ims_lr", jc.ims_lr},
                {"ims_batch", jc.ims_batch},
                {"ims_buffer", jc.ims_buffer},
                {"ims_group", jc.ims_group},
                {"ims_update_every", jc.ims_update_every},
                {"base_update_every", jc.base_update_every},
                {"batch_size", jc.batch_size},
                {"buffer_capacity", jc.buffer_capacity},
                {"selector_hidden", jc.selector_hidden},
                {"selector_task_heads", jc.selector_task_heads},
                {"schedule", schedule_name(jc.schedule)},
                {"sac", sac_json(jc.sac)}};
  const auto& d = c.distill;
  j["distill"] = {{"steps", d.steps},
                  {"batch_size", d.batch_size},
                  {"buffer_capacity", d.buffer_capacity},
                  {"warmup_steps", d.warmup_steps},
                  {"updates_per_step", d.updates_per_step},
                  {"lr", d.lr},
                  {"env_weight", d.env_weight},
                  {"explore_prob", d.explore_prob},
                  {"hidden", d.hidden},
                  {"log_interval", d.log_interval},
                  {"schedule", schedule_name(d.schedule)}};
  const auto& a = c.adapt;
  j["adapt"] = {{"steps", a.steps},
                {"lr", a.lr},
                {"final_lr", a.final_lr},
                {"hidden", a.hidden},
                {"penalty", a.penalty},
                {"literal_penalty", a.literal_penalty},
                {"shots_per_k", a.collect.shots_per_k},
                {"uniform_draws", a.collect.uniform_draws}};
  ordered_json devices = ordered_json::array();
  for (const auto& dev : c.devices) {
    devices.push_back({{"profile", ordered_json::parse(device::profile_to_json(dev.profile))},
                       {"constraints_ms", dev.constraints_ms}});
  }
  j["devices"] = devices;
  j["eval"] = {{"episodes", c.eval.episodes},
               {"fixed_k", c.eval.fixed_k},
               {"heldout_states", c.eval.heldout_states}};
  return j;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

Variant parse_variant(const std::string& s) {
  if (s == "modec") return Variant::kModec;
  if (s == "modec_i") return Variant::kModecI;
  if (s == "modec_o") return Variant::kModecO;
  if (s == "fixed_k") return Variant::kFixedK;
  throw ConfigError("unknown variant '" + s + "' (modec, modec_i, modec_o, fixed_k)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kModec: return "modec";
    case Variant::kModecI: return "modec_i";
    case Variant::kModecO: return "modec_o";
    case Variant::kFixedK: return "fixed_k";
  }
  return "modec";
}

modnet::NetShape shape_preset(const std::string& name, std::size_t hidden, std::size_t tasks) {
  modnet::NetShape s;
  s.hidden = hidden;
  s.task_count = tasks;
  if (name == "4x4") {
    s.layers = 4, s.modules_per_layer = 4;
  } else if (name == "2x8") {
    s.layers = 2, s.modules_per_layer = 8;
  } else if (name == "8x2") {
    s.layers = 8, s.modules_per_layer = 2;
  } else {
    throw ConfigError("unknown shape preset '" + name + "' (4x4, 2x8, 8x2)");
  }
  return s;
}

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader top(j, "config");
  top.opt("seed", c.seed);
  std::string variant = "modec";
  top.opt("variant", variant);
  c.variant = parse_variant(variant);
  std::string out_dir = c.out_dir.string();
  top.opt("out_dir", out_dir);
  c.out_dir = out_dir;

  if (const auto* s = top.child("suite")) {
    Reader r(*s, "suite");
    std::string kind = envs::suite_name(c.suite.kind);
    r.opt("kind", kind);
    try {
      c.suite.kind = envs::parse_suite(kind);
    } catch (const envs::EnvError& e) {
      throw ConfigError(e.what());
    }
    r.opt("tasks", c.suite.tasks);
    r.opt("horizon", c.suite.horizon);
    r.opt("observation_noise", c.suite.observation_noise);
    r.done();
  }
  c.suite.seed = c.seed;

  c.shape.task_count = c.suite.tasks;
  if (const auto* s = top.child("shape")) {
    Reader r(*s, "shape");
    std::string preset;
    r.opt("preset", preset);
    r.opt("hidden", c.shape.hidden);
    if (!preset.empty()) c.shape = shape_preset(preset, c.shape.hidden, c.suite.tasks);
    r.opt("layers", c.shape.layers);
    r.opt("modules_per_layer", c.shape.modules_per_layer);
    r.done();
  }

  if (const auto* s = top.child("pretrain")) read_pretrain(*s, c.pretrain);
  c.joint.sac = c.pretrain.sac;
  if (const auto* s = top.child("joint")) read_joint(*s, c.joint);
  if (const auto* s = top.child("distill")) read_distill(*s, c.distill);
  if (const auto* s = top.child("adapt")) read_adapt(*s, c.adapt);
  if (const auto* s = top.child("devices")) {
    if (!s->is_array()) throw ConfigError("devices must be an array");
    for (std::size_t i = 0; i < s->size(); ++i) c.devices.push_back(read_device((*s)[i], i, base_dir));
  }
  if (const auto* s = top.child("eval")) {
    Reader r(*s, "eval");
    r.opt("episodes", c.eval.episodes);
    r.opt("fixed_k", c.eval.fixed_k);
    r.opt("heldout_states", c.eval.heldout_states);
    r.done();
  }
  top.done();
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), path.parent_path());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_to_json(const ExperimentConfig& c) { return sections(c).dump(2); }

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kPretrain: return "pretrain";
    case Stage::kJoint: return "joint";
    case Stage::kDistill: return "distill";
    case Stage::kAdapt: return "adapt";
  }
  return "pretrain";
}

std::string stage_hash(const ExperimentConfig& c, Stage stage) {
  const auto all = sections(c);
  ordered_json key;
  key["stage"] = stage_name(stage);
  for (const char* k : {"seed", "suite", "shape", "pretrain"}) key[k] = all[k];
  if (stage >= Stage::kJoint) key["joint"] = all["joint"];
  if (stage >= Stage::kDistill) {
    key["distill"] = all["distill"];
    key["teacher"] = c.variant != Variant::kModecO;
  }
  if (stage >= Stage::kAdapt) {
    key["adapt"] = all["adapt"];
    key["selector"] = c.variant == Variant::kModecI ? "iterative" : "one_shot";
  }
  return hex(diffcore::fnv1a(key.dump()));
}

}  // namespace modec::harness
