#include "modec/harness/artifacts.hpp"

namespace modec::harness {

using nlohmann::ordered_json;

namespace {

void expect_stage(const Checkpoint& c, std::initializer_list<const char*> stages) {
  for (const char* s : stages)
    if (c.stage == s) return;
  throw CheckpointError("checkpoint holds stage '" + c.stage + "', not the expected kind");
}

const ordered_json& meta(const Checkpoint& c, const char* key) {
  if (!c.meta.contains(key)) throw CheckpointError(std::string("checkpoint meta lacks '") + key + "'");
  return c.meta.at(key);
}

ordered_json net_json(const modnet::NetShape& s) {
  return {{"layers", s.layers},       {"modules_per_layer", s.modules_per_layer},
          {"hidden", s.hidden},       {"state_dim", s.state_dim},
          {"action_dim", s.action_dim}, {"task_count", s.task_count}};
}

modnet::NetShape net_shape(const ordered_json& j) {
  return {.layers = j.at("layers"), .modules_per_layer = j.at("modules_per_layer"),
          .hidden = j.at("hidden"), .state_dim = j.at("state_dim"),
          .action_dim = j.at("action_dim"), .task_count = j.at("task_count")};
}

ordered_json selector_json(const selector::SelectorShape& s) {
  return {{"state_dim", s.state_dim}, {"task_count", s.task_count},
          {"module_count", s.module_count}, {"hidden", s.hidden},
          {"task_heads", s.task_heads}};
}

selector::SelectorShape selector_shape(const ordered_json& j) {
  return {j.at("state_dim"), j.at("task_count"), j.at("module_count"), j.at("hidden"),
          j.at("task_heads")};
}

template <typename Net>
Checkpoint pack_selector(const char* stage, const Net& net, std::uint64_t seed,
                         const std::string& hash) {
  Checkpoint c{kCheckpointFormat, stage, seed, hash, {}, net.params()};
  c.meta["selector"] = selector_json(net.shape());
  return c;
}

}  // namespace

Checkpoint pack_agent(const std::string& stage, const modnet::ModularPolicyNet& policy,
                      const mtrl::CriticPair& critics, const mtrl::TemperatureBank& temps,
                      std::uint64_t seed, const std::string& config_hash) {
  Checkpoint c{kCheckpointFormat, stage, seed, config_hash, {}, {}};
  c.meta["net"] = net_json(policy.shape());
  c.meta["critic_hidden"] = critics.shape.hidden;
  c.meta["target_entropy"] = temps.target_entropy();
  merge_params(c.params, policy.params(), "policy/");
  merge_params(c.params, critics.online, "critic/online/");
  merge_params(c.params, critics.target, "critic/target/");
  merge_params(c.params, temps.as_params(), "temps/");
  return c;
}

Checkpoint pack_pretrain(const mtrl::PretrainResult& r, std::uint64_t seed,
                         const std::string& config_hash) {
  return pack_agent("pretrain", r.policy, r.critics, r.temperatures, seed, config_hash);
}

Checkpoint pack_joint_base(const selector::JointResult& r, std::uint64_t seed,
                           const std::string& config_hash) {
  return pack_agent("joint_base", r.base, r.critics, r.temperatures, seed, config_hash);
}

modnet::ModularPolicyNet unpack_policy(const Checkpoint& c) {
  expect_stage(c, {"pretrain", "joint_base"});
  try {
    return modnet::ModularPolicyNet(net_shape(meta(c, "net")), extract_params(c.params, "policy/"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad network meta: ") + e.what());
  }
}

mtrl::PretrainResult unpack_pretrain(const Checkpoint& c, double alpha_lr) {
  auto policy = unpack_policy(c);
  const auto& s = policy.shape();
  mtrl::CriticPair critics;
  critics.shape = {s.state_dim, s.action_dim, s.task_count, meta(c, "critic_hidden")};
  critics.online = extract_params(c.params, "critic/online/");
  critics.target = extract_params(c.params, "critic/target/");
  {
    std::mt19937_64 rng(0);
    const mtrl::CriticPair reference(critics.shape, rng);
    if (!reference.online.compatible(critics.online) || !reference.target.compatible(critics.target)) {
      throw CheckpointError("critic tensors do not match the stored critic shape");
    }
  }
  mtrl::TemperatureBank temps(s.task_count, 0.0, meta(c, "target_entropy"), alpha_lr);
  try {
    temps.load_params(extract_params(c.params, "temps/"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("temperatures: ") + e.what());
  }
  return {std::move(policy), std::move(critics), std::move(temps), {}};
}

Checkpoint pack_ims(const selector::IterativeSelectorNet& ims, std::uint64_t seed,
                    const std::string& config_hash) {
  return pack_selector("joint_ims", ims, seed, config_hash);
}

selector::IterativeSelectorNet unpack_ims(const Checkpoint& c) {
  expect_stage(c, {"joint_ims"});
  return selector::IterativeSelectorNet(selector_shape(meta(c, "selector")), c.params);
}

Checkpoint pack_student(const distill::OneShotSelectorNet& student, std::uint64_t seed,
                        const std::string& config_hash) {
  return pack_selector("distill", student, seed, config_hash);
}

distill::OneShotSelectorNet unpack_student(const Checkpoint& c) {
  expect_stage(c, {"distill"});
  return distill::OneShotSelectorNet(selector_shape(meta(c, "selector")), c.params);
}

Checkpoint pack_adapter(const device::DeviceAdapterNet& adapter, const device::DeviceProfile& p,
                        std::uint64_t seed, const std::string& config_hash) {
  Checkpoint c{kCheckpointFormat, "adapt", seed, config_hash, {}, adapter.params()};
  c.meta["module_count"] = adapter.module_count();
  c.meta["profile"] = ordered_json::parse(device::profile_to_json(p));
  return c;
}

device::DeviceAdapterNet unpack_adapter(const Checkpoint& c) {
  expect_stage(c, {"adapt"});
  try {
    return device::DeviceAdapterNet(meta(c, "module_count"), c.params);
  } catch (const device::DeviceError& e) {
    throw CheckpointError(std::string("adapter: ") + e.what());
  }
}

device::DeviceProfile adapter_profile(const Checkpoint& c) {
  expect_stage(c, {"adapt"});
  return device::parse_profile(meta(c, "profile").dump());
}

ordered_json metrics_json(const mtrl::MetricsRow& r) {
  return {{"step", r.step},
          {"task", r.task},
          {"success_rate", r.success_rate},
          {"actor_loss", r.actor_loss},
          {"critic_loss", r.critic_loss},
          {"alpha", r.alpha}};
}

ordered_json metrics_json(const selector::JointMetricsRow& r) {
  return {{"episode", r.episode}, {"K", r.k},           {"dist0", r.dist0},
          {"distK", r.dist_k},    {"ims_loss", r.ims_loss}, {"rg_loss", r.rg_loss},
          {"success", r.success}};
}

ordered_json metrics_json(const distill::DistillMetricsRow& r) {
  return {{"step", r.step},
          {"kd_loss", r.kd_loss},
          {"hamming_agreement", r.hamming_agreement},
          {"shaped_reward", r.shaped_reward}};
}

}  // namespace modec::harness
