#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "modec/device/device.hpp"
#include "modec/distill/distill.hpp"
#include "modec/harness/checkpoint.hpp"
#include "modec/mtrl/pretrain.hpp"
#include "modec/selector/joint.hpp"

namespace modec::harness {

/// Policy, critics and temperatures. The joint base uses the same layout, so
/// unpack_pretrain reads either. Temperature optimizer state is not stored.
Checkpoint pack_agent(const std::string& stage, const modnet::ModularPolicyNet& policy,
                      const mtrl::CriticPair& critics, const mtrl::TemperatureBank& temps,
                      std::uint64_t seed, const std::string& config_hash);
Checkpoint pack_pretrain(const mtrl::PretrainResult& r, std::uint64_t seed,
                         const std::string& config_hash);
Checkpoint pack_joint_base(const selector::JointResult& r, std::uint64_t seed,
                           const std::string& config_hash);
/// `alpha_lr` configures the restored temperature optimizers.
mtrl::PretrainResult unpack_pretrain(const Checkpoint& c, double alpha_lr);
modnet::ModularPolicyNet unpack_policy(const Checkpoint& c);

Checkpoint pack_ims(const selector::IterativeSelectorNet& ims, std::uint64_t seed,
                    const std::string& config_hash);
selector::IterativeSelectorNet unpack_ims(const Checkpoint& c);

Checkpoint pack_student(const distill::OneShotSelectorNet& student, std::uint64_t seed,
                        const std::string& config_hash);
distill::OneShotSelectorNet unpack_student(const Checkpoint& c);

/// The profile travels with the adapter it was fitted on.
Checkpoint pack_adapter(const device::DeviceAdapterNet& adapter, const device::DeviceProfile& p,
                        std::uint64_t seed, const std::string& config_hash);
device::DeviceAdapterNet unpack_adapter(const Checkpoint& c);
device::DeviceProfile adapter_profile(const Checkpoint& c);

nlohmann::ordered_json metrics_json(const mtrl::MetricsRow& r);
nlohmann::ordered_json metrics_json(const selector::JointMetricsRow& r);
nlohmann::ordered_json metrics_json(const distill::DistillMetricsRow& r);

}  // namespace modec::harness
