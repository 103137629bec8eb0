#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

#include "modec/diffcore/tensor.hpp"

namespace modec::envs {

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SuiteKind { kMultiGoal, kShifted };
enum class TaskSchedule { kRoundRobin, kUniform };

SuiteKind parse_suite(const std::string& name);
std::string suite_name(SuiteKind kind);
TaskSchedule parse_schedule(const std::string& name);

struct SuiteConfig {
  SuiteKind kind = SuiteKind::kMultiGoal;
  std::size_t tasks = 4;
  std::size_t horizon = 100;
  std::uint64_t seed = 0;
  double observation_noise = 0.0;  // std of Gaussian noise added to observed states
};

using Vec2 = std::array<double, 2>;

struct Observation {
  diffcore::Tensor state;  // 1 x state_dim
  std::size_t task = 0;
};

struct StepResult {
  diffcore::Tensor state;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  bool action_clamped = false;
};

/// Point mass in [-1, 1]^2 with per-task goal (MultiGoal) or per-task action
/// rotation around a fixed goal (Shifted). State is (p, p - g).
class EnvSuite {
 public:
  static constexpr double kStepSize = 0.05;
  static constexpr double kSuccessRadius = 0.05;
  static constexpr double kStartHalfWidth = 0.1;
  static constexpr std::size_t kStateDim = 4;
  static constexpr std::size_t kActionDim = 2;

  explicit EnvSuite(SuiteConfig config);

  Observation reset(TaskSchedule schedule = TaskSchedule::kRoundRobin);
  Observation reset_task(std::size_t task);
  StepResult step(std::span<const double> action);

  /// Places the mass without consuming randomness; for tests and oracles.
  void set_position(Vec2 p);

  Vec2 goal(std::size_t task) const;
  double rotation(std::size_t task) const;
  Vec2 position() const { return pos_; }
  std::size_t current_task() const { return task_; }
  std::size_t elapsed() const { return t_; }

  const SuiteConfig& config() const { return config_; }
  std::size_t task_count() const { return config_.tasks; }
  std::size_t horizon() const { return config_.horizon; }
  std::size_t state_dim() const { return kStateDim; }
  std::size_t action_dim() const { return kActionDim; }

 private:
  diffcore::Tensor observe();
  Observation begin(std::size_t task);

  SuiteConfig config_;
  std::mt19937_64 rng_;
  std::size_t next_task_ = 0;
  std::size_t task_ = 0;
  std::size_t t_ = 0;
  Vec2 pos_{0.0, 0.0};
  bool active_ = false;
};

}  // namespace modec::envs
