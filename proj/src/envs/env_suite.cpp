#include "modec/envs/env_suite.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace modec::envs {

using diffcore::Tensor;

SuiteKind parse_suite(const std::string& name) {
  if (name == "multigoal") return SuiteKind::kMultiGoal;
  if (name == "shifted") return SuiteKind::kShifted;
  throw EnvError("unknown suite '" + name + "' (expected multigoal|shifted)");
}

std::string suite_name(SuiteKind kind) {
  return kind == SuiteKind::kMultiGoal ? "multigoal" : "shifted";
}

TaskSchedule parse_schedule(const std::string& name) {
  if (name == "round_robin") return TaskSchedule::kRoundRobin;
  if (name == "uniform") return TaskSchedule::kUniform;
  throw EnvError("unknown task schedule '" + name + "' (expected round_robin|uniform)");
}

EnvSuite::EnvSuite(SuiteConfig config) : config_(config), rng_(config.seed) {
  if (config_.tasks == 0) throw EnvError("suite needs at least one task");
  if (config_.horizon == 0) throw EnvError("horizon must be positive");
  if (!(config_.observation_noise >= 0.0)) throw EnvError("observation noise must be >= 0");
}

Vec2 EnvSuite::goal(std::size_t task) const {
  if (task >= config_.tasks) throw EnvError("task " + std::to_string(task) + " out of range");
  if (config_.kind == SuiteKind::kShifted) return {0.5, 0.0};
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(task) /
                       static_cast<double>(config_.tasks);
  return {std::cos(angle), std::sin(angle)};
}

double EnvSuite::rotation(std::size_t task) const {
  if (task >= config_.tasks) throw EnvError("task " + std::to_string(task) + " out of range");
  if (config_.kind == SuiteKind::kMultiGoal) return 0.0;
  return 2.0 * std::numbers::pi * static_cast<double>(task) / static_cast<double>(config_.tasks);
}

Observation EnvSuite::reset(TaskSchedule schedule) {
  std::size_t task = 0;
  if (schedule == TaskSchedule::kRoundRobin) {
    task = next_task_;
    next_task_ = (next_task_ + 1) % config_.tasks;
  } else {
    task = std::uniform_int_distribution<std::size_t>(0, config_.tasks - 1)(rng_);
  }
  return begin(task);
}

Observation EnvSuite::reset_task(std::size_t task) {
  if (task >= config_.tasks) throw EnvError("task " + std::to_string(task) + " out of range");
  return begin(task);
}

Observation EnvSuite::begin(std::size_t task) {
  std::uniform_real_distribution<double> start(-kStartHalfWidth, kStartHalfWidth);
  task_ = task;
  t_ = 0;
  pos_[0] = start(rng_);
  pos_[1] = start(rng_);
  active_ = true;
  return {observe(), task_};
}

void EnvSuite::set_position(Vec2 p) {
  pos_ = {std::clamp(p[0], -1.0, 1.0), std::clamp(p[1], -1.0, 1.0)};
}

Tensor EnvSuite::observe() {
  const auto g = goal(task_);
  Tensor s = Tensor::row({pos_[0], pos_[1], pos_[0] - g[0], pos_[1] - g[1]});
  if (config_.observation_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, config_.observation_noise);
    for (auto& v : s.values()) v += noise(rng_);
  }
  return s;
}

StepResult EnvSuite::step(std::span<const double> action) {
  if (!active_) throw EnvError("step called before reset or after episode end");
  if (action.size() != kActionDim) {
    throw EnvError("action has " + std::to_string(action.size()) + " entries, expected 2");
  }
  StepResult out;
  Vec2 a{};
  for (std::size_t i = 0; i < kActionDim; ++i) {
    if (!std::isfinite(action[i])) throw EnvError("non-finite action at step " + std::to_string(t_));
    a[i] = std::clamp(action[i], -1.0, 1.0);
    out.action_clamped = out.action_clamped || a[i] != action[i];
  }
  const double theta = rotation(task_);
  const double c = std::cos(theta);
  const double s = std::sin(theta);
  const Vec2 moved{c * a[0] - s * a[1], s * a[0] + c * a[1]};
  set_position({pos_[0] + kStepSize * moved[0], pos_[1] + kStepSize * moved[1]});
  ++t_;

  const auto g = goal(task_);
  const double dist = std::hypot(pos_[0] - g[0], pos_[1] - g[1]);
  out.reward = -dist;
  out.success = dist < kSuccessRadius;
  out.done = out.success || t_ >= config_.horizon;
  out.state = observe();
  active_ = !out.done;
  return out;
}

}  // namespace modec::envs
