#include "modec/modnet/mask.hpp"

#include <cmath>

namespace modec::modnet {

ModuleMask::ModuleMask(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
  for (auto b : bits_) {
    if (b > 1) throw std::invalid_argument("module mask entries must be 0 or 1");
  }
}

ModuleMask ModuleMask::full(std::size_t n) {
  ModuleMask m(n);
  for (auto& b : m.bits_) b = 1;
  return m;
}

std::size_t ModuleMask::count() const {
  std::size_t k = 0;
  for (auto b : bits_) k += b;
  return k;
}

std::vector<std::size_t> ModuleMask::active() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < bits_.size(); ++i)
    if (bits_[i]) out.push_back(i);
  return out;
}

diffcore::Tensor ModuleMask::as_row() const {
  diffcore::Tensor t(1, bits_.size());
  for (std::size_t i = 0; i < bits_.size(); ++i) t[i] = bits_[i];
  return t;
}

std::string ModuleMask::to_string() const {
  std::string s;
  s.reserve(bits_.size());
  for (auto b : bits_) s.push_back(b ? '1' : '0');
  return s;
}

std::size_t hamming_distance(const ModuleMask& a, const ModuleMask& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask sizes differ");
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a.bits()[i] != b.bits()[i];
  return d;
}

double l2_distance(const ModuleMask& a, const ModuleMask& b) {
  return std::sqrt(static_cast<double>(hamming_distance(a, b)));
}

TaskContext::TaskContext(std::size_t task_id, std::size_t task_count)
    : task_id_(task_id), task_count_(task_count) {
  if (task_count == 0 || task_id >= task_count) {
    throw std::invalid_argument("task id " + std::to_string(task_id) + " outside [0, " +
                                std::to_string(task_count) + ")");
  }
}

diffcore::Tensor TaskContext::embedding() const {
  diffcore::Tensor e(1, task_count_);
  e[task_id_] = 1.0;
  return e;
}

}  // namespace modec::modnet
