#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "modec/diffcore/tensor.hpp"

namespace modec::modnet {

/// Binary selection over the N = L*M modules, layer-major (index = l*M + j).
class ModuleMask {
 public:
  ModuleMask() = default;
  explicit ModuleMask(std::size_t n) : bits_(n, 0) {}
  explicit ModuleMask(std::vector<std::uint8_t> bits);

  static ModuleMask full(std::size_t n);
  static ModuleMask empty(std::size_t n) { return ModuleMask(n); }

  std::size_t size() const { return bits_.size(); }
  std::size_t count() const;
  bool test(std::size_t i) const { return bits_.at(i) != 0; }
  void set(std::size_t i) { bits_.at(i) = 1; }
  void clear(std::size_t i) { bits_.at(i) = 0; }
  bool is_full() const { return count() == size(); }

  const std::vector<std::uint8_t>& bits() const { return bits_; }
  std::vector<std::size_t> active() const;

  /// 1 x N row of 0.0 / 1.0.
  diffcore::Tensor as_row() const;
  std::string to_string() const;  // e.g. "1010"

  bool operator==(const ModuleMask&) const = default;

 private:
  std::vector<std::uint8_t> bits_;
};

std::size_t hamming_distance(const ModuleMask& a, const ModuleMask& b);

/// Euclidean distance between the masks viewed as 0/1 vectors (= sqrt(hamming)).
double l2_distance(const ModuleMask& a, const ModuleMask& b);

/// Task index with its one-hot embedding.
class TaskContext {
 public:
  TaskContext(std::size_t task_id, std::size_t task_count);

  std::size_t id() const { return task_id_; }
  std::size_t task_count() const { return task_count_; }
  diffcore::Tensor embedding() const;

  bool operator==(const TaskContext&) const = default;

 private:
  std::size_t task_id_;
  std::size_t task_count_;
};

}  // namespace modec::modnet
