#pragma once

#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

#include "modec/diffcore/tensor.hpp"

namespace modec::mtrl {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Transition {
  std::vector<double> state;
  std::vector<double> action;
  double reward = 0.0;
  std::vector<double> next_state;
  std::size_t task = 0;
  bool done = false;     // episode ended here (success or horizon)
  bool success = false;  // absorbing: no bootstrap past this transition
  std::vector<double> mask{};  // module mask used to act; empty means the full mask
};

/// Column-stacked minibatch. `tasks` is one-hot, `terminal` holds success flags.
/// `masks` is B x N when every transition carries a mask, else 0 x 0.
struct Batch {
  diffcore::Tensor states;       // B x S
  diffcore::Tensor actions;      // B x A
  diffcore::Tensor rewards;      // B x 1
  diffcore::Tensor next_states;  // B x S
  diffcore::Tensor tasks;        // B x T
  diffcore::Tensor terminal;     // B x 1
  std::vector<std::size_t> task_ids;
  diffcore::Tensor masks{};

  std::size_t size() const { return task_ids.size(); }
};

Batch make_batch(const std::vector<Transition>& transitions, std::size_t task_count);

/// Bounded FIFO with uniform sampling with replacement.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t state_dim, std::size_t action_dim,
               std::size_t task_count);

  void add(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return items_.at(i); }

  std::vector<std::size_t> sample_indices(std::size_t batch, std::mt19937_64& rng) const;
  Batch sample(std::size_t batch, std::mt19937_64& rng) const;

 private:
  std::size_t capacity_;
  std::size_t state_dim_;
  std::size_t action_dim_;
  std::size_t task_count_;
  std::size_t head_ = 0;  // next slot to overwrite once full
  std::vector<Transition> items_;
};

}  // namespace modec::mtrl
