#include "modec/mtrl/replay.hpp"

#include <cmath>
#include <string>

namespace modec::mtrl {

using diffcore::Tensor;

Batch make_batch(const std::vector<Transition>& transitions, std::size_t task_count) {
  if (transitions.empty()) throw TrainError("empty batch");
  const std::size_t b = transitions.size();
  const std::size_t s = transitions.front().state.size();
  const std::size_t a = transitions.front().action.size();
  Batch out{Tensor(b, s), Tensor(b, a), Tensor(b, 1), Tensor(b, s), Tensor(b, task_count),
            Tensor(b, 1), {}};
  out.task_ids.reserve(b);
  const std::size_t n = transitions.front().mask.size();
  if (n > 0) out.masks = Tensor(b, n);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& t = transitions[i];
    if (t.state.size() != s || t.next_state.size() != s || t.action.size() != a) {
      throw TrainError("transition " + std::to_string(i) + " has inconsistent dimensions");
    }
    if (t.task >= task_count) throw TrainError("transition task id out of range");
    for (std::size_t c = 0; c < s; ++c) {
      out.states(i, c) = t.state[c];
      out.next_states(i, c) = t.next_state[c];
    }
    for (std::size_t c = 0; c < a; ++c) out.actions(i, c) = t.action[c];
    out.rewards(i, 0) = t.reward;
    out.tasks(i, t.task) = 1.0;
    out.terminal(i, 0) = t.success ? 1.0 : 0.0;
    out.task_ids.push_back(t.task);
    if (t.mask.size() != n) throw TrainError("transition " + std::to_string(i) + " mask length");
    for (std::size_t c = 0; c < n; ++c) out.masks(i, c) = t.mask[c];
  }
  return out;
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t state_dim, std::size_t action_dim,
                           std::size_t task_count)
    : capacity_(capacity), state_dim_(state_dim), action_dim_(action_dim), task_count_(task_count) {
  if (capacity == 0) throw TrainError("replay capacity must be positive");
  items_.reserve(std::min<std::size_t>(capacity, 1u << 20));
}

void ReplayBuffer::add(Transition t) {
  if (t.state.size() != state_dim_ || t.next_state.size() != state_dim_ ||
      t.action.size() != action_dim_) {
    throw TrainError("transition dimensions do not match the buffer");
  }
  if (t.task >= task_count_) throw TrainError("transition task id out of range");
  if (!std::isfinite(t.reward)) throw TrainError("non-finite reward");
  if (items_.size() < capacity_) {
    items_.push_back(std::move(t));
  } else {
    items_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
  }
}

std::vector<std::size_t> ReplayBuffer::sample_indices(std::size_t batch,
                                                      std::mt19937_64& rng) const {
  if (items_.empty()) throw TrainError("sampling from an empty replay buffer");
  std::uniform_int_distribution<std::size_t> pick(0, items_.size() - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = pick(rng);
  return idx;
}

Batch ReplayBuffer::sample(std::size_t batch, std::mt19937_64& rng) const {
  std::vector<Transition> picked;
  picked.reserve(batch);
  for (auto i : sample_indices(batch, rng)) picked.push_back(items_[i]);
  return make_batch(picked, task_count_);
}

}  // namespace modec::mtrl
