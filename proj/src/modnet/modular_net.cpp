#include "modec/modnet/modular_net.hpp"

#include <cmath>

namespace modec::modnet {

using diffcore::Graph;
using diffcore::Node;
using diffcore::ParameterSet;
using diffcore::Tensor;

namespace {

// log_std = mid + half * tanh(raw); raw = atanh(2/3) puts the initial log_std at 0.
constexpr double kLogStdMid = 0.5 * (kLogStdMax + kLogStdMin);
constexpr double kLogStdHalf = 0.5 * (kLogStdMax - kLogStdMin);

std::uint64_t dense_cost(std::size_t in, std::size_t out) {
  return 2ull * static_cast<std::uint64_t>(in) * static_cast<std::uint64_t>(out);
}

}  // namespace

Tensor ActionDistribution::deterministic() const {
  Tensor a = mean;
  for (auto& v : a.values()) v = std::tanh(v);
  return a;
}

Tensor ActionDistribution::sample(std::mt19937_64& rng) const {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor a = mean;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = std::tanh(mean[i] + std::exp(log_std[i]) * normal(rng));
  }
  return a;
}

ModularPolicyNet::ModularPolicyNet(NetShape shape, std::mt19937_64& rng) : shape_(shape) {
  if (shape.layers == 0 || shape.modules_per_layer == 0 || shape.hidden == 0 ||
      shape.state_dim == 0 || shape.action_dim == 0 || shape.task_count == 0) {
    throw NetError("network shape has a zero dimension");
  }
  const auto h = shape.hidden;
  diffcore::add_dense(params_, "encoder", shape.state_dim, h, rng);
  diffcore::add_dense(params_, "routing.hidden", h + shape.task_count, h, rng);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    diffcore::add_dense(params_, "routing.layer" + std::to_string(l), h,
                        shape.modules_per_layer, rng);
  }
  for (std::size_t l = 0; l < shape.layers; ++l)
    for (std::size_t j = 0; j < shape.modules_per_layer; ++j)
      diffcore::add_dense(params_, module_prefix(l, j), h, h, rng);
  diffcore::add_dense(params_, "head", h, 2 * shape.action_dim, rng);
  auto& hb = params_.get("head.b");
  for (std::size_t i = 0; i < shape.action_dim; ++i) {
    hb[shape.action_dim + i] = std::atanh(-kLogStdMid / kLogStdHalf);
  }
}

ModularPolicyNet::ModularPolicyNet(NetShape shape, ParameterSet params)
    : shape_(shape), params_(std::move(params)) {
  std::mt19937_64 rng(0);
  ModularPolicyNet reference(shape, rng);
  if (!reference.params_.compatible(params_)) {
    throw NetError("parameter set does not match the network shape");
  }
}

std::string ModularPolicyNet::module_prefix(std::size_t layer, std::size_t module) {
  return "module." + std::to_string(layer) + "." + std::to_string(module);
}

PolicyNodes ModularPolicyNet::build(Graph& g, Node states, Node tasks, const Tensor& masks,
                                    bool trainable) const {
  const auto M = shape_.modules_per_layer;
  const auto N = shape_.module_count();
  if (masks.cols() != N) {
    throw NetError("mask length " + std::to_string(masks.cols()) + " != module count " +
                   std::to_string(N));
  }
  const std::size_t mask_rows = masks.rows();

  auto x = g.tanh(g.dense(states, params_, "encoder", trainable));
  auto route = g.tanh(g.dense(g.concat_cols(x, tasks), params_, "routing.hidden", trainable));

  PolicyNodes out;
  for (std::size_t l = 0; l < shape_.layers; ++l) {
    Tensor layer_mask(mask_rows, M);
    std::vector<bool> any(M, false);
    for (std::size_t r = 0; r < mask_rows; ++r) {
      for (std::size_t j = 0; j < M; ++j) {
        const double bit = masks(r, l * M + j);
        if (bit != 0.0 && bit != 1.0) throw NetError("mask entries must be 0 or 1");
        layer_mask(r, j) = bit;
        if (bit != 0.0) any[j] = true;
      }
    }
    auto logits = g.dense(route, params_, "routing.layer" + std::to_string(l), trainable);
    auto weights = g.masked_softmax(logits, g.constant(layer_mask));
    out.routing.push_back(weights);

    bool have = false;
    Node mixed;
    for (std::size_t j = 0; j < M; ++j) {
      if (!any[j]) continue;
      auto f = g.tanh(g.dense(x, params_, module_prefix(l, j), trainable));
      auto term = g.mul(f, g.slice_cols(weights, j, 1));
      mixed = have ? g.add(mixed, term) : term;
      have = true;
    }
    if (!have) {
      // Layer with no active module emits the zero feature vector.
      mixed = g.scale(x, 0.0);
    }
    x = mixed;
  }

  auto head = g.dense(x, params_, "head", trainable);
  const auto A = shape_.action_dim;
  out.mean = g.slice_cols(head, 0, A);
  out.log_std = g.add_scalar(g.scale(g.tanh(g.slice_cols(head, A, A)), kLogStdHalf), kLogStdMid);
  out.action = g.tanh(out.mean);
  return out;
}

void ModularPolicyNet::validate(const Tensor& state, const TaskContext& task,
                                const ModuleMask& mask) const {
  if (mask.size() != shape_.module_count()) {
    throw NetError("mask length " + std::to_string(mask.size()) + " != module count " +
                   std::to_string(shape_.module_count()));
  }
  if (state.rows() != 1 || state.cols() != shape_.state_dim) {
    throw NetError("state shape " + state.shape_string() + " does not match state_dim " +
                   std::to_string(shape_.state_dim));
  }
  if (task.task_count() != shape_.task_count) throw NetError("task count mismatch");
}

ActionDistribution ModularPolicyNet::forward(const Tensor& state, const TaskContext& task,
                                             const ModuleMask& mask) const {
  validate(state, task, mask);
  Graph g;
  auto nodes = build(g, g.constant(state), g.constant(task.embedding()), mask.as_row(), false);
  g.evaluate();
  return {g.value(nodes.mean), g.value(nodes.log_std)};
}

std::vector<Tensor> ModularPolicyNet::routing_weights(const Tensor& state, const TaskContext& task,
                                                      const ModuleMask& mask) const {
  validate(state, task, mask);
  Graph g;
  auto nodes = build(g, g.constant(state), g.constant(task.embedding()), mask.as_row(), false);
  g.evaluate();
  std::vector<Tensor> out;
  for (auto n : nodes.routing) out.push_back(g.value(n));
  return out;
}

Tensor ModularPolicyNet::deterministic_actions(const Tensor& states, const Tensor& tasks,
                                               const Tensor& masks) const {
  if (states.cols() != shape_.state_dim) throw NetError("state dimension mismatch");
  Graph g;
  auto nodes = build(g, g.constant(states), g.constant(tasks), masks, false);
  g.evaluate();
  return g.value(nodes.action);
}

std::uint64_t ModularPolicyNet::module_flops() const {
  return dense_cost(shape_.hidden, shape_.hidden);
}

std::uint64_t ModularPolicyNet::fixed_flops() const {
  const auto h = shape_.hidden;
  return dense_cost(shape_.state_dim, h) + dense_cost(h + shape_.task_count, h) +
         shape_.layers * dense_cost(h, shape_.modules_per_layer) +
         dense_cost(h, 2 * shape_.action_dim);
}

std::uint64_t ModularPolicyNet::flops(const ModuleMask& mask) const {
  if (mask.size() != shape_.module_count()) throw NetError("mask length mismatch");
  return fixed_flops() + mask.count() * module_flops();
}

double ModularPolicyNet::action_distance(const Tensor& state, const TaskContext& task,
                                         const ModuleMask& a, const ModuleMask& b) const {
  if (a == b) {
    validate(state, task, a);
    return 0.0;
  }
  return action_l2(forward(state, task, a).deterministic(),
                   forward(state, task, b).deterministic());
}

double action_l2(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw NetError("action shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace modec::modnet
