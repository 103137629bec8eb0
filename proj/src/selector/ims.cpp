#include "modec/selector/ims.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

namespace modec::selector {

using diffcore::Graph;
using diffcore::Node;
using diffcore::ParameterSet;
using diffcore::Tensor;
using modnet::ModuleMask;
using modnet::TaskContext;

namespace {

void check_k(std::size_t k, std::size_t n) {
  if (k < 1 || k > n) {
    throw SelectError("K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
}

void add_selector_layers(ParameterSet& p, std::size_t in, std::size_t hidden, std::size_t out,
                         std::mt19937_64& rng) {
  diffcore::add_dense(p, "l0", in, hidden, rng);
  diffcore::add_dense(p, "l1", hidden, hidden, rng);
  diffcore::add_dense(p, "out", hidden, out, rng);
}

}  // namespace

Tensor selector_features(const Tensor& state, const TaskContext& task, std::size_t k,
                         std::size_t module_count, const ModuleMask* prefix) {
  if (state.rows() != 1) throw SelectError("selector features expect a single state row");
  const std::size_t extra = prefix ? prefix->size() : 0;
  Tensor f(1, state.cols() + task.task_count() + 1 + extra);
  std::size_t c = 0;
  for (double v : state.values()) f[c++] = v;
  f[c + task.id()] = 1.0;
  c += task.task_count();
  f[c++] = static_cast<double>(k) / static_cast<double>(module_count);
  for (std::size_t i = 0; i < extra; ++i) f[c++] = prefix->test(i) ? 1.0 : 0.0;
  return f;
}

SelectorMlp::SelectorMlp(SelectorShape shape, std::size_t input_dim, std::mt19937_64& rng)
    : shape_(shape), input_dim_(input_dim) {
  if (shape.module_count == 0 || shape.hidden == 0) throw SelectError("selector shape has a zero");
  if (shape.task_heads && input_dim < shape.state_dim + shape.task_count) {
    throw SelectError("task heads need the task one-hot in the features");
  }
  const std::size_t heads = shape.task_heads ? shape.task_count : 1;
  add_selector_layers(params_, input_dim, shape.hidden, shape.module_count * heads, rng);
}

SelectorMlp::SelectorMlp(SelectorShape shape, std::size_t input_dim, ParameterSet params)
    : shape_(shape), input_dim_(input_dim), params_(std::move(params)) {
  std::mt19937_64 rng(0);
  SelectorMlp reference(shape, input_dim, rng);
  if (!reference.params_.compatible(params_)) {
    throw SelectError("selector parameters do not match the selector shape");
  }
}

Node SelectorMlp::build(Graph& g, Node features, bool trainable) const {
  auto h = g.tanh(g.dense(features, params_, "l0", trainable));
  h = g.tanh(g.dense(h, params_, "l1", trainable));
  const auto out = g.dense(h, params_, "out", trainable);
  if (!shape_.task_heads) return out;
  // Features carry e_tau at [state_dim, state_dim + T); each row keeps its task's head.
  const std::size_t n = shape_.module_count;
  Tensor ones(1, n);
  for (auto& v : ones.values()) v = 1.0;
  const auto spread = g.constant(ones);
  std::optional<Node> logits;
  for (std::size_t t = 0; t < shape_.task_count; ++t) {
    const auto gate = g.matmul(g.slice_cols(features, shape_.state_dim + t, 1), spread);
    const auto head = g.mul(gate, g.slice_cols(out, t * n, n));
    logits = logits ? g.add(*logits, head) : head;
  }
  return *logits;
}

Tensor SelectorMlp::scores(const Tensor& features) const {
  if (features.rows() != 1 || features.cols() != input_dim_) {
    throw SelectError("selector features have shape " + features.shape_string());
  }
  forwards_.bump();
  Graph g;
  auto out = build(g, g.constant(features), false);
  g.evaluate();
  return g.value(out);
}

IterativeSelectorNet::IterativeSelectorNet(SelectorShape shape, std::mt19937_64& rng)
    : SelectorMlp(shape, feature_dim(shape), rng) {}

IterativeSelectorNet::IterativeSelectorNet(SelectorShape shape, ParameterSet params)
    : SelectorMlp(shape, feature_dim(shape), std::move(params)) {}

Tensor IterativeSelectorNet::features(const Tensor& state, const TaskContext& task, std::size_t k,
                                      const ModuleMask& prefix) const {
  if (prefix.size() != shape().module_count) throw SelectError("prefix length mismatch");
  return selector_features(state, task, k, shape().module_count, &prefix);
}

Tensor IterativeSelectorNet::probabilities(const Tensor& state, const TaskContext& task,
                                           std::size_t k, const ModuleMask& prefix) const {
  const auto logits = scores(features(state, task, k, prefix));
  Tensor p(1, logits.cols());
  double hi = -INFINITY;
  for (std::size_t j = 0; j < logits.cols(); ++j)
    if (!prefix.test(j)) hi = std::max(hi, logits[j]);
  if (!std::isfinite(hi)) throw SelectError("no legal module left");
  double total = 0.0;
  for (std::size_t j = 0; j < logits.cols(); ++j)
    if (!prefix.test(j)) total += p[j] = std::exp(logits[j] - hi);
  for (auto& v : p.values()) v /= total;
  return p;
}

std::size_t choose(std::span<const double> logits, const ModuleMask& prefix, SelectMode mode,
                   std::mt19937_64& rng) {
  if (logits.size() != prefix.size()) throw SelectError("logit count does not match the mask");
  if (prefix.count() == prefix.size()) throw SelectError("prefix already selects every module");
  std::size_t best = prefix.size();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (prefix.test(j)) continue;
    if (best == prefix.size() || logits[j] > logits[best]) best = j;
  }
  if (mode == SelectMode::kGreedy) return best;
  std::vector<double> w(logits.size(), 0.0);
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (!prefix.test(j)) w[j] = std::exp(logits[j] - logits[best]);
  return std::discrete_distribution<std::size_t>(w.begin(), w.end())(rng);
}

std::size_t select_next(const IterativeSelectorNet& net, const Tensor& state,
                        const TaskContext& task, std::size_t k, const ModuleMask& prefix,
                        SelectMode mode, std::mt19937_64& rng) {
  check_k(k, net.shape().module_count);
  if (prefix.count() >= k) {
    throw SelectError("prefix already holds " + std::to_string(prefix.count()) + " >= K modules");
  }
  const auto logits = net.scores(net.features(state, task, k, prefix));
  return choose(logits.values(), prefix, mode, rng);
}

ModuleMask SelectionEpisode::mask() const {
  if (steps.empty()) throw SelectError("empty selection episode");
  auto m = steps.back().prefix;
  m.set(steps.back().choice);
  return m;
}

SelectionEpisode select_k(const IterativeSelectorNet& net, const Tensor& state,
                          const TaskContext& task, std::size_t k, SelectMode mode,
                          std::mt19937_64& rng) {
  const auto n = net.shape().module_count;
  check_k(k, n);
  SelectionEpisode ep{state, task.id(), task.task_count(), k, {}, {}, {}};
  ModuleMask prefix(n);
  for (std::size_t i = 0; i < k; ++i) {
    const auto choice = select_next(net, state, task, k, prefix, mode, rng);
    ep.steps.push_back({prefix, choice, 0.0});
    prefix.set(choice);
  }
  return ep;
}

double action_gap(const modnet::ModularPolicyNet& base, const Tensor& state,
                  const TaskContext& task, const ModuleMask& mask) {
  return base.action_distance(state, task, ModuleMask::full(mask.size()), mask);
}

double ims_reward(const modnet::ModularPolicyNet& base, const Tensor& state,
                  const TaskContext& task, const ModuleMask& before, const ModuleMask& after) {
  return action_gap(base, state, task, before) - action_gap(base, state, task, after);
}

std::vector<double> prefix_gaps(const modnet::ModularPolicyNet& base,
                                const SelectionEpisode& episode) {
  const auto n = base.shape().module_count();
  const auto k = episode.steps.size();
  // Row 0 is the full mask, rows 1..K+1 the prefixes m_{0:0} .. m_{0:K}.
  Tensor states(k + 2, episode.state.cols());
  Tensor tasks(k + 2, episode.task_count);
  Tensor masks(k + 2, n);
  ModuleMask prefix(n);
  for (std::size_t r = 0; r < k + 2; ++r) {
    for (std::size_t c = 0; c < states.cols(); ++c) states(r, c) = episode.state[c];
    tasks(r, episode.task) = 1.0;
    if (r >= 2) prefix.set(episode.steps[r - 2].choice);
    for (std::size_t c = 0; c < n; ++c) masks(r, c) = r == 0 ? 1.0 : prefix.test(c);
  }
  const auto actions = base.deterministic_actions(states, tasks, masks);
  std::vector<double> gaps(k + 1);
  for (std::size_t i = 0; i <= k; ++i) {
    gaps[i] = modnet::action_l2(actions.row_at(0), actions.row_at(i + 1));
  }
  return gaps;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    if (!std::isfinite(acc)) throw SelectError("non-finite selection return");
    g[i] = acc;
  }
  return g;
}

void assign_rewards(const modnet::ModularPolicyNet& base, SelectionEpisode& episode,
                    double gamma) {
  const auto gaps = prefix_gaps(base, episode);
  std::vector<double> rewards(episode.steps.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    rewards[i] = gaps[i] - gaps[i + 1];
    episode.steps[i].reward = rewards[i];
  }
  episode.returns = discounted_returns(rewards, gamma);
  episode.gaps = gaps;
}

Node build_ims_loss(Graph& g, const IterativeSelectorNet& net,
                    std::span<const SelectionEpisode> episodes, std::size_t group) {
  if (episodes.empty()) throw SelectError("selector loss of an empty batch");
  if (group == 0 || episodes.size() % group != 0) {
    throw SelectError("selector batch of " + std::to_string(episodes.size()) +
                      " episodes is not a multiple of the group size " + std::to_string(group));
  }
  const auto n = net.shape().module_count;
  std::size_t rows = 0;
  double mean_g = 0.0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    if (ep.returns.size() != ep.steps.size()) throw SelectError("episode returns not assigned");
    if (group > 1) {
      const auto& lead = episodes[e / group * group];
      if (ep.gaps.size() != ep.steps.size() + 1) throw SelectError("episode gaps not assigned");
      const auto a = ep.state.values(), b = lead.state.values();
      if (ep.k != lead.k || ep.task != lead.task || ep.steps.size() != lead.steps.size() ||
          !std::equal(a.begin(), a.end(), b.begin(), b.end())) {
        throw SelectError("selector group mixes (state, task, K)");
      }
    }
    rows += ep.steps.size();
    for (double v : ep.returns) {
      if (!std::isfinite(v)) throw SelectError("non-finite selection return");
      mean_g += v;
    }
  }
  if (rows == 0) throw SelectError("selector loss of empty episodes");
  mean_g /= static_cast<double>(rows);

  Tensor features(rows, net.input_dim());
  Tensor legal(rows, n);
  Tensor chosen(rows, n);
  Tensor advantage(rows, 1);
  std::size_t r = 0;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    const auto& ep = episodes[e];
    const TaskContext task(ep.task, ep.task_count);
    const std::size_t first = e / group * group;
    for (std::size_t i = 0; i < ep.steps.size(); ++i, ++r) {
      const auto& st = ep.steps[i];
      if (st.prefix.test(st.choice)) throw SelectError("episode repeats a selected module");
      const auto f = net.features(ep.state, task, ep.k, st.prefix);
      for (std::size_t c = 0; c < f.cols(); ++c) features(r, c) = f[c];
      for (std::size_t c = 0; c < n; ++c) legal(r, c) = st.prefix.test(c) ? 0.0 : 1.0;
      chosen(r, st.choice) = 1.0;
      if (group == 1) {
        advantage(r, 0) = ep.returns[i] - mean_g;
      } else {
        double others = 0.0;
        for (std::size_t o = first; o < first + group; ++o) {
          if (o != e) others += episodes[o].returns[i] - episodes[o].gaps[i];
        }
        advantage(r, 0) = ep.returns[i] - ep.gaps[i] - others / static_cast<double>(group - 1);
      }
    }
  }
  auto log_probs = g.masked_log_softmax(net.build(g, g.constant(features)), g.constant(legal));
  auto logp = g.row_sum(g.mul(log_probs, g.constant(chosen)));
  auto loss = g.scale(g.sum(g.mul(logp, g.constant(advantage))),
                      -1.0 / static_cast<double>(episodes.size()));
  g.label(loss, "ims_loss");
  return loss;
}

ParameterSet reptile_update(const ParameterSet& outer, const ParameterSet& inner, double eps) {
  if (!outer.compatible(inner)) throw SelectError("reptile update with mismatched parameters");
  if (eps == 1.0) return inner;
  ParameterSet out = outer;
  for (auto& [name, t] : out) {
    const auto& q = inner.get(name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += eps * (q[i] - t[i]);
  }
  return out;
}

Node build_regularization_loss(Graph& g, const modnet::ModularPolicyNet& frozen,
                               const Tensor& states, const Tensor& tasks, Node current_action) {
  const auto anchor =
      frozen.deterministic_actions(states, tasks, Tensor(1, frozen.shape().module_count(), 1.0));
  auto loss = g.mean(g.row_norm(g.sub(g.constant(anchor), current_action)));
  g.label(loss, "rg_loss");
  return loss;
}

}  // namespace modec::selector
