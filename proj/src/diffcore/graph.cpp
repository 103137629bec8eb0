#include "modec/diffcore/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace modec::diffcore {
namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Tensor& t) {
  return ConstMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap view(Tensor& t) {
  return MutMap(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

void accumulate(Tensor& slot, const Tensor& g) {
  if (slot.size() == 0 && slot.rows() == 0) {
    slot = g;
    return;
  }
  auto dst = slot.values();
  auto src = g.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kScale: return "scale";
    case Op::kAddScalar: return "add_scalar";
    case Op::kTanh: return "tanh";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kRowNorm: return "row_norm";
    case Op::kRowSum: return "row_sum";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kConcatCols: return "concat_cols";
    case Op::kSliceCols: return "slice_cols";
  }
  return "?";
}

Node Graph::push(Record rec) {
  for (auto in : rec.inputs) {
    if (in >= nodes_.size()) throw DiffError("graph input refers to a node of another graph");
    rec.requires_grad = rec.requires_grad || nodes_[in].requires_grad;
  }
  nodes_.push_back(std::move(rec));
  evaluated_ = false;
  return Node{nodes_.size() - 1};
}

void Graph::check(Node n) const {
  if (n.id >= nodes_.size()) throw DiffError("node handle out of range");
}

Node Graph::input(const std::string& name, std::size_t rows, std::size_t cols) {
  Record r{.op = Op::kInput};
  r.name = name;
  r.rows = rows;
  r.cols = cols;
  return push(std::move(r));
}

Node Graph::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("constant is not finite");
  Record r{.op = Op::kConstant};
  r.value = std::move(value);
  return push(std::move(r));
}

Node Graph::param(const ParameterSet& set, const std::string& name, bool trainable) {
  Record r{.op = Op::kParam};
  r.name = name;
  r.set = &set;
  r.ref = &set.get(name);
  r.trainable = trainable;
  r.requires_grad = trainable;
  return push(std::move(r));
}

#define MODEC_UNARY(fn, kind)                 \
  Node Graph::fn(Node a) {                    \
    check(a);                                 \
    Record r{.op = kind};                     \
    r.inputs = {a.id};                        \
    return push(std::move(r));                \
  }

MODEC_UNARY(tanh, Op::kTanh)
MODEC_UNARY(relu, Op::kRelu)
MODEC_UNARY(exp, Op::kExp)
MODEC_UNARY(log, Op::kLog)
MODEC_UNARY(softmax, Op::kSoftmax)
MODEC_UNARY(row_norm, Op::kRowNorm)
MODEC_UNARY(row_sum, Op::kRowSum)
MODEC_UNARY(sum, Op::kSum)
MODEC_UNARY(mean, Op::kMean)
#undef MODEC_UNARY

#define MODEC_BINARY(fn, kind)                \
  Node Graph::fn(Node a, Node b) {            \
    check(a);                                 \
    check(b);                                 \
    Record r{.op = kind};                     \
    r.inputs = {a.id, b.id};                  \
    return push(std::move(r));                \
  }

MODEC_BINARY(matmul, Op::kMatMul)
MODEC_BINARY(add, Op::kAdd)
MODEC_BINARY(sub, Op::kSub)
MODEC_BINARY(mul, Op::kMul)
MODEC_BINARY(concat_cols, Op::kConcatCols)
#undef MODEC_BINARY

Node Graph::masked_softmax(Node a, Node mask) {
  check(a);
  check(mask);
  if (nodes_[mask.id].requires_grad) throw DiffError("softmax mask must not require gradients");
  Record r{.op = Op::kSoftmax};
  r.inputs = {a.id, mask.id};
  return push(std::move(r));
}

Node Graph::masked_log_softmax(Node a, Node mask) {
  check(a);
  check(mask);
  if (nodes_[mask.id].requires_grad) throw DiffError("softmax mask must not require gradients");
  Record r{.op = Op::kLogSoftmax};
  r.inputs = {a.id, mask.id};
  return push(std::move(r));
}

Node Graph::scale(Node a, double c) {
  check(a);
  Record r{.op = Op::kScale};
  r.inputs = {a.id};
  r.scalar = c;
  return push(std::move(r));
}

Node Graph::add_scalar(Node a, double c) {
  check(a);
  Record r{.op = Op::kAddScalar};
  r.inputs = {a.id};
  r.scalar = c;
  return push(std::move(r));
}

Node Graph::slice_cols(Node a, std::size_t begin, std::size_t count) {
  check(a);
  Record r{.op = Op::kSliceCols};
  r.inputs = {a.id};
  r.begin = begin;
  r.count = count;
  return push(std::move(r));
}

Node Graph::dense(Node x, const ParameterSet& set, const std::string& prefix, bool trainable) {
  auto w = param(set, prefix + ".w", trainable);
  auto b = param(set, prefix + ".b", trainable);
  return add(matmul(x, w), b);
}

void Graph::label(Node n, std::string text) {
  check(n);
  nodes_[n.id].text = std::move(text);
}

void Graph::mark_output(const std::string& name, Node n) {
  check(n);
  outputs_.emplace_back(name, n.id);
}

std::string Graph::describe(std::size_t id) const {
  const auto& r = nodes_[id];
  std::string s = "node #" + std::to_string(id) + " (" + op_name(r.op);
  if (!r.name.empty()) s += " '" + r.name + "'";
  if (!r.text.empty()) s += " [" + r.text + "]";
  return s + ")";
}

const Tensor& Graph::val(std::size_t id) const {
  const auto& r = nodes_[id];
  return r.op == Op::kParam ? *r.ref : r.value;
}

const Tensor& Graph::value(Node n) const {
  check(n);
  if (!evaluated_) throw DiffError("graph has not been evaluated");
  return val(n.id);
}

std::map<std::string, Tensor> Graph::evaluate(const std::map<std::string, Tensor>& inputs) {
  evaluated_ = false;
  for (std::size_t id = 0; id < nodes_.size(); ++id) compute(id, inputs);
  evaluated_ = true;
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : outputs_) out[name] = val(id);
  return out;
}

void Graph::compute(std::size_t id, const std::map<std::string, Tensor>& inputs) {
  auto& r = nodes_[id];
  auto fail = [&](const std::string& what) -> void {
    throw ShapeError(describe(id) + ": " + what);
  };
  auto in = [&](std::size_t k) -> const Tensor& { return val(r.inputs[k]); };

  switch (r.op) {
    case Op::kInput: {
      auto it = inputs.find(r.name);
      if (it == inputs.end()) throw DiffError(describe(id) + ": input not bound");
      if (it->second.rows() != r.rows || it->second.cols() != r.cols) {
        fail("expected " + Tensor(r.rows, r.cols).shape_string() + ", got " +
             it->second.shape_string());
      }
      r.value = it->second;
      break;
    }
    case Op::kConstant:
      return;
    case Op::kParam:
      if (!r.ref->all_finite()) throw NumericError(describe(id) + ": parameter is not finite");
      return;
    case Op::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.cols() != b.rows()) fail("matmul " + a.shape_string() + " x " + b.shape_string());
      r.value = Tensor(a.rows(), b.cols());
      view(r.value).noalias() = view(a) * view(b);
      break;
    }
    case Op::kAdd: {
      const auto& a = in(0);
      const auto& b = in(1);
      r.value = a;
      auto out = r.value.values();
      if (b.same_shape(a)) {
        auto bv = b.values();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
      } else if (b.rows() == 1 && b.cols() == a.cols()) {
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) r.value(i, j) += b[j];
      } else {
        fail("add " + a.shape_string() + " + " + b.shape_string());
      }
      break;
    }
    case Op::kSub: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (!a.same_shape(b)) fail("sub " + a.shape_string() + " - " + b.shape_string());
      r.value = a;
      auto out = r.value.values();
      auto bv = b.values();
      for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
      break;
    }
    case Op::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      r.value = a;
      if (b.same_shape(a)) {
        auto out = r.value.values();
        auto bv = b.values();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
      } else if (b.cols() == 1 && b.rows() == a.rows()) {
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) r.value(i, j) *= b[i];
      } else if (b.rows() == 1 && b.cols() == a.cols()) {
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) r.value(i, j) *= b[j];
      } else {
        fail("mul " + a.shape_string() + " * " + b.shape_string());
      }
      break;
    }
    case Op::kScale:
      r.value = in(0);
      for (auto& v : r.value.values()) v *= r.scalar;
      break;
    case Op::kAddScalar:
      r.value = in(0);
      for (auto& v : r.value.values()) v += r.scalar;
      break;
    case Op::kTanh:
      r.value = in(0);
      for (auto& v : r.value.values()) v = std::tanh(v);
      break;
    case Op::kRelu:
      r.value = in(0);
      for (auto& v : r.value.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Op::kExp:
      r.value = in(0);
      for (auto& v : r.value.values()) v = std::exp(v);
      break;
    case Op::kLog:
      r.value = in(0);
      for (auto& v : r.value.values()) v = std::log(v);
      break;
    case Op::kSoftmax:
    case Op::kLogSoftmax: {
      const bool log_space = r.op == Op::kLogSoftmax;
      const auto& a = in(0);
      const Tensor* mask = r.inputs.size() > 1 ? &in(1) : nullptr;
      if (mask && !mask->same_shape(a) && !(mask->rows() == 1 && mask->cols() == a.cols())) {
        fail("softmax mask " + mask->shape_string() + " vs " + a.shape_string());
      }
      const bool shared = mask && mask->rows() == 1;
      auto active = [&](std::size_t i, std::size_t j) {
        return !mask || (*mask)(shared ? 0 : i, j) != 0.0;
      };
      r.value = Tensor(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double hi = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < a.cols(); ++j)
          if (active(i, j)) hi = std::max(hi, a(i, j));
        if (!std::isfinite(hi)) continue;  // empty row stays zero
        double total = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (!active(i, j)) continue;
          const double e = std::exp(a(i, j) - hi);
          r.value(i, j) = e;
          total += e;
        }
        if (log_space) {
          const double lse = hi + std::log(total);
          for (std::size_t j = 0; j < a.cols(); ++j)
            r.value(i, j) = active(i, j) ? a(i, j) - lse : 0.0;
        } else {
          for (std::size_t j = 0; j < a.cols(); ++j) r.value(i, j) /= total;
        }
      }
      break;
    }
    case Op::kRowNorm: {
      const auto& a = in(0);
      r.value = Tensor(a.rows(), 1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * a(i, j);
        r.value[i] = std::sqrt(s);
      }
      break;
    }
    case Op::kRowSum: {
      const auto& a = in(0);
      r.value = Tensor(a.rows(), 1);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j);
        r.value[i] = s;
      }
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      const auto& a = in(0);
      if (a.size() == 0) fail("reduction over empty tensor");
      double s = 0.0;
      for (double v : a.values()) s += v;
      if (r.op == Op::kMean) s /= static_cast<double>(a.size());
      r.value = Tensor(1, 1, s);
      break;
    }
    case Op::kConcatCols: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (a.rows() != b.rows()) fail("concat " + a.shape_string() + " | " + b.shape_string());
      r.value = Tensor(a.rows(), a.cols() + b.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) r.value(i, j) = a(i, j);
        for (std::size_t j = 0; j < b.cols(); ++j) r.value(i, a.cols() + j) = b(i, j);
      }
      break;
    }
    case Op::kSliceCols: {
      const auto& a = in(0);
      if (r.begin + r.count > a.cols() || r.count == 0) {
        fail("slice [" + std::to_string(r.begin) + ", +" + std::to_string(r.count) + ") of " +
             a.shape_string());
      }
      r.value = Tensor(a.rows(), r.count);
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < r.count; ++j) r.value(i, j) = a(i, r.begin + j);
      break;
    }
  }
  if (!r.value.all_finite()) throw NumericError(describe(id) + ": non-finite output");
}

void Graph::backprop(std::size_t id, std::vector<Tensor>& grads) const {
  const auto& r = nodes_[id];
  const Tensor& g = grads[id];
  auto wants = [&](std::size_t k) { return nodes_[r.inputs[k]].requires_grad; };
  auto send = [&](std::size_t k, const Tensor& t) { accumulate(grads[r.inputs[k]], t); };
  auto in = [&](std::size_t k) -> const Tensor& { return val(r.inputs[k]); };
  const Tensor& y = r.value;

  switch (r.op) {
    case Op::kInput:
    case Op::kConstant:
    case Op::kParam:
      return;
    case Op::kMatMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (wants(0)) {
        Tensor da(a.rows(), a.cols());
        view(da).noalias() = view(g) * view(b).transpose();
        send(0, da);
      }
      if (wants(1)) {
        Tensor db(b.rows(), b.cols());
        view(db).noalias() = view(a).transpose() * view(g);
        send(1, db);
      }
      return;
    }
    case Op::kAdd: {
      const auto& b = in(1);
      if (wants(0)) send(0, g);
      if (wants(1)) {
        if (b.same_shape(g)) {
          send(1, g);
        } else {
          Tensor db(1, b.cols());
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) db[j] += g(i, j);
          send(1, db);
        }
      }
      return;
    }
    case Op::kSub: {
      if (wants(0)) send(0, g);
      if (wants(1)) {
        Tensor db = g;
        for (auto& v : db.values()) v = -v;
        send(1, db);
      }
      return;
    }
    case Op::kMul: {
      const auto& a = in(0);
      const auto& b = in(1);
      const bool same = b.same_shape(a);
      const bool col = !same && b.cols() == 1;
      auto bval = [&](std::size_t i, std::size_t j) {
        return same ? b(i, j) : (col ? b[i] : b[j]);
      };
      if (wants(0)) {
        Tensor da(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = g(i, j) * bval(i, j);
        send(0, da);
      }
      if (wants(1)) {
        Tensor db(b.rows(), b.cols());
        for (std::size_t i = 0; i < a.rows(); ++i) {
          for (std::size_t j = 0; j < a.cols(); ++j) {
            const double v = g(i, j) * a(i, j);
            if (same) db(i, j) = v;
            else if (col) db[i] += v;
            else db[j] += v;
          }
        }
        send(1, db);
      }
      return;
    }
    case Op::kScale: {
      Tensor da = g;
      for (auto& v : da.values()) v *= r.scalar;
      send(0, da);
      return;
    }
    case Op::kAddScalar:
      send(0, g);
      return;
    case Op::kTanh: {
      Tensor da = g;
      auto yv = y.values();
      auto dv = da.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= 1.0 - yv[i] * yv[i];
      send(0, da);
      return;
    }
    case Op::kRelu: {
      Tensor da = g;
      auto xv = in(0).values();
      auto dv = da.values();
      for (std::size_t i = 0; i < dv.size(); ++i)
        if (!(xv[i] > 0.0)) dv[i] = 0.0;
      send(0, da);
      return;
    }
    case Op::kExp: {
      Tensor da = g;
      auto yv = y.values();
      auto dv = da.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= yv[i];
      send(0, da);
      return;
    }
    case Op::kLog: {
      Tensor da = g;
      auto xv = in(0).values();
      auto dv = da.values();
      for (std::size_t i = 0; i < dv.size(); ++i) dv[i] /= xv[i];
      send(0, da);
      return;
    }
    case Op::kSoftmax: {
      Tensor da(y.rows(), y.cols());
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) da(i, j) = y(i, j) * (g(i, j) - dot);
      }
      send(0, da);
      return;
    }
    case Op::kLogSoftmax: {
      const auto& mask = in(1);
      const bool shared = mask.rows() == 1;
      Tensor da(y.rows(), y.cols());
      for (std::size_t i = 0; i < y.rows(); ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j)
          if (mask(shared ? 0 : i, j) != 0.0) gsum += g(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) {
          if (mask(shared ? 0 : i, j) == 0.0) continue;
          da(i, j) = g(i, j) - std::exp(y(i, j)) * gsum;
        }
      }
      send(0, da);
      return;
    }
    case Op::kRowNorm: {
      const auto& a = in(0);
      Tensor da(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i) {
        if (y[i] == 0.0) continue;  // subgradient 0 at the origin
        const double s = g[i] / y[i];
        for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = s * a(i, j);
      }
      send(0, da);
      return;
    }
    case Op::kRowSum: {
      const auto& a = in(0);
      Tensor da(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = g[i];
      send(0, da);
      return;
    }
    case Op::kSum:
    case Op::kMean: {
      const auto& a = in(0);
      double s = g.item();
      if (r.op == Op::kMean) s /= static_cast<double>(a.size());
      send(0, Tensor(a.rows(), a.cols(), s));
      return;
    }
    case Op::kConcatCols: {
      const auto& a = in(0);
      const auto& b = in(1);
      if (wants(0)) {
        Tensor da(a.rows(), a.cols());
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = 0; j < a.cols(); ++j) da(i, j) = g(i, j);
        send(0, da);
      }
      if (wants(1)) {
        Tensor db(b.rows(), b.cols());
        for (std::size_t i = 0; i < b.rows(); ++i)
          for (std::size_t j = 0; j < b.cols(); ++j) db(i, j) = g(i, a.cols() + j);
        send(1, db);
      }
      return;
    }
    case Op::kSliceCols: {
      const auto& a = in(0);
      Tensor da(a.rows(), a.cols());
      for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < r.count; ++j) da(i, r.begin + j) = g(i, j);
      send(0, da);
      return;
    }
  }
}

Gradients Graph::gradients(Node loss, const ParameterSet& wrt) {
  check(loss);
  if (!evaluated_) throw DiffError("gradients() called before evaluate()");
  const auto& lv = val(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw ShapeError(describe(loss.id) + ": loss must be scalar, got " + lv.shape_string());
  }
  Gradients out = wrt.zeros_like();
  if (!nodes_[loss.id].requires_grad) return out;

  std::vector<Tensor> grads(loss.id + 1);
  grads[loss.id] = Tensor(1, 1, 1.0);
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (!nodes_[id].requires_grad || grads[id].rows() == 0) continue;
    backprop(id, grads);
  }
  for (std::size_t id = 0; id <= loss.id; ++id) {
    const auto& r = nodes_[id];
    if (r.op != Op::kParam || r.set != &wrt || !r.trainable || grads[id].rows() == 0) continue;
    accumulate(out.get(r.name), grads[id]);
  }
  for (const auto& [name, g] : out) {
    if (!g.all_finite()) throw NumericError("gradient of '" + name + "' is not finite");
  }
  return out;
}

}  // namespace modec::diffcore
