#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "modec/diffcore/params.hpp"
#include "modec/diffcore/tensor.hpp"

namespace modec::diffcore {

/// Handle to a node of one Graph.
struct Node {
  std::size_t id = 0;
};

enum class Op {
  kInput,
  kConstant,
  kParam,
  kMatMul,
  kAdd,        // same shape, or rhs 1 x n broadcast over rows
  kSub,        // same shape
  kMul,        // same shape, or rhs broadcast (m x 1 over cols, 1 x n over rows)
  kScale,      // x * c
  kAddScalar,  // x + c
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSoftmax,    // over the last axis, optionally restricted by a 0/1 mask input
  kLogSoftmax, // masked log-softmax; inactive entries are 0
  kRowNorm,    // L2 norm of each row -> m x 1
  kRowSum,     // m x n -> m x 1
  kSum,        // -> 1 x 1
  kMean,       // -> 1 x 1
  kConcatCols,
  kSliceCols,
};

const char* op_name(Op op);

/// Recorded reverse-mode computation.
///
/// Nodes are appended in topological order by the builder methods; nothing is
/// computed until evaluate(). Parameter leaves reference tensors held in a
/// ParameterSet, which must outlive the graph. A parameter registered as
/// non-trainable is a constant for differentiation purposes.
class Graph {
 public:
  Node input(const std::string& name, std::size_t rows, std::size_t cols);
  Node constant(Tensor value);
  Node param(const ParameterSet& set, const std::string& name, bool trainable = true);

  Node matmul(Node a, Node b);
  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  Node mul(Node a, Node b);
  Node scale(Node a, double c);
  Node add_scalar(Node a, double c);
  Node tanh(Node a);
  Node relu(Node a);
  Node exp(Node a);
  Node log(Node a);
  Node softmax(Node a);
  /// Softmax over entries whose mask is 1; masked entries are exactly 0 and a
  /// row with no active entries is all zeros. A 1 x n mask applies to every row.
  Node masked_softmax(Node a, Node mask);
  /// log of masked_softmax on active entries, computed stably; inactive
  /// entries (and rows with no active entry) are exactly 0.
  Node masked_log_softmax(Node a, Node mask);
  Node row_norm(Node a);
  Node row_sum(Node a);
  Node sum(Node a);
  Node mean(Node a);
  Node concat_cols(Node a, Node b);
  Node slice_cols(Node a, std::size_t begin, std::size_t count);

  /// x * W + b for parameters `prefix.w`, `prefix.b`.
  Node dense(Node x, const ParameterSet& set, const std::string& prefix, bool trainable = true);

  void label(Node n, std::string text);
  void mark_output(const std::string& name, Node n);

  /// Runs the forward pass with the given input bindings; returns marked outputs.
  std::map<std::string, Tensor> evaluate(const std::map<std::string, Tensor>& inputs = {});

  bool evaluated() const { return evaluated_; }
  const Tensor& value(Node n) const;
  std::size_t node_count() const { return nodes_.size(); }

  /// d loss / d parameter for every tensor in `wrt`. Parameters of `wrt` that
  /// are unused, or registered non-trainable, receive zeros.
  Gradients gradients(Node loss, const ParameterSet& wrt);

 private:
  struct Record {
    Op op = Op::kConstant;
    std::vector<std::size_t> inputs{};
    double scalar = 0.0;
    std::size_t begin = 0;
    std::size_t count = 0;
    std::size_t rows = 0;  // declared input shape
    std::size_t cols = 0;
    std::string name{};    // input or parameter name
    std::string text{};    // user label
    const ParameterSet* set = nullptr;
    const Tensor* ref = nullptr;
    bool trainable = false;
    bool requires_grad = false;
    Tensor value{};
  };

  Node push(Record rec);
  std::string describe(std::size_t id) const;
  const Tensor& val(std::size_t id) const;
  void compute(std::size_t id, const std::map<std::string, Tensor>& inputs);
  void backprop(std::size_t id, std::vector<Tensor>& grads) const;
  void check(Node n) const;

  std::vector<Record> nodes_;
  std::vector<std::pair<std::string, std::size_t>> outputs_;
  bool evaluated_ = false;
};

}  // namespace modec::diffcore
