#pragma once

#include <map>
#include <random>
#include <string>

#include "modec/diffcore/tensor.hpp"

namespace modec::diffcore {

/// Named leaf tensors of one network. Iteration order is the sorted name
/// order, which keeps serialization and optimizer traversal deterministic.
class ParameterSet {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);

  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const;

  Map::const_iterator begin() const { return tensors_.begin(); }
  Map::const_iterator end() const { return tensors_.end(); }
  Map::iterator begin() { return tensors_.begin(); }
  Map::iterator end() { return tensors_.end(); }

  /// Same names and shapes as `other`.
  bool compatible(const ParameterSet& other) const;

  /// Bitwise equality of every tensor.
  bool identical(const ParameterSet& other) const;

  /// Zero-filled set with the same names and shapes.
  ParameterSet zeros_like() const;

 private:
  Map tensors_;
};

/// Gradients are keyed like the parameter set they belong to.
using Gradients = ParameterSet;

/// Dense layer weights (fan_in x fan_out) with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
Tensor init_bias(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// One dense layer `prefix.w`, `prefix.b` added to `params`.
void add_dense(ParameterSet& params, const std::string& prefix, std::size_t fan_in,
               std::size_t fan_out, std::mt19937_64& rng);

}  // namespace modec::diffcore
