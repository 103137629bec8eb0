#include "modec/diffcore/params.hpp"

#include <cmath>

namespace modec::diffcore {

void ParameterSet::add(const std::string& name, Tensor value) {
  if (!value.all_finite()) throw NumericError("parameter '" + name + "' is not finite");
  auto [it, inserted] = tensors_.emplace(name, std::move(value));
  if (!inserted) throw DiffError("duplicate parameter '" + name + "'");
}

const Tensor& ParameterSet::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DiffError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParameterSet::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw DiffError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

bool ParameterSet::compatible(const ParameterSet& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  auto a = tensors_.begin();
  auto b = other.tensors_.begin();
  for (; a != tensors_.end(); ++a, ++b) {
    if (a->first != b->first || !a->second.same_shape(b->second)) return false;
  }
  return true;
}

bool ParameterSet::identical(const ParameterSet& other) const {
  if (!compatible(other)) return false;
  auto b = other.tensors_.begin();
  for (auto a = tensors_.begin(); a != tensors_.end(); ++a, ++b) {
    if (!a->second.identical(b->second)) return false;
  }
  return true;
}

ParameterSet ParameterSet::zeros_like() const {
  ParameterSet out;
  for (const auto& [name, t] : tensors_) out.tensors_.emplace(name, Tensor::zeros_like(t));
  return out;
}

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor w(fan_in, fan_out);
  for (auto& v : w.values()) v = dist(rng);
  return w;
}

Tensor init_bias(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor b(1, fan_out);
  for (auto& v : b.values()) v = dist(rng);
  return b;
}

void add_dense(ParameterSet& params, const std::string& prefix, std::size_t fan_in,
               std::size_t fan_out, std::mt19937_64& rng) {
  params.add(prefix + ".w", init_weight(fan_in, fan_out, rng));
  params.add(prefix + ".b", init_bias(fan_in, fan_out, rng));
}

}  // namespace modec::diffcore
