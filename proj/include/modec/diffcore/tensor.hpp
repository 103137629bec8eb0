#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace modec::diffcore {

/// Base for every error raised by the differentiation core.
class DiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public DiffError {
 public:
  using DiffError::DiffError;
};

class NumericError : public DiffError {
 public:
  using DiffError::DiffError;
};

/// Dense row-major matrix of doubles. Vectors are 1 x n rows, scalars 1 x 1.
///
/// Construction from user data rejects NaN/Inf. Element writes through
/// operator() are unchecked; graph evaluation re-validates every node output.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor row(std::vector<double> values);
  static Tensor row(std::initializer_list<double> values);
  static Tensor zeros_like(const Tensor& other);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  std::vector<std::size_t> shape() const { return {rows_, cols_}; }
  bool same_shape(const Tensor& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a 1 x 1 tensor.
  double item() const;

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& storage() const { return data_; }

  /// Copy of row r as a 1 x cols tensor.
  Tensor row_at(std::size_t r) const;

  bool all_finite() const;

  /// Bitwise equality, including shape.
  bool identical(const Tensor& other) const;

  std::string shape_string() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Stack 1 x n rows into an m x n tensor.
Tensor stack_rows(std::span<const Tensor> rows);

}  // namespace modec::diffcore
