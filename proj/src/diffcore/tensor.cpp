#include "modec/diffcore/tensor.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>

namespace modec::diffcore {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (!std::isfinite(fill)) throw NumericError("tensor fill value is not finite");
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + shape_string());
  }
  if (!all_finite()) throw NumericError("tensor data contains non-finite values");
}

Tensor Tensor::scalar(double value) { return Tensor(1, 1, std::vector<double>{value}); }

Tensor Tensor::row(std::vector<double> values) {
  const auto n = values.size();
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return row(std::vector<double>(values));
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.rows_, other.cols_); }

double Tensor::item() const {
  if (rows_ != 1 || cols_ != 1) throw ShapeError("item() on non-scalar tensor " + shape_string());
  return data_[0];
}

Tensor Tensor::row_at(std::size_t r) const {
  if (r >= rows_) throw ShapeError("row index out of range");
  Tensor out(1, cols_);
  std::memcpy(out.data_.data(), data_.data() + r * cols_, cols_ * sizeof(double));
  return out;
}

bool Tensor::all_finite() const {
  return Eigen::Map<const Eigen::VectorXd>(data_.data(), static_cast<Eigen::Index>(data_.size()))
      .allFinite();
}

bool Tensor::identical(const Tensor& other) const {
  if (!same_shape(other)) return false;
  return data_.empty() ||
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0;
}

std::string Tensor::shape_string() const {
  return "[" + std::to_string(rows_) + "x" + std::to_string(cols_) + "]";
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) return Tensor();
  const auto cols = rows.front().cols();
  Tensor out(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].rows() != 1 || rows[r].cols() != cols) {
      throw ShapeError("stack_rows: row " + std::to_string(r) + " has shape " +
                       rows[r].shape_string());
    }
    for (std::size_t c = 0; c < cols; ++c) out(r, c) = rows[r][c];
  }
  return out;
}

}  // namespace modec::diffcore
