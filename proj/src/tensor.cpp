#include "maskft/tensor.hpp"

#include <cmath>
#include <cstring>

#include "maskft/simd/kernels.hpp"

namespace maskft {

std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("shape " + shape_str(shape_) + " needs " +
                     std::to_string(shape_numel(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{1}, std::vector<double>{value}); }

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

double& Tensor::at(std::size_t row, std::size_t col) {
  return data_[row * shape_.at(1) + col];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return data_[row * shape_.at(1) + col];
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape_));
  }
  return data_[0];
}

std::span<const double> Tensor::grad() const {
  if (!grad_) return {};
  return *grad_;
}

std::span<double> Tensor::mutable_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
  return *grad_;
}

void Tensor::accumulate_grad(std::span<const double> g) {
  if (g.size() != data_.size()) {
    throw ShapeError("gradient length " + std::to_string(g.size()) + " does not match tensor " +
                     shape_str(shape_));
  }
  if (!grad_) {
    grad_.emplace(g.begin(), g.end());
    return;
  }
  simd::active().accumulate(g.size(), g.data(), grad_->data());
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

}  // namespace maskft
