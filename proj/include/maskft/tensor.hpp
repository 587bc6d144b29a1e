#pragma once

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskft {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array of doubles with an optional gradient slot.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::initializer_list<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t row, std::size_t col);
  double at(std::size_t row, std::size_t col) const;
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on) {
    requires_grad_ = on;
    return *this;
  }

  bool has_grad() const { return grad_.has_value(); }
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad() { grad_.reset(); }
  // Adds g to the grad slot, creating it zero-filled on first use.
  void accumulate_grad(std::span<const double> g);

  bool all_finite() const;
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

}  // namespace maskft
