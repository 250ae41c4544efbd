#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "qtrain/error.hpp"

namespace qtrain {

struct Shape {
  std::int64_t rows = 1;
  std::int64_t cols = 1;

  std::int64_t size() const { return rows * cols; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return "[" + std::to_string(s.rows) + "," + std::to_string(s.cols) + "]";
}

/// Dense row-major 2-D tensor. Every value in a training graph is a matrix;
/// vectors and scalars use a unit dimension.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{})
      : shape_(shape), data_(static_cast<std::size_t>(shape.size()), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.size()) {
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  std::int64_t rows() const { return shape_.rows; }
  std::int64_t cols() const { return shape_.cols; }
  std::size_t size() const { return data_.size(); }

  T& operator()(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * shape_.cols + c)];
  }
  const T& operator()(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * shape_.cols + c)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Element access with broadcasting along unit dimensions.
  const T& broadcast_at(std::int64_t r, std::int64_t c) const {
    return (*this)(shape_.rows == 1 ? 0 : r, shape_.cols == 1 ? 0 : c);
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  auto begin() { return data_.begin(); }
  auto end() { return data_.end(); }
  auto begin() const { return data_.begin(); }
  auto end() const { return data_.end(); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_{0, 0};
  std::vector<T> data_;
};

using FloatTensor = Tensor<double>;
using IntTensor = Tensor<std::int64_t>;

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

template <typename T>
Tensor<T> transpose(const Tensor<T>& t) {
  Tensor<T> out(Shape{t.cols(), t.rows()});
  for (std::int64_t r = 0; r < t.rows(); ++r) {
    for (std::int64_t c = 0; c < t.cols(); ++c) out(c, r) = t(r, c);
  }
  return out;
}

}  // namespace qtrain
