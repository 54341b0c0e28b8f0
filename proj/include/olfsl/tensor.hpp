#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "olfsl/errors.hpp"

namespace olfsl {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
class Tape;

// Dense row-major tensor. A tensor is either detached (plain value) or
// attached to a tape node, in which case gradients flow to it during
// backward. Detached tensors are immutable by convention and safe to share
// across threads.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  Tape<T>* tape = nullptr;
  int node = -1;

  Tensor() = default;

  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    for (int dim : shape) {
      if (dim <= 0) throw LogicError("Tensor: extents must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw LogicError("Tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    }
  }

  static Tensor zeros(Shape s) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }

  static Tensor full(Shape s, T v) {
    const auto n = numel(s);
    return Tensor(std::move(s), std::vector<T>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  bool attached() const { return tape != nullptr; }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

  int rank() const { return static_cast<int>(shape.size()); }

  T item() const {
    if (size() != 1) throw LogicError("Tensor::item: tensor has " + std::to_string(size()) + " elements");
    return data[0];
  }

  // Detached copy of the same values.
  Tensor detached() const { return Tensor(shape, data); }

  T& at(int i) { return data[static_cast<std::size_t>(i)]; }
  T at(int i) const { return data[static_cast<std::size_t>(i)]; }

  T& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  T at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

  T& at(int i, int j, int k) {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T at(int i, int j, int k) const {
    return data[(static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k];
  }

  T& at(int i, int j, int k, int l) {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  T at(int i, int j, int k, int l) const {
    return data[((static_cast<std::size_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

template <typename T>
using NamedTensors = std::map<std::string, Tensor<T>>;

template <typename T>
void debug_check_finite(const Tensor<T>& t, const char* what) {
#ifndef NDEBUG
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
#else
  (void)t;
  (void)what;
#endif
}

}  // namespace olfsl
