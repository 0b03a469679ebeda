#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedsim/error.hpp"

namespace fedsim {

/// Dense n-dimensional array of doubles, row-major. The carrier for images,
/// activations, parameters and gradients. Treated as immutable once a public
/// operation has returned it.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (element_count(shape) != data.size())
      throw ValidationError("Tensor: shape/data size mismatch");
  }

  static std::size_t element_count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
  }

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<std::size_t> s, double v) {
    std::size_t n = element_count(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  std::size_t size() const { return data.size(); }

  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline std::string shape_string(const std::vector<std::size_t>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

}  // namespace fedsim
