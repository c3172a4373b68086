#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "saner/errors.hpp"

namespace saner {

// Dense row-major f64 tensor of rank 0, 1 or 2. Rank 0 is a scalar with a
// single value. All model arithmetic runs on these.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != count(shape)) throw ShapeError("tensor: data does not match shape");
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  static Tensor scalar(double x) { return Tensor({}, {x}); }
  static Tensor zeros(std::vector<std::size_t> s) {
    std::vector<double> data(count(s), 0.0);
    return Tensor(std::move(s), std::move(data));
  }
  static Tensor full(std::vector<std::size_t> s, double x) {
    std::vector<double> data(count(s), x);
    return Tensor(std::move(s), std::move(data));
  }
  // 2-D literal helper, mostly for tests.
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    Tensor t = zeros({r, c});
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("tensor: ragged matrix literal");
      for (double x : row) t.v[i++] = x;
    }
    return t;
  }
  static Tensor vec(std::vector<double> data) {
    std::size_t n = data.size();
    return Tensor({n}, std::move(data));
  }

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return v.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? shape[0] : 1); }
  std::size_t cols() const { return rank() == 2 ? shape[1] : 1; }

  double& at(std::size_t i) { return v[i]; }
  double at(std::size_t i) const { return v[i]; }
  double& at(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

}  // namespace saner
