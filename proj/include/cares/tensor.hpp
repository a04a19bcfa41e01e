#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <vector>

#include "cares/common.hpp"

namespace cares::ad {

// Dense row-major matrix. Vectors are 1xN or Nx1, scalars 1x1.
template <typename Real>
struct Tensor {
  long rows = 0;
  long cols = 0;
  std::vector<Real> data;

  Tensor() = default;
  Tensor(long r, long c, Real fill = Real(0))
      : rows(r), cols(c), data(static_cast<size_t>(r * c), fill) {
    CARES_CHECK(r >= 0 && c >= 0);
  }

  static Tensor scalar(Real v) {
    Tensor t(1, 1);
    t.data[0] = v;
    return t;
  }

  static Tensor row(std::initializer_list<Real> vals) {
    Tensor t(1, static_cast<long>(vals.size()));
    std::copy(vals.begin(), vals.end(), t.data.begin());
    return t;
  }

  static Tensor column(std::initializer_list<Real> vals) {
    Tensor t(static_cast<long>(vals.size()), 1);
    std::copy(vals.begin(), vals.end(), t.data.begin());
    return t;
  }

  long size() const { return rows * cols; }

  Real& at(long r, long c) { return data[static_cast<size_t>(r * cols + c)]; }
  Real at(long r, long c) const {
    return data[static_cast<size_t>(r * cols + c)];
  }

  Real* row_ptr(long r) { return data.data() + r * cols; }
  const Real* row_ptr(long r) const { return data.data() + r * cols; }

  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  void fill_uniform(Rng& rng, Real bound) {
    for (auto& x : data) x = static_cast<Real>(rng.next_uniform(bound));
  }

  void fill_normal(Rng& rng) {
    for (auto& x : data) x = static_cast<Real>(rng.next_normal());
  }

  bool all_finite() const {
    for (Real x : data)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out(rows, cols);
    for (long i = 0; i < size(); ++i)
      out.data[static_cast<size_t>(i)] =
          static_cast<Other>(data[static_cast<size_t>(i)]);
    return out;
  }
};

template <typename Real>
inline std::string shape_str(const Tensor<Real>& t) {
  return "[" + std::to_string(t.rows) + "x" + std::to_string(t.cols) + "]";
}

template <typename Real>
inline std::ostream& operator<<(std::ostream& os, const Tensor<Real>& t) {
  os << shape_str(t) << " {";
  for (long r = 0; r < t.rows; ++r) {
    os << (r ? "; " : "");
    for (long c = 0; c < t.cols; ++c) os << (c ? " " : "") << t.at(r, c);
  }
  return os << "}";
}

}  // namespace cares::ad
