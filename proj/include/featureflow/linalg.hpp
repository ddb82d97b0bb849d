#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace featureflow {

/// Dense row-major matrix. Rows are contiguous.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw std::invalid_argument("matrix storage does not match shape");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  const std::vector<T>& storage() const { return data_; }
  std::vector<T>& storage() { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;
using VectorF = std::vector<float>;
using VectorD = std::vector<double>;

template <class U, class T>
Matrix<U> cast(const Matrix<T>& m) {
  Matrix<U> out(m.rows(), m.cols());
  std::transform(m.data(), m.data() + m.size(), out.data(), [](T v) { return static_cast<U>(v); });
  return out;
}

template <class U, class T>
std::vector<U> cast(const std::vector<T>& v) {
  return std::vector<U>(v.begin(), v.end());
}

template <class T>
Matrix<T> transpose(const Matrix<T>& m) {
  Matrix<T> out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(c, r) = m(r, c);
  }
  return out;
}

/// Dot product with 64-bit accumulation regardless of input precision.
template <class A, class B>
double dot(const A& a, const B& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

template <class A>
double norm2(const A& a) {
  return std::sqrt(dot(a, a));
}

/// y = M x for row-major M (rows x cols), accumulated in double.
template <class T, class X>
VectorD matvec(const Matrix<T>& m, const X& x) {
  VectorD y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = dot(m.row(r), x);
  return y;
}

/// y = M^T x for row-major M.
template <class T, class X>
VectorD matvec_t(const Matrix<T>& m, const X& x) {
  VectorD y(m.cols(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const double xr = static_cast<double>(x[r]);
    if (xr == 0.0) continue;
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) y[c] += static_cast<double>(row[c]) * xr;
  }
  return y;
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

// Portable sampling helpers on top of mt19937_64: the standard distributions
// are implementation-defined, these are not.
using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Fisher-Yates with the portable index helper.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

inline VectorD random_unit(std::size_t d, Rng& rng) {
  VectorD v(d);
  double n = 0.0;
  do {
    for (auto& x : v) x = normal(rng);
    n = norm2(std::span<const double>(v));
  } while (n < 1e-12);
  for (auto& x : v) x /= n;
  return v;
}

/// Orthonormal rows via modified Gram-Schmidt on Gaussian vectors. count <= d.
inline MatrixD random_orthonormal(std::size_t count, std::size_t d, Rng& rng) {
  if (count > d) throw std::invalid_argument("cannot draw more than d orthonormal directions");
  MatrixD q(count, d);
  for (std::size_t i = 0; i < count; ++i) {
    for (;;) {
      auto v = random_unit(d, rng);
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t j = 0; j < i; ++j) {
          const double p = dot(std::span<const double>(v), q.row(j));
          for (std::size_t c = 0; c < d; ++c) v[c] -= p * q(j, c);
        }
      }
      const double n = norm2(std::span<const double>(v));
      if (n < 1e-6) continue;
      for (std::size_t c = 0; c < d; ++c) q(i, c) = v[c] / n;
      break;
    }
  }
  return q;
}

}  // namespace featureflow
