#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <numeric>
#include <ranges>
#include <span>
#include <string>
#include <vector>

#include "qr/error.hpp"

namespace qr {

using Vector = std::vector<double>;

template <class R>
concept RealRange = std::ranges::random_access_range<R> &&
                    std::floating_point<std::ranges::range_value_t<R>>;

// Inner product accumulated in double regardless of the element type.
template <RealRange A, RealRange B>
double dot(const A& a, const B& b) {
  assert(std::ranges::size(a) == std::ranges::size(b));
  double sum = 0.0;
  const auto n = std::ranges::size(a);
  for (std::size_t i = 0; i < n; ++i) {
    sum += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return sum;
}

template <RealRange A>
double squared_norm(const A& a) {
  return dot(a, a);
}

template <RealRange A>
double norm(const A& a) {
  return std::sqrt(squared_norm(a));
}

template <RealRange A>
bool all_finite(const A& a) {
  return std::ranges::all_of(a, [](auto x) { return std::isfinite(x); });
}

template <RealRange A>
Vector to_vector(const A& a) {
  return Vector(std::ranges::begin(a), std::ranges::end(a));
}

// y += alpha * x
template <RealRange X>
void axpy(double alpha, const X& x, Vector& y) {
  assert(std::ranges::size(x) == y.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * static_cast<double>(x[i]);
}

inline Vector scaled(std::span<const double> v, double s) {
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * s;
  return out;
}

// Unit-L2 copy of v. Throws DataError for zero or non-finite input.
template <RealRange A>
Vector l2_normalize(const A& v) {
  if (!all_finite(v)) throw DataError("l2_normalize: non-finite component");
  const double n = norm(v);
  if (!(n > 0.0)) throw DataError("l2_normalize: zero vector");
  Vector out(std::ranges::size(v));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(v[i]) / n;
  return out;
}

// Dense row-major matrix. Corpora are stored as Matrix<float> (the on-disk
// element type); parameters and gradients use double.
template <std::floating_point T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return rows_ == 0; }

  std::span<T> row(std::size_t r) {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }
  std::span<const T> row(std::size_t r) const {
    assert(r < rows_);
    return {data_.data() + r * cols_, cols_};
  }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  template <RealRange R>
  void append_row(const R& values) {
    if (rows_ == 0 && data_.empty() && cols_ == 0) cols_ = std::ranges::size(values);
    if (std::ranges::size(values) != cols_) throw DataError("Matrix::append_row: width mismatch");
    for (auto v : values) data_.push_back(static_cast<T>(v));
    ++rows_;
  }

  // Fixes the width of an empty matrix.
  void set_cols(std::size_t cols) {
    assert(rows_ == 0);
    cols_ = cols;
  }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using FloatMatrix = Matrix<float>;

// One entry of a ranking: index into the ranked collection plus its score.
struct Ranked {
  std::size_t index = 0;
  double score = 0.0;
};

// Descending score; ties resolved by ascending index. This is the total
// order used by every ranking and search in the engine.
inline bool ranks_before(const Ranked& a, const Ranked& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.index < b.index;
}

inline std::vector<Ranked> rank_scores(std::span<const double> scores) {
  std::vector<Ranked> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {i, scores[i]};
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

}  // namespace qr
