#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diffcap/error.hpp"

namespace diffcap {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense row-major tensor over a flat Eigen buffer. Values are treated as
/// frozen once an op has produced them; in-place mutation is reserved for
/// parameter storage and gradient accumulators.
template <typename S>
struct Tensor {
  Shape shape;
  Eigen::Array<S, Eigen::Dynamic, 1> data;

  Tensor() = default;
  explicit Tensor(Shape sh) : shape(std::move(sh)), data(shape_numel(shape)) {}

  static Tensor zeros(Shape sh) {
    Tensor t(std::move(sh));
    t.data.setZero();
    return t;
  }

  static Tensor full(Shape sh, S v) {
    Tensor t(std::move(sh));
    t.data.setConstant(v);
    return t;
  }

  static Tensor scalar(S v) { return full(Shape{}, v); }

  static Tensor from_rows(int rows, int cols, const std::vector<S>& vals) {
    if ((std::int64_t)vals.size() != (std::int64_t)rows * cols)
      throw UsageError("from_rows: " + std::to_string(vals.size()) + " values for " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    Tensor t(Shape{rows, cols});
    for (std::size_t i = 0; i < vals.size(); ++i) t.data[(Eigen::Index)i] = vals[i];
    return t;
  }

  std::int64_t numel() const { return data.size(); }
  int rank() const { return (int)shape.size(); }

  // Rank-2 view: the last extent is the column count, everything before it
  // collapses into rows. Rank-0 and rank-1 tensors view as a single row.
  int cols() const { return shape.empty() ? 1 : shape.back(); }
  int rows() const {
    std::int64_t r = 1;
    for (std::size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
    return (int)r;
  }

  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MatMap = Eigen::Map<Mat>;
  using ConstMatMap = Eigen::Map<const Mat>;

  MatMap mat() { return MatMap(data.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(data.data(), rows(), cols()); }

  S& operator()(int r, int c) { return data[(std::int64_t)r * cols() + c]; }
  S operator()(int r, int c) const { return data[(std::int64_t)r * cols() + c]; }
};

template <typename S>
inline void check_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.shape != b.shape)
    throw UsageError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                     shape_str(b.shape));
}

/// Exact value-preserving copy into the 64-bit representation, used when
/// verifying single-precision results against high-precision oracles.
inline Tensor<double> widen(const Tensor<float>& t) {
  Tensor<double> out(t.shape);
  out.data = t.data.cast<double>();
  return out;
}

}  // namespace diffcap
