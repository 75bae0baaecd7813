#pragma once

#include "convrec/check.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace convrec {

using Index = Eigen::Index;

template <class S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S>
using MatMap = Eigen::Map<MatrixRM<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const MatrixRM<S>>;
template <class S>
using VecMap = Eigen::Map<ColVector<S>>;
template <class S>
using ConstVecMap = Eigen::Map<const ColVector<S>>;

inline Index numel(std::span<const Index> shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(std::span<const Index> shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor; rank 1 or 2 covers everything in this codebase.
/// `node` is the handle of the tape node that produced it (-1 = constant).
template <class S>
struct Tensor {
  std::vector<Index> shape;
  std::vector<S> data;
  bool requires_grad = false;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<Index> shp, std::vector<S> values)
      : shape(std::move(shp)), data(std::move(values)) {
    if (numel({shape.data(), shape.size()}) != static_cast<Index>(data.size()))
      throw std::invalid_argument("tensor: shape " + shape_str({shape.data(), shape.size()}) +
                                  " does not match data size " + std::to_string(data.size()));
  }

  static Tensor zeros(std::vector<Index> shp) {
    Index n = numel({shp.data(), shp.size()});
    return Tensor(std::move(shp), std::vector<S>(static_cast<size_t>(n), S(0)));
  }
  static Tensor full(std::vector<Index> shp, S value) {
    Index n = numel({shp.data(), shp.size()});
    return Tensor(std::move(shp), std::vector<S>(static_cast<size_t>(n), value));
  }
  static Tensor scalar(S value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<S> values) {
    Index n = static_cast<Index>(values.size());
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(Index rows, Index cols, std::vector<S> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  int rank() const { return static_cast<int>(shape.size()); }
  Index size() const { return static_cast<Index>(data.size()); }
  Index rows() const { return rank() == 2 ? shape[0] : 1; }
  Index cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

  S& at(Index r, Index c) { return data[static_cast<size_t>(r * cols() + c)]; }
  S at(Index r, Index c) const { return data[static_cast<size_t>(r * cols() + c)]; }
  S& operator[](Index i) { return data[static_cast<size_t>(i)]; }
  S operator[](Index i) const { return data[static_cast<size_t>(i)]; }

  // rank-1 tensors map as a single row so row-wise ops work uniformly
  MatMap<S> mat() { return MatMap<S>(data.data(), rows(), cols()); }
  ConstMatMap<S> mat() const { return ConstMatMap<S>(data.data(), rows(), cols()); }
  VecMap<S> vec() { return VecMap<S>(data.data(), size()); }
  ConstVecMap<S> vec() const { return ConstVecMap<S>(data.data(), size()); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool is_scalar() const { return size() == 1; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace convrec
