#pragma once

#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "debias/error.hpp"

namespace debias {

using Index = Eigen::Index;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

enum class ElementKind { DenseMatrix, MomentPair };

inline std::string kind_name(ElementKind kind) {
  return kind == ElementKind::DenseMatrix ? "DenseMatrix" : "MomentPair";
}

/// A point of the carrier space: a square d x d matrix, or a (d x d matrix, d-vector) pair.
///
/// Elements of different kinds or dimensions never combine; every binary operation
/// checks this and throws DimensionMismatch.
template <typename Scalar>
class Element {
 public:
  using MatrixType = Mat<Scalar>;
  using VectorType = Vec<Scalar>;

  Element() = default;

  static Element dense(MatrixType m) {
    require(m.rows() == m.cols() && m.rows() > 0, Errc::DimensionMismatch,
            "dense element must be a nonempty square matrix");
    Element e;
    e.kind_ = ElementKind::DenseMatrix;
    e.matrix_ = std::move(m);
    return e;
  }

  static Element pair(MatrixType a, VectorType b) {
    require(a.rows() == a.cols() && a.rows() > 0 && b.size() == a.rows(),
            Errc::DimensionMismatch, "moment pair needs a d x d matrix and a d-vector");
    Element e;
    e.kind_ = ElementKind::MomentPair;
    e.matrix_ = std::move(a);
    e.vector_ = std::move(b);
    return e;
  }

  static Element scalar(Scalar value) { return dense(MatrixType::Constant(1, 1, value)); }

  static Element zero(ElementKind kind, Index dim) {
    if (kind == ElementKind::DenseMatrix) return dense(MatrixType::Zero(dim, dim));
    return pair(MatrixType::Zero(dim, dim), VectorType::Zero(dim));
  }

  ElementKind kind() const { return kind_; }
  Index dim() const { return matrix_.rows(); }
  bool empty() const { return matrix_.size() == 0; }

  const MatrixType& matrix() const { return matrix_; }
  MatrixType& matrix() { return matrix_; }
  const VectorType& vector() const { return vector_; }
  VectorType& vector() { return vector_; }

  /// Value of a 1 x 1 dense element.
  Scalar as_scalar() const {
    require(kind_ == ElementKind::DenseMatrix && dim() == 1, Errc::DimensionMismatch,
            "as_scalar on a non-scalar element");
    return matrix_(0, 0);
  }

  bool compatible(const Element& other) const {
    return kind_ == other.kind_ && dim() == other.dim();
  }

  void check_compatible(const Element& other) const {
    require(compatible(other), Errc::DimensionMismatch,
            "cannot combine " + kind_name(kind_) + "(" + std::to_string(dim()) + ") with " +
                kind_name(other.kind_) + "(" + std::to_string(other.dim()) + ")");
  }

  Element& operator+=(const Element& o) {
    check_compatible(o);
    matrix_ += o.matrix_;
    if (kind_ == ElementKind::MomentPair) vector_ += o.vector_;
    return *this;
  }

  Element& operator-=(const Element& o) {
    check_compatible(o);
    matrix_ -= o.matrix_;
    if (kind_ == ElementKind::MomentPair) vector_ -= o.vector_;
    return *this;
  }

  Element& operator*=(Scalar alpha) {
    matrix_ *= alpha;
    if (kind_ == ElementKind::MomentPair) vector_ *= alpha;
    return *this;
  }

  /// this += alpha * o, without a temporary.
  Element& add_scaled(Scalar alpha, const Element& o) {
    check_compatible(o);
    matrix_.noalias() += alpha * o.matrix_;
    if (kind_ == ElementKind::MomentPair) vector_.noalias() += alpha * o.vector_;
    return *this;
  }

  friend Element operator+(Element a, const Element& b) { return a += b; }
  friend Element operator-(Element a, const Element& b) { return a -= b; }
  friend Element operator*(Element a, Scalar alpha) { return a *= alpha; }
  friend Element operator*(Scalar alpha, Element a) { return a *= alpha; }

  /// Frobenius norm over the whole payload.
  Scalar norm() const {
    using std::sqrt;
    Scalar sq = matrix_.squaredNorm();
    if (kind_ == ElementKind::MomentPair) sq += vector_.squaredNorm();
    return sqrt(sq);
  }

  /// Row-major flat payload: matrix entries, then vector entries for a pair.
  std::vector<Scalar> flatten() const {
    std::vector<Scalar> out;
    const Index d = dim();
    out.reserve(static_cast<std::size_t>(d * d + vector_.size()));
    for (Index i = 0; i < d; ++i)
      for (Index j = 0; j < d; ++j) out.push_back(matrix_(i, j));
    for (Index i = 0; i < vector_.size(); ++i) out.push_back(vector_(i));
    return out;
  }

  static Element unflatten(ElementKind kind, Index dim, std::span<const Scalar> flat) {
    const auto expected = static_cast<std::size_t>(
        dim * dim + (kind == ElementKind::MomentPair ? dim : 0));
    require(dim > 0 && flat.size() == expected, Errc::DimensionMismatch,
            "flat payload length does not match kind/dim header");
    MatrixType m(dim, dim);
    std::size_t p = 0;
    for (Index i = 0; i < dim; ++i)
      for (Index j = 0; j < dim; ++j) m(i, j) = flat[p++];
    if (kind == ElementKind::DenseMatrix) return dense(std::move(m));
    VectorType v(dim);
    for (Index i = 0; i < dim; ++i) v(i) = flat[p++];
    return pair(std::move(m), std::move(v));
  }

 private:
  ElementKind kind_ = ElementKind::DenseMatrix;
  MatrixType matrix_;
  VectorType vector_;
};

using ElementD = Element<double>;

}  // namespace debias
