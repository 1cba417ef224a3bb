#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/LU>

#include "debias/element.hpp"
#include "debias/error.hpp"
#include "debias/estimator.hpp"
#include "debias/product_dp.hpp"
#include "debias/ustat.hpp"

namespace debias {

/// Relative floor for the SPD domain guard.
inline constexpr double kSpdFloor = 1e-8;
/// Smallest admissible |z| for the real Stieltjes transform.
inline constexpr double kStieltjesMargin = 1e-6;

template <typename Scalar>
struct FamilyWithStructure {
  DerivativeFamily<Scalar> family;
  ProductStructure<Scalar> structure;
};

template <typename Scalar>
struct PrecisionSpec {
  Vec<Scalar> eta1;
  Vec<Scalar> eta2;
};

template <typename Scalar>
struct RegressionSpec {
  Vec<Scalar> eta;
};

template <typename Scalar>
struct StieltjesSpec {
  Mat<Scalar> B;
  Scalar z = -1;
};

namespace detail {

inline int sign_pow(int k) { return (k % 2 == 0) ? 1 : -1; }

/// Calls fn(sigma) for every permutation sigma of [0, k).
template <typename Fn>
void for_each_permutation(int k, Fn&& fn) {
  std::vector<int> sigma(static_cast<std::size_t>(k));
  std::iota(sigma.begin(), sigma.end(), 0);
  do {
    fn(std::span<const int>(sigma));
  } while (std::next_permutation(sigma.begin(), sigma.end()));
}

/// Inverse of an SPD matrix; throws `code` when the Cholesky factorization fails.
template <typename Scalar>
Mat<Scalar> spd_inverse(const Mat<Scalar>& m, Errc code) {
  Eigen::LLT<Mat<Scalar>> llt(m);
  require(llt.info() == Eigen::Success, code, "matrix is not positive definite");
  return llt.solve(Mat<Scalar>::Identity(m.rows(), m.cols()));
}

/// Empty when m - floor*||m||_F*I admits a Cholesky factor. The Frobenius norm bounds
/// the operator norm from above, so this guard is at least as strict as an
/// eigenvalue floor relative to the operator norm.
template <typename Scalar>
std::optional<std::string> spd_guard(const Mat<Scalar>& m, double floor = kSpdFloor) {
  using std::isfinite;
  if (!m.allFinite()) return std::string("matrix has non-finite entries");
  const Scalar tau = static_cast<Scalar>(floor) * m.norm();
  Mat<Scalar> shifted = m;
  shifted.diagonal().array() -= tau;
  Eigen::LLT<Mat<Scalar>> llt(shifted);
  if (llt.info() != Eigen::Success)
    return std::string("minimum eigenvalue at or below the SPD floor");
  return std::nullopt;
}

template <typename Scalar>
void check_nonzero(const Vec<Scalar>& v, const char* what) {
  require(v.size() > 0 && v.norm() > 0, Errc::InvalidArgument, std::string(what) + " must be nonzero");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Precision contrast  omega(Sigma) = eta1^T Sigma^{-1} eta2

/// D^k omega(H)[h_1..h_k] = (-1)^k sum_pi eta1^T H^{-1} h_pi(1) H^{-1} ... h_pi(k) H^{-1} eta2.
/// Product structure: Lambda_k(Y) = (-1)^k eta1^T Y eta2, G_{k,j} = H^{-1}.
template <typename Scalar>
FamilyWithStructure<Scalar> build_precision(const PrecisionSpec<Scalar>& spec, int max_order = 8) {
  detail::check_nonzero(spec.eta1, "eta1");
  detail::check_nonzero(spec.eta2, "eta2");
  require(spec.eta1.size() == spec.eta2.size(), Errc::DimensionMismatch, "eta dims differ");
  const Index d = spec.eta1.size();
  const Vec<Scalar> eta1 = spec.eta1, eta2 = spec.eta2;

  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::DenseMatrix;
  family.dim = d;
  family.max_order = max_order;
  family.value = [eta1, eta2](const Element<Scalar>& x) -> Scalar {
    Eigen::LLT<Mat<Scalar>> llt(x.matrix());
    require(llt.info() == Eigen::Success, Errc::SingularInput, "precision functional at non-SPD point");
    return eta1.dot(llt.solve(eta2));
  };
  family.derivative = [eta1, eta2, d](const Element<Scalar>& x, int k) {
    const Mat<Scalar> inv = detail::spd_inverse<Scalar>(x.matrix(), Errc::SingularInput);
    const Vec<Scalar> u = inv * eta1;  // H^{-1} symmetric
    const Vec<Scalar> v = inv * eta2;
    const Scalar sign = static_cast<Scalar>(detail::sign_pow(k));
    return KLinearForm<Scalar>(
        k, true, ElementKind::DenseMatrix, d,
        [inv, u, v, k, sign](typename KLinearForm<Scalar>::Args h) {
          Scalar acc = 0;
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row;
          detail::for_each_permutation(k, [&](std::span<const int> sigma) {
            row = u.transpose();
            for (int m = 0; m < k; ++m) {
              row = row * h[sigma[m]]->matrix();
              if (m + 1 < k) row = row * inv;
            }
            acc += row.dot(v);
          });
          return sign * acc;
        });
  };
  family.domain_guard = [](const Element<Scalar>& x) { return detail::spd_guard(x.matrix()); };

  ProductStructure<Scalar> structure;
  structure.max_order = max_order;
  structure.kind = ElementKind::DenseMatrix;
  structure.dim = d;
  structure.embed = [](const Element<Scalar>& h) { return h.matrix(); };
  structure.term = [eta1, eta2](const Element<Scalar>& x, int k) {
    const Mat<Scalar> inv = detail::spd_inverse<Scalar>(x.matrix(), Errc::SingularInput);
    ChainTerm<Scalar> t;
    t.kind = LeftFunctionalKind::Bilinear;
    t.weight = static_cast<Scalar>(detail::sign_pow(k));
    t.left = eta1;
    t.right = eta2;
    t.factors.assign(static_cast<std::size_t>(k) + 1, inv);
    return t;
  };
  return {std::move(family), std::move(structure)};
}

// ---------------------------------------------------------------------------
// Regression projection  beta_eta(Sigma, Gamma) = eta^T Sigma^{-1} Gamma

/// Embeds a pair increment (a, b) as the (d+1) x (d+1) block [[a, -b], [0, 0]].
template <typename Scalar>
Mat<Scalar> augment_increment(const Element<Scalar>& h) {
  require(h.kind() == ElementKind::MomentPair, Errc::DimensionMismatch, "augmenting a non-pair");
  const Index d = h.dim();
  Mat<Scalar> out = Mat<Scalar>::Zero(d + 1, d + 1);
  out.topLeftCorner(d, d) = h.matrix();
  out.topRightCorner(d, 1) = -h.vector();
  return out;
}

/// D^k beta_eta(A,B)[(a_i,b_i)] =
///   (-1)^k sum_pi eta^T A^{-1} a_pi(1) A^{-1} ... A^{-1} (a_pi(k) A^{-1} B - b_pi(k)).
///
/// The product structure lives on augmented (d+1) x (d+1) matrices: increments
/// [[a,-b],[0,0]], interior factors [[A^{-1},0],[0,0]], terminal factor
/// [[0, A^{-1}B],[0,1]], and Lambda_k(Y) = (-1)^k [eta^T, 0] Y e_{d+1} with G_0 interior.
template <typename Scalar>
FamilyWithStructure<Scalar> build_regression(const RegressionSpec<Scalar>& spec, int max_order = 8) {
  detail::check_nonzero(spec.eta, "eta");
  const Index d = spec.eta.size();
  const Vec<Scalar> eta = spec.eta;

  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::MomentPair;
  family.dim = d;
  family.max_order = max_order;
  family.value = [eta](const Element<Scalar>& x) -> Scalar {
    Eigen::LLT<Mat<Scalar>> llt(x.matrix());
    require(llt.info() == Eigen::Success, Errc::SingularInput, "regression functional at non-SPD point");
    return eta.dot(llt.solve(x.vector()));
  };
  family.derivative = [eta, d](const Element<Scalar>& x, int k) {
    const Mat<Scalar> inv = detail::spd_inverse<Scalar>(x.matrix(), Errc::SingularInput);
    const Vec<Scalar> u = inv * eta;
    const Vec<Scalar> beta = inv * x.vector();
    const Scalar sign = static_cast<Scalar>(detail::sign_pow(k));
    return KLinearForm<Scalar>(
        k, true, ElementKind::MomentPair, d,
        [inv, u, beta, k, sign](typename KLinearForm<Scalar>::Args h) {
          Scalar acc = 0;
          Eigen::Matrix<Scalar, 1, Eigen::Dynamic> row;
          detail::for_each_permutation(k, [&](std::span<const int> sigma) {
            row = u.transpose();
            for (int m = 0; m + 1 < k; ++m) row = (row * h[sigma[m]]->matrix()) * inv;
            const auto& last = *h[sigma[k - 1]];
            acc += row.dot(last.matrix() * beta - last.vector());
          });
          return sign * acc;
        });
  };
  family.domain_guard = [](const Element<Scalar>& x) { return detail::spd_guard(x.matrix()); };

  ProductStructure<Scalar> structure;
  structure.max_order = max_order;
  structure.kind = ElementKind::MomentPair;
  structure.dim = d;
  structure.embed = [](const Element<Scalar>& h) { return augment_increment(h); };
  structure.term = [eta, d](const Element<Scalar>& x, int k) {
    const Mat<Scalar> inv = detail::spd_inverse<Scalar>(x.matrix(), Errc::SingularInput);
    Mat<Scalar> interior = Mat<Scalar>::Zero(d + 1, d + 1);
    interior.topLeftCorner(d, d) = inv;
    Mat<Scalar> terminal = Mat<Scalar>::Zero(d + 1, d + 1);
    terminal.topRightCorner(d, 1) = inv * x.vector();
    terminal(d, d) = 1;

    ChainTerm<Scalar> t;
    t.kind = LeftFunctionalKind::Bilinear;
    t.weight = static_cast<Scalar>(detail::sign_pow(k));
    t.left = Vec<Scalar>::Zero(d + 1);
    t.left.head(d) = eta;
    t.right = Vec<Scalar>::Unit(d + 1, d);
    t.factors.assign(static_cast<std::size_t>(k), interior);
    t.factors.push_back(terminal);
    return t;
  };
  return {std::move(family), std::move(structure)};
}

// ---------------------------------------------------------------------------
// Log-determinant  f(A) = log det A

/// D^k f(A)[h..] = ((-1)^{k-1}/k) sum_sigma tr(A^{-1} h_sigma(1) ... A^{-1} h_sigma(k)).
/// Structure: G_0 = ... = G_{k-1} = A^{-1}, G_k = I, Lambda = weighted trace.
template <typename Scalar>
FamilyWithStructure<Scalar> build_logdet(Index d, int max_order = 8) {
  require(d >= 1, Errc::InvalidArgument, "dimension must be positive");

  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::DenseMatrix;
  family.dim = d;
  family.max_order = max_order;
  family.value = [](const Element<Scalar>& x) -> Scalar {
    Eigen::LLT<Mat<Scalar>> llt(x.matrix());
    if (llt.info() == Eigen::Success) {
      using std::log;
      return Scalar(2) * llt.matrixLLT().diagonal().array().log().sum();
    }
    Eigen::FullPivLU<Mat<Scalar>> lu(x.matrix());
    require(lu.isInvertible(), Errc::SingularInput, "log-det of a singular matrix");
    const Scalar det = lu.determinant();
    require(det > 0, Errc::NonPositiveDeterminant, "log-det of a matrix with det <= 0");
    using std::log;
    return log(det);
  };
  family.derivative = [d](const Element<Scalar>& x, int k) {
    Eigen::FullPivLU<Mat<Scalar>> lu(x.matrix());
    require(lu.isInvertible(), Errc::SingularInput, "log-det derivative at a singular matrix");
    const Mat<Scalar> inv = lu.inverse();
    const Scalar weight = static_cast<Scalar>(detail::sign_pow(k - 1)) / static_cast<Scalar>(k);
    return KLinearForm<Scalar>(
        k, true, ElementKind::DenseMatrix, d,
        [inv, k, weight](typename KLinearForm<Scalar>::Args h) {
          Scalar acc = 0;
          Mat<Scalar> chain;
          detail::for_each_permutation(k, [&](std::span<const int> sigma) {
            chain = inv * h[sigma[0]]->matrix();
            for (int m = 1; m < k; ++m) chain = chain * inv * h[sigma[m]]->matrix();
            acc += chain.trace();
          });
          return weight * acc;
        });
  };
  family.domain_guard = [](const Element<Scalar>& x) { return detail::spd_guard(x.matrix()); };

  ProductStructure<Scalar> structure;
  structure.max_order = max_order;
  structure.kind = ElementKind::DenseMatrix;
  structure.dim = d;
  structure.embed = [](const Element<Scalar>& h) { return h.matrix(); };
  structure.term = [d](const Element<Scalar>& x, int k) {
    Eigen::FullPivLU<Mat<Scalar>> lu(x.matrix());
    require(lu.isInvertible(), Errc::SingularInput, "log-det structure at a singular matrix");
    ChainTerm<Scalar> t;
    t.kind = LeftFunctionalKind::Trace;
    t.weight = static_cast<Scalar>(detail::sign_pow(k - 1)) / static_cast<Scalar>(k);
    t.factors.assign(static_cast<std::size_t>(k), lu.inverse());
    t.factors.push_back(Mat<Scalar>::Identity(d, d));
    return t;
  };
  return {std::move(family), std::move(structure)};
}

// ---------------------------------------------------------------------------
// Real Stieltjes transform  f(A) = tr(B (A - zI)^{-1}),  z <= -margin

/// D^k f(A)[h..] = (-1)^k sum_sigma tr(B R h_sigma(1) R ... h_sigma(k) R), R = (A - zI)^{-1}.
template <typename Scalar>
FamilyWithStructure<Scalar> build_stieltjes(const StieltjesSpec<Scalar>& spec, int max_order = 8) {
  require(spec.B.rows() == spec.B.cols() && spec.B.rows() > 0, Errc::DimensionMismatch,
          "B must be a nonempty square matrix");
  require(spec.z <= -static_cast<Scalar>(kStieltjesMargin), Errc::InvalidArgument,
          "real Stieltjes transform needs z <= -1e-6");
  const Index d = spec.B.rows();
  const Mat<Scalar> B = spec.B;
  const Scalar z = spec.z;
  const auto resolvent = [z](const Element<Scalar>& x) {
    Mat<Scalar> shifted = x.matrix();
    shifted.diagonal().array() -= z;
    return detail::spd_inverse<Scalar>(shifted, Errc::SingularShift);
  };

  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::DenseMatrix;
  family.dim = d;
  family.max_order = max_order;
  family.value = [B, resolvent](const Element<Scalar>& x) -> Scalar {
    return (B * resolvent(x)).trace();
  };
  family.derivative = [B, resolvent, d](const Element<Scalar>& x, int k) {
    const Mat<Scalar> r = resolvent(x);
    const Mat<Scalar> br = B * r;
    const Scalar sign = static_cast<Scalar>(detail::sign_pow(k));
    return KLinearForm<Scalar>(
        k, true, ElementKind::DenseMatrix, d,
        [r, br, k, sign](typename KLinearForm<Scalar>::Args h) {
          Scalar acc = 0;
          Mat<Scalar> chain;
          detail::for_each_permutation(k, [&](std::span<const int> sigma) {
            chain = br;
            for (int m = 0; m < k; ++m) chain = chain * h[sigma[m]]->matrix() * r;
            acc += chain.trace();
          });
          return sign * acc;
        });
  };
  family.domain_guard = [z](const Element<Scalar>& x) {
    Mat<Scalar> shifted = x.matrix();
    shifted.diagonal().array() -= z;
    return detail::spd_guard(shifted);
  };

  ProductStructure<Scalar> structure;
  structure.max_order = max_order;
  structure.kind = ElementKind::DenseMatrix;
  structure.dim = d;
  structure.embed = [](const Element<Scalar>& h) { return h.matrix(); };
  structure.term = [B, resolvent](const Element<Scalar>& x, int k) {
    ChainTerm<Scalar> t;
    t.kind = LeftFunctionalKind::Trace;
    t.weight = static_cast<Scalar>(detail::sign_pow(k));
    t.trace_left = B;
    t.factors.assign(static_cast<std::size_t>(k) + 1, resolvent(x));
    return t;
  };
  return {std::move(family), std::move(structure)};
}

// ---------------------------------------------------------------------------
// Polynomial test functionals

/// f(Sigma) = eta1^T Sigma^2 eta2: D^1[h] = eta1^T (h Sigma + Sigma h) eta2,
/// D^2[h,g] = eta1^T (h g + g h) eta2, D^k = 0 for k >= 3.
template <typename Scalar>
DerivativeFamily<Scalar> quadratic_test_functional(const Vec<Scalar>& eta1, const Vec<Scalar>& eta2,
                                                   int max_order = 8) {
  detail::check_nonzero(eta1, "eta1");
  detail::check_nonzero(eta2, "eta2");
  const Index d = eta1.size();
  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::DenseMatrix;
  family.dim = d;
  family.max_order = max_order;
  family.value = [eta1, eta2](const Element<Scalar>& x) -> Scalar {
    return eta1.dot(x.matrix() * (x.matrix() * eta2));
  };
  family.derivative = [eta1, eta2, d](const Element<Scalar>& x, int k) {
    using Args = typename KLinearForm<Scalar>::Args;
    if (k == 1) {
      const Mat<Scalar> sigma = x.matrix();
      return KLinearForm<Scalar>(1, true, ElementKind::DenseMatrix, d, [=](Args h) {
        const auto& m = h[0]->matrix();
        return eta1.dot(m * (sigma * eta2)) + eta1.dot(sigma * (m * eta2));
      });
    }
    if (k == 2) {
      return KLinearForm<Scalar>(2, true, ElementKind::DenseMatrix, d, [=](Args h) {
        const auto& a = h[0]->matrix();
        const auto& b = h[1]->matrix();
        return eta1.dot(a * (b * eta2)) + eta1.dot(b * (a * eta2));
      });
    }
    return KLinearForm<Scalar>(k, true, ElementKind::DenseMatrix, d, [](Args) { return Scalar(0); });
  };
  return family;
}

/// f(Sigma) = eta1^T Sigma eta2; every derivative beyond the first vanishes.
template <typename Scalar>
DerivativeFamily<Scalar> linear_test_functional(const Vec<Scalar>& eta1, const Vec<Scalar>& eta2,
                                                int max_order = 8) {
  detail::check_nonzero(eta1, "eta1");
  detail::check_nonzero(eta2, "eta2");
  const Index d = eta1.size();
  DerivativeFamily<Scalar> family;
  family.kind = ElementKind::DenseMatrix;
  family.dim = d;
  family.max_order = max_order;
  family.value = [eta1, eta2](const Element<Scalar>& x) -> Scalar {
    return eta1.dot(x.matrix() * eta2);
  };
  family.derivative = [eta1, eta2, d](const Element<Scalar>&, int k) {
    using Args = typename KLinearForm<Scalar>::Args;
    if (k == 1)
      return KLinearForm<Scalar>(1, true, ElementKind::DenseMatrix, d,
                                 [=](Args h) { return eta1.dot(h[0]->matrix() * eta2); });
    return KLinearForm<Scalar>(k, true, ElementKind::DenseMatrix, d, [](Args) { return Scalar(0); });
  };
  return family;
}

// ---------------------------------------------------------------------------
// Derivative validation

/// Max relative error between D^k f(x)[dirs] and central finite differences, k in {1,2}.
/// k=1 checks every direction; k=2 checks every pair (i <= j). `step` <= 0 selects
/// 1e-4 * max(1, |x|), scaled by the largest direction norm.
template <typename Scalar>
Scalar finite_difference_gap(const DerivativeFamily<Scalar>& family, const Element<Scalar>& x, int k,
                             std::span<const Element<Scalar>> directions, Scalar step = 0) {
  require(k == 1 || k == 2, Errc::InvalidArgument, "finite differences cover k = 1, 2");
  require(!directions.empty(), Errc::InvalidArgument, "need at least one direction");
  Scalar dir_norm = 0;
  for (const auto& dir : directions) {
    x.check_compatible(dir);
    dir_norm = std::max(dir_norm, dir.norm());
  }
  require(dir_norm > 0, Errc::InvalidArgument, "directions must be nonzero");
  using std::abs;
  using std::max;
  const Scalar base = step > 0 ? step : Scalar(1e-4) * max(Scalar(1), x.norm());
  const Scalar eps = base / dir_norm;

  const auto guarded = [&](const Element<Scalar>& p) {
    if (family.domain_guard && family.domain_guard(p))
      fail(Errc::DomainTooTight, "guard margin around x is smaller than 10 finite-difference steps");
  };
  const auto f = [&](const Element<Scalar>& p) { return family.value(p); };
  const auto rel = [](Scalar a, Scalar b) {
    const Scalar denom = max(abs(a), abs(b));
    return denom == 0 ? Scalar(0) : abs(a - b) / denom;
  };

  Scalar worst = 0;
  if (k == 1) {
    const auto form = family.derivative(x, 1);
    for (const auto& dir : directions) {
      guarded(x + Scalar(10) * eps * dir);
      guarded(x - Scalar(10) * eps * dir);
      const Scalar fd = (f(x + eps * dir) - f(x - eps * dir)) / (2 * eps);
      worst = max(worst, rel(form.eval(dir), fd));
    }
    return worst;
  }
  const auto form = family.derivative(x, 2);
  for (std::size_t i = 0; i < directions.size(); ++i) {
    for (std::size_t j = i; j < directions.size(); ++j) {
      const auto& a = directions[i];
      const auto& b = directions[j];
      for (Scalar sa : {Scalar(1), Scalar(-1)})
        for (Scalar sb : {Scalar(1), Scalar(-1)}) guarded(x + Scalar(10) * eps * (sa * a + sb * b));
      const Scalar fd = (f(x + eps * a + eps * b) - f(x + eps * a - eps * b) -
                         f(x - eps * a + eps * b) + f(x - eps * a - eps * b)) /
                        (4 * eps * eps);
      worst = max(worst, rel(form.eval(a, b), fd));
    }
  }
  return worst;
}

}  // namespace debias
