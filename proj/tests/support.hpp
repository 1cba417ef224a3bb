#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "debias/element.hpp"
#include "debias/functionals.hpp"
#include "debias/product_dp.hpp"
#include "debias/ustat.hpp"

namespace testing {

using debias::ElementD;
using debias::Index;
using Rng = std::mt19937_64;

inline Eigen::MatrixXd random_matrix(Index d, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::MatrixXd m(d, d);
  for (Index i = 0; i < d; ++i)
    for (Index j = 0; j < d; ++j) m(i, j) = z(rng);
  return m;
}

inline Eigen::VectorXd random_vector(Index d, Rng& rng) {
  std::normal_distribution<double> z;
  Eigen::VectorXd v(d);
  for (Index i = 0; i < d; ++i) v(i) = z(rng);
  return v;
}

inline Eigen::MatrixXd random_symmetric(Index d, Rng& rng) {
  const Eigen::MatrixXd m = random_matrix(d, rng);
  return 0.5 * (m + m.transpose());
}

/// SPD with eigenvalues in roughly [1, 3].
inline Eigen::MatrixXd random_spd(Index d, Rng& rng) {
  const Eigen::MatrixXd m = random_matrix(d, rng);
  return Eigen::MatrixXd::Identity(d, d) + m * m.transpose() / (2.0 * static_cast<double>(d));
}

inline ElementD scalar(double v) { return ElementD::scalar(v); }

inline std::vector<ElementD> scalars(std::initializer_list<double> values) {
  std::vector<ElementD> out;
  for (double v : values) out.push_back(scalar(v));
  return out;
}

inline ElementD random_dense(Index d, Rng& rng, bool symmetric = true) {
  return ElementD::dense(symmetric ? random_symmetric(d, rng) : random_matrix(d, rng));
}

inline ElementD random_pair(Index d, Rng& rng) {
  return ElementD::pair(random_symmetric(d, rng), random_vector(d, rng));
}

/// Product kernel on 1x1 elements: h_1 * ... * h_k.
inline debias::KLinearForm<double> product_form(int k) {
  return debias::KLinearForm<double>(k, true, debias::ElementKind::DenseMatrix, 1,
                                     [](debias::KLinearForm<double>::Args h) {
                                       double p = 1;
                                       for (const auto* e : h) p *= e->as_scalar();
                                       return p;
                                     });
}

/// Symmetrized random trace form sum_sigma tr(A_0 h_s1 A_1 ... h_sk) on d x d matrices.
inline debias::KLinearForm<double> random_trace_form(int k, Index d, Rng& rng) {
  std::vector<Eigen::MatrixXd> a;
  for (int i = 0; i < k; ++i) a.push_back(random_matrix(d, rng));
  return debias::KLinearForm<double>(
      k, true, debias::ElementKind::DenseMatrix, d, [a, k](debias::KLinearForm<double>::Args h) {
        std::vector<int> sigma(static_cast<std::size_t>(k));
        std::iota(sigma.begin(), sigma.end(), 0);
        double acc = 0;
        do {
          Eigen::MatrixXd chain = a[0];
          for (int m = 0; m < k; ++m) {
            chain = chain * h[sigma[m]]->matrix();
            if (m + 1 < k) chain = chain * a[static_cast<std::size_t>(m) + 1];
          }
          acc += chain.trace();
        } while (std::next_permutation(sigma.begin(), sigma.end()));
        return acc;
      });
}

inline double rel_err(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

/// Relative error with a floor on the scale, for values that may legitimately be ~0.
inline double rel_err_floor(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Sum over sigma in S_k of Lambda_k(G_0 H_s1 G_1 ... H_sk G_k) with explicit full products:
/// the structure's claim about D^k f, evaluated without the DP.
inline double structure_form_value(const debias::ProductStructure<double>& structure,
                                   const ElementD& x, const std::vector<ElementD>& hs) {
  const int k = static_cast<int>(hs.size());
  const auto term = structure.term(x, k);
  std::vector<Eigen::MatrixXd> emb;
  for (const auto& h : hs) emb.push_back(structure.embed(h));
  std::vector<int> sigma(static_cast<std::size_t>(k));
  std::iota(sigma.begin(), sigma.end(), 0);
  double acc = 0;
  do {
    Eigen::MatrixXd chain = term.factors[0];
    for (int m = 0; m < k; ++m) chain = chain * emb[static_cast<std::size_t>(sigma[m])] * term.factors[m + 1];
    acc += term.apply(chain);
  } while (std::next_permutation(sigma.begin(), sigma.end()));
  return acc;
}

}  // namespace testing
