#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "debias/element.hpp"
#include "debias/error.hpp"
#include "debias/estimator.hpp"
#include "debias/random.hpp"
#include "debias/ustat.hpp"

namespace debias {

enum class LeftFunctionalKind { Bilinear, Trace };

/// One order of a product structure, evaluated at a point x:
///   T_k(x)[h_1..h_k] = Lambda_k(G_0 h_1 G_1 ... h_k G_k).
///
/// Lambda_k is either weight * left^T Y right (Bilinear) or weight * tr(C Y) (Trace, C
/// defaults to the identity). The left factor of Lambda is folded into the chain seed so
/// that bilinear chains run on row vectors.
template <typename Scalar>
struct ChainTerm {
  using MatrixType = Mat<Scalar>;
  using VectorType = Vec<Scalar>;

  LeftFunctionalKind kind = LeftFunctionalKind::Bilinear;
  Scalar weight = 1;
  VectorType left;
  VectorType right;
  MatrixType trace_left;  // empty -> identity
  std::vector<MatrixType> factors;  // G_0 .. G_k

  int order() const { return static_cast<int>(factors.size()) - 1; }
  Index algebra_dim() const { return factors.front().rows(); }

  /// Initial DP row block: left^T G_0 (1 x m) or C G_0 (m x m).
  MatrixType chain_seed() const {
    if (kind == LeftFunctionalKind::Bilinear) return left.transpose() * factors.front();
    if (trace_left.size() == 0) return factors.front();
    return trace_left * factors.front();
  }

  /// Lambda applied to a chain that started from chain_seed().
  Scalar finish(const MatrixType& folded) const {
    if (kind == LeftFunctionalKind::Bilinear) return weight * (folded * right)(0, 0);
    return weight * folded.trace();
  }

  /// Lambda applied to a full algebra element.
  Scalar apply(const MatrixType& y) const {
    if (kind == LeftFunctionalKind::Bilinear) return weight * left.dot(y * right);
    if (trace_left.size() == 0) return weight * y.trace();
    return weight * (trace_left * y).trace();
  }
};

/// Per-order chain terms plus the embedding of carrier increments into the algebra.
template <typename Scalar>
struct ProductStructure {
  int max_order = 1;
  ElementKind kind = ElementKind::DenseMatrix;
  Index dim = 0;
  std::function<Mat<Scalar>(const Element<Scalar>&)> embed;
  std::function<ChainTerm<Scalar>(const Element<Scalar>&, int)> term;
};

struct PermutationPlan {
  int b = 1;
  bool reuse_across_orders = false;
  std::uint64_t seed = 0;
  /// Average over all of S_n instead of b random draws (n <= 8). Test mode.
  bool exhaustive = false;
};

/// Counts algebra multiplications performed by the DP.
struct OpCounter {
  std::uint64_t multiplications = 0;
};

/// Running chain sums Y_0..Y_k.
template <typename Scalar>
struct DPState {
  std::vector<Mat<Scalar>> y;
};

namespace detail {

template <typename Scalar>
void check_chain_dims(const Mat<Scalar>& v0, std::span<const Mat<Scalar>> factors,
                      std::span<const Mat<Scalar>> increments, int k) {
  require(k >= 1, Errc::InvalidArgument, "chain order must be >= 1");
  require(static_cast<Index>(increments.size()) >= k, Errc::ArityExceedsSample,
          "chain order " + std::to_string(k) + " exceeds " + std::to_string(increments.size()) +
              " increments");
  require(static_cast<int>(factors.size()) >= k + 1, Errc::DimensionMismatch,
          "need factors G_0..G_k");
  const Index m = v0.cols();
  for (int j = 1; j <= k; ++j)
    require(factors[j].rows() == m && factors[j].cols() == m, Errc::DimensionMismatch,
            "chain factor does not compose");
  for (const auto& h : increments)
    require(h.rows() == m && h.cols() == m, Errc::DimensionMismatch,
            "chain increment does not compose");
}

}  // namespace detail

/// Chain sums after processing increments[order[0]], increments[order[1]], ...:
///   Y_j = sum over t_1 < ... < t_j of v0 H_{t_1} G_1 H_{t_2} G_2 ... H_{t_j} G_j.
/// An empty `order` means the identity permutation. factors[0] is ignored (folded into v0).
template <typename Scalar>
DPState<Scalar> dp_state(const Mat<Scalar>& v0, std::span<const Mat<Scalar>> factors,
                         std::span<const Mat<Scalar>> increments, int k,
                         std::span<const Index> order = {}, OpCounter* counter = nullptr) {
  detail::check_chain_dims(v0, factors, increments, k);
  const Index n = static_cast<Index>(increments.size());
  require(order.empty() || static_cast<Index>(order.size()) == n, Errc::DimensionMismatch,
          "permutation length does not match the increments");

  DPState<Scalar> state;
  state.y.assign(static_cast<std::size_t>(k) + 1, Mat<Scalar>::Zero(v0.rows(), v0.cols()));
  state.y[0] = v0;
  Mat<Scalar> tmp(v0.rows(), v0.cols());
  for (Index t = 1; t <= n; ++t) {
    const auto& h = increments[static_cast<std::size_t>(order.empty() ? t - 1 : order[t - 1])];
    // j runs downward so Y_{j-1} still holds the previous step's value.
    for (int j = static_cast<int>(std::min<Index>(t, k)); j >= 1; --j) {
      tmp.noalias() = state.y[j - 1] * h;
      state.y[j].noalias() += tmp * factors[j];
    }
    if (counter) counter->multiplications += 2 * static_cast<std::uint64_t>(std::min<Index>(t, k));
  }
  return state;
}

/// Y_k after all increments.
template <typename Scalar>
Mat<Scalar> dp_chain(const Mat<Scalar>& v0, std::span<const Mat<Scalar>> factors,
                     std::span<const Mat<Scalar>> increments, int k,
                     std::span<const Index> order = {}, OpCounter* counter = nullptr) {
  return std::move(dp_state(v0, factors, increments, k, order, counter).y.back());
}

namespace detail {

template <typename Scalar>
std::vector<Mat<Scalar>> embed_all(const ProductStructure<Scalar>& structure,
                                   std::span<const Element<Scalar>> increments) {
  std::vector<Mat<Scalar>> out;
  out.reserve(increments.size());
  for (const auto& h : increments) {
    require(h.kind() == structure.kind && h.dim() == structure.dim, Errc::DimensionMismatch,
            "increment does not match the product structure's carrier");
    out.push_back(structure.embed(h));
  }
  return out;
}

template <typename Scalar>
Scalar fk_from_embedded(const ChainTerm<Scalar>& term, std::span<const Mat<Scalar>> embedded,
                        std::span<const Index> perm, int k, OpCounter* counter) {
  const Index n = static_cast<Index>(embedded.size());
  const Mat<Scalar> yk =
      dp_chain<Scalar>(term.chain_seed(), term.factors, embedded, k, perm, counter);
  if (counter) counter->multiplications += 1;
  return term.finish(yk) / static_cast<Scalar>(binomial(n, k));
}

inline std::vector<Index> identity_permutation(Index n) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  return p;
}

}  // namespace detail

/// F_k(pi) = C(n,k)^{-1} sum_{i_1<...<i_k} T_k(x)[H_{pi(i_1)}, ..., H_{pi(i_k)}] via the DP.
/// `increments` are the centered observations W_i - pilot; an empty `perm` is the identity.
template <typename Scalar>
Scalar fk_pi(const ProductStructure<Scalar>& structure, const Element<Scalar>& x,
             std::span<const Element<Scalar>> increments, std::span<const Index> perm, int k,
             OpCounter* counter = nullptr) {
  require(k >= 1 && k <= structure.max_order, Errc::OrderNotCovered,
          "structure does not cover order " + std::to_string(k));
  const auto embedded = detail::embed_all(structure, increments);
  const auto term = structure.term(x, k);
  return detail::fk_from_embedded<Scalar>(term, embedded, perm, k, counter);
}

/// Oracle for fk_pi: direct sum over increasing k-tuples of full algebra products.
template <typename Scalar>
Scalar fk_bruteforce(const ProductStructure<Scalar>& structure, const Element<Scalar>& x,
                     std::span<const Element<Scalar>> increments, std::span<const Index> perm,
                     int k, double cap = kOracleCap) {
  require(k >= 1 && k <= structure.max_order, Errc::OrderNotCovered,
          "structure does not cover order " + std::to_string(k));
  const Index n = static_cast<Index>(increments.size());
  require(k <= n, Errc::ArityExceedsSample, "order exceeds sample size");
  const double count = binomial(n, k);
  check_enumeration(count, cap, "brute-force F_k");
  const auto embedded = detail::embed_all(structure, increments);
  const auto order = perm.empty() ? detail::identity_permutation(n)
                                  : std::vector<Index>(perm.begin(), perm.end());
  const auto term = structure.term(x, k);

  Scalar sum = 0;
  Mat<Scalar> chain;
  for_each_combination(n, k, [&](std::span<const Index> idx) {
    chain = term.factors[0];
    for (int s = 0; s < k; ++s) {
      chain = chain * embedded[static_cast<std::size_t>(order[static_cast<std::size_t>(idx[s])])];
      chain = chain * term.factors[static_cast<std::size_t>(s) + 1];
    }
    sum += term.apply(chain);
  });
  return sum / static_cast<Scalar>(count);
}

/// |(1/n!) sum_{pi in S_n} F_k(pi) - (1/k!) D^k f(x)[U^(k)(pilot)]|.
template <typename Scalar>
Scalar permutation_average_gap(const ProductStructure<Scalar>& structure,
                               const Element<Scalar>& x, std::span<const Element<Scalar>> sample,
                               const Element<Scalar>& pilot, int k,
                               const DerivativeFamily<Scalar>& family) {
  const Index n = static_cast<Index>(sample.size());
  require(n <= 6, Errc::EnumerationCapExceeded, "full permutation enumeration needs n <= 6");
  std::vector<Element<Scalar>> inc;
  for (const auto& w : sample) inc.push_back(w - pilot);
  const auto embedded = detail::embed_all<Scalar>(structure, inc);
  const auto term = structure.term(x, k);

  auto perm = detail::identity_permutation(n);
  Scalar sum = 0;
  double count = 0;
  do {
    sum += detail::fk_from_embedded<Scalar>(term, embedded, perm, k, nullptr);
    count += 1;
  } while (std::next_permutation(perm.begin(), perm.end()));
  const Scalar averaged = sum / static_cast<Scalar>(count);
  const Scalar exact =
      complete_ustat(family.derivative(x, k), sample, pilot) / static_cast<Scalar>(factorial(k));
  using std::abs;
  return abs(averaged - exact);
}

/// The permutation used for order k, replicate r. Independent of the side, so both
/// halves of a cross-fit see the same permutations.
inline std::vector<Index> plan_permutation(const PermutationPlan& plan, Index n, int k, int r) {
  const std::uint64_t order_key = plan.reuse_across_orders ? 0 : static_cast<std::uint64_t>(k);
  auto stream = make_stream(plan.seed, {tag("permutation"), order_key, static_cast<std::uint64_t>(r)});
  return random_permutation(n, stream);
}

/// Permutation-randomized one-sided estimator:
///   f(pilot) + D^1 f(pilot)[mean - pilot] + sum_{k=2..s} (1/b) sum_r F_k(pi_{kr}).
template <typename Scalar>
OneSidedReport<Scalar> pre_one_sided(const DerivativeFamily<Scalar>& family,
                                     const ProductStructure<Scalar>& structure,
                                     const Element<Scalar>& pilot,
                                     std::span<const Element<Scalar>> sample, int s,
                                     const PermutationPlan& plan, OpCounter* counter = nullptr) {
  require(s >= 1, Errc::InvalidArgument, "permutation-randomized estimator needs s >= 1");
  require(s <= family.max_order, Errc::OrderExceedsFamily,
          "order " + std::to_string(s) + " exceeds family max order");
  require(s <= structure.max_order, Errc::OrderNotCovered,
          "structure does not cover order " + std::to_string(s));
  require(plan.b >= 1, Errc::InvalidArgument, "need at least one permutation");
  require(!sample.empty(), Errc::EmptySample, "empty sample");
  family.check_domain(pilot);

  const Index n = static_cast<Index>(sample.size());
  OneSidedReport<Scalar> report;
  report.pilot = pilot;
  report.s = s;
  report.per_order_terms.push_back(family.value(pilot));
  const Element<Scalar> centered_mean = mean_element(sample) - pilot;
  report.per_order_terms.push_back(family.derivative(pilot, 1).eval(centered_mean));

  if (s >= 2) {
    require(plan.exhaustive ? n <= 8 : true, Errc::EnumerationCapExceeded,
            "exhaustive permutation mode needs n <= 8");
    std::vector<Mat<Scalar>> embedded;
    embedded.reserve(sample.size());
    for (const auto& w : sample) embedded.push_back(structure.embed(w - pilot));

    for (int k = 2; k <= s; ++k) {
      require(k <= n, Errc::ArityExceedsSample, "order exceeds sample size");
      const auto term = structure.term(pilot, k);
      Scalar sum = 0;
      Scalar draws = 0;
      if (plan.exhaustive) {
        auto perm = detail::identity_permutation(n);
        do {
          sum += detail::fk_from_embedded<Scalar>(term, embedded, perm, k, counter);
          draws += 1;
        } while (std::next_permutation(perm.begin(), perm.end()));
      } else {
        for (int r = 0; r < plan.b; ++r) {
          const auto perm = plan_permutation(plan, n, k, r);
          sum += detail::fk_from_embedded<Scalar>(term, embedded, perm, k, counter);
          draws += 1;
        }
      }
      report.per_order_terms.push_back(sum / draws);
    }
  }
  for (Scalar t : report.per_order_terms) report.value += t;
  return report;
}

template <typename Scalar>
CrossFitReport<Scalar> pre_cross_fit(const DerivativeFamily<Scalar>& family,
                                     const ProductStructure<Scalar>& structure,
                                     const PilotFn<Scalar>& pilot_fn,
                                     std::span<const Element<Scalar>> part1,
                                     std::span<const Element<Scalar>> part2,
                                     const OrderSchedule& schedule, const PermutationPlan& plan,
                                     OpCounter* counter = nullptr) {
  require(part1.size() == part2.size(), Errc::UnequalSplit, "cross-fitting needs equal halves");
  require(!part1.empty(), Errc::EmptySample, "cross-fitting on empty halves");
  const int s = resolve_order(schedule, static_cast<Index>(part1.size()));
  CrossFitReport<Scalar> report;
  report.side_a = pre_one_sided(family, structure, pilot_fn(part2), part1, s, plan, counter);
  report.side_b = pre_one_sided(family, structure, pilot_fn(part1), part2, s, plan, counter);
  report.value = (report.side_a.value + report.side_b.value) / Scalar(2);
  return report;
}

}  // namespace debias
