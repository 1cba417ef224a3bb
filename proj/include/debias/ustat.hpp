#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "debias/element.hpp"
#include "debias/error.hpp"

namespace debias {

/// Oracles refuse to enumerate more than this many tuples.
inline constexpr double kOracleCap = 1e6;
/// Brute-force complete U-statistics refuse more than this many index tuples.
inline constexpr double kUstatCap = 5e6;

// ---------------------------------------------------------------------------
// Combinatorics

/// C(n, k) in double precision. Exact below 2^53; log-space beyond that.
inline double binomial(std::int64_t n, std::int64_t k) {
  if (k < 0 || k > n) return 0.0;
  k = std::min(k, n - k);
  double c = 1.0;
  for (std::int64_t i = 1; i <= k; ++i) {
    c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
    if (c > 9007199254740992.0) {  // 2^53
      const double lg = std::lgamma(static_cast<double>(n) + 1.0) -
                        std::lgamma(static_cast<double>(k) + 1.0) -
                        std::lgamma(static_cast<double>(n - k) + 1.0);
      const double r = std::exp(lg);
      require(std::isfinite(r), Errc::BinomialOverflow,
              "C(" + std::to_string(n) + "," + std::to_string(k) + ") is not representable");
      return r;
    }
  }
  return c;
}

inline double factorial(int k) {
  double f = 1.0;
  for (int i = 2; i <= k; ++i) f *= i;
  return f;
}

/// Calls fn(span of k strictly increasing indices) for every k-subset of [0, n), in
/// lexicographic order.
template <typename Fn>
void for_each_combination(Index n, int k, Fn&& fn) {
  if (k < 0 || k > n) return;
  std::vector<Index> idx(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) idx[i] = i;
  while (true) {
    fn(std::span<const Index>(idx));
    int i = k - 1;
    while (i >= 0 && idx[i] == n - k + i) --i;
    if (i < 0) return;
    ++idx[i];
    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

/// Calls fn(span of `length` digits in [0, base)) for every tuple in base^length.
template <typename Fn>
void for_each_tuple(Index base, int length, Fn&& fn) {
  std::vector<Index> digits(static_cast<std::size_t>(length), 0);
  if (base <= 0 && length > 0) return;
  while (true) {
    fn(std::span<const Index>(digits));
    int pos = length - 1;
    while (pos >= 0 && ++digits[pos] == base) digits[pos--] = 0;
    if (pos < 0) return;
  }
}

inline void check_enumeration(double count, double cap, const std::string& what) {
  require(count <= cap, Errc::EnumerationCapExceeded,
          what + " needs " + std::to_string(count) + " tuples (cap " + std::to_string(cap) + ")");
}

// ---------------------------------------------------------------------------
// Multilinear forms

/// A real-valued form of fixed arity on Elements of one kind and dimension.
///
/// The evaluator receives exactly `arity` pointers; the form checks arity and
/// kind/dimension before forwarding.
template <typename Scalar>
class KLinearForm {
 public:
  using ElementType = Element<Scalar>;
  using Args = std::span<const ElementType* const>;
  using Evaluator = std::function<Scalar(Args)>;

  KLinearForm() = default;
  KLinearForm(int arity, bool symmetric, ElementKind kind, Index dim, Evaluator eval)
      : arity_(arity), symmetric_(symmetric), kind_(kind), dim_(dim), eval_(std::move(eval)) {
    require(arity >= 0, Errc::InvalidArgument, "negative arity");
  }

  int arity() const { return arity_; }
  bool symmetric() const { return symmetric_; }
  ElementKind kind() const { return kind_; }
  Index dim() const { return dim_; }

  bool accepts(const ElementType& e) const { return e.kind() == kind_ && e.dim() == dim_; }

  Scalar operator()(Args args) const {
    require(static_cast<int>(args.size()) == arity_, Errc::InvalidArgument,
            "form of arity " + std::to_string(arity_) + " called with " +
                std::to_string(args.size()) + " arguments");
    for (const ElementType* a : args)
      require(accepts(*a), Errc::DimensionMismatch, "argument kind/dim does not match form");
    return eval_(args);
  }

  template <typename... E>
  Scalar eval(const E&... elements) const {
    const ElementType* ptrs[] = {&elements...};
    return (*this)(Args(ptrs, sizeof...(E)));
  }

  /// The form of arity `arity - count` obtained by fixing the leading `count` slots to h.
  KLinearForm fix_leading(const ElementType& h, int count) const {
    require(count >= 0 && count <= arity_, Errc::InvalidArgument, "cannot fix that many slots");
    auto self = *this;
    ElementType fixed = h;
    return KLinearForm(arity_ - count, symmetric_, kind_, dim_,
                       [self, fixed, count](Args rest) {
                         std::vector<const ElementType*> all(static_cast<std::size_t>(count),
                                                             &fixed);
                         all.insert(all.end(), rest.begin(), rest.end());
                         return self(Args(all));
                       });
  }

 private:
  int arity_ = 0;
  bool symmetric_ = false;
  ElementKind kind_ = ElementKind::DenseMatrix;
  Index dim_ = 0;
  Evaluator eval_;
};

/// A probability distribution on finitely many Elements.
template <typename Scalar>
class FiniteSupportDistribution {
 public:
  using ElementType = Element<Scalar>;

  FiniteSupportDistribution(std::vector<ElementType> atoms, std::vector<Scalar> probs)
      : atoms_(std::move(atoms)), probs_(std::move(probs)) {
    require(!atoms_.empty(), Errc::EmptySample, "distribution needs at least one atom");
    require(atoms_.size() == probs_.size(), Errc::InvalidArgument, "atoms/probs length mismatch");
    Scalar total = 0;
    for (std::size_t i = 0; i < atoms_.size(); ++i) {
      atoms_[0].check_compatible(atoms_[i]);
      require(probs_[i] >= 0, Errc::InvalidArgument, "negative probability");
      total += probs_[i];
    }
    using std::abs;
    require(abs(total - Scalar(1)) <= Scalar(1e-12), Errc::InvalidArgument,
            "probabilities must sum to one");
  }

  static FiniteSupportDistribution uniform(std::vector<ElementType> atoms) {
    const auto m = atoms.size();
    return FiniteSupportDistribution(std::move(atoms),
                                     std::vector<Scalar>(m, Scalar(1) / Scalar(m)));
  }

  const std::vector<ElementType>& atoms() const { return atoms_; }
  const std::vector<Scalar>& probs() const { return probs_; }
  Index support_size() const { return static_cast<Index>(atoms_.size()); }

  ElementType mean() const {
    ElementType m = ElementType::zero(atoms_[0].kind(), atoms_[0].dim());
    for (std::size_t i = 0; i < atoms_.size(); ++i) m.add_scaled(probs_[i], atoms_[i]);
    return m;
  }

 private:
  std::vector<ElementType> atoms_;
  std::vector<Scalar> probs_;
};

// ---------------------------------------------------------------------------
// U-statistics

template <typename Scalar>
Element<Scalar> mean_element(std::span<const Element<Scalar>> sample) {
  require(!sample.empty(), Errc::EmptySample, "mean of an empty sample");
  Element<Scalar> m = sample[0];
  for (std::size_t i = 1; i < sample.size(); ++i) m += sample[i];
  m *= Scalar(1) / static_cast<Scalar>(sample.size());
  return m;
}

namespace detail {

template <typename Scalar>
void check_ustat_inputs(const KLinearForm<Scalar>& form, std::span<const Element<Scalar>> sample,
                        const Element<Scalar>& shift) {
  require(form.arity() >= 1, Errc::InvalidArgument, "U-statistic needs arity >= 1");
  require(form.symmetric(), Errc::InvalidArgument,
          "complete U-statistics over increasing tuples require a symmetric form");
  require(static_cast<Index>(sample.size()) >= form.arity(), Errc::ArityExceedsSample,
          "arity " + std::to_string(form.arity()) + " exceeds sample size " +
              std::to_string(sample.size()));
  require(form.accepts(shift), Errc::DimensionMismatch, "shift does not match the form");
  for (const auto& w : sample)
    require(form.accepts(w), Errc::DimensionMismatch, "sample element does not match the form");
}

}  // namespace detail

/// C(n,k)^{-1} sum over j_1 < ... < j_k of form(W_{j_1} - shift, ..., W_{j_k} - shift).
template <typename Scalar>
Scalar complete_ustat(const KLinearForm<Scalar>& form, std::span<const Element<Scalar>> sample,
                      const Element<Scalar>& shift, double cap = kUstatCap) {
  detail::check_ustat_inputs(form, sample, shift);
  const Index n = static_cast<Index>(sample.size());
  const int k = form.arity();
  const double count = binomial(n, k);
  check_enumeration(count, cap, "complete U-statistic");

  std::vector<Element<Scalar>> inc;
  inc.reserve(sample.size());
  for (const auto& w : sample) inc.push_back(w - shift);

  std::vector<const Element<Scalar>*> args(static_cast<std::size_t>(k));
  Scalar sum = 0;
  for_each_combination(n, k, [&](std::span<const Index> idx) {
    for (int s = 0; s < k; ++s) args[s] = &inc[static_cast<std::size_t>(idx[s])];
    sum += form(typename KLinearForm<Scalar>::Args(args));
  });
  return sum / static_cast<Scalar>(count);
}

/// Same value as complete_ustat for arity 1..3, in O(n) form evaluations.
///
/// Uses the inclusion-exclusion identities over coincident indices, which hold for any
/// symmetric multilinear form:
///   k=2: sum_{i!=j} T(H_i,H_j) = T(S,S) - sum_i T(H_i,H_i)
///   k=3: sum_{distinct} T = T(S,S,S) - 3 sum_i T(H_i,H_i,S) + 2 sum_i T(H_i,H_i,H_i)
/// with S = sum_i H_i. Increments are formed one at a time.
template <typename Scalar>
Scalar ustat_power_sum(const KLinearForm<Scalar>& form, std::span<const Element<Scalar>> sample,
                       const Element<Scalar>& shift) {
  detail::check_ustat_inputs(form, sample, shift);
  const int k = form.arity();
  require(k <= 3, Errc::InvalidArgument, "power-sum path supports arity 1..3");
  const Scalar n = static_cast<Scalar>(sample.size());
  const Element<Scalar> hbar = mean_element(sample) - shift;
  if (k == 1) return form.eval(hbar);

  Scalar diag2 = 0, diag3 = 0, mixed = 0;
  Element<Scalar> h;
  for (const auto& w : sample) {
    h = w - shift;
    if (k == 2) {
      diag2 += form.eval(h, h);
    } else {
      mixed += form.eval(h, h, hbar);
      diag3 += form.eval(h, h, h);
    }
  }
  if (k == 2) return (n * n * form.eval(hbar, hbar) - diag2) / (n * (n - 1));
  return (n * n * n * form.eval(hbar, hbar, hbar) - 3 * n * mixed + 2 * diag3) /
         (n * (n - 1) * (n - 2));
}

/// Complete U-statistic by the cheapest exact route: power sums for arity <= 3,
/// enumeration (subject to `cap`) above.
template <typename Scalar>
Scalar ustat_fast(const KLinearForm<Scalar>& form, std::span<const Element<Scalar>> sample,
                  const Element<Scalar>& shift, double cap = kUstatCap) {
  if (form.arity() <= 3) return ustat_power_sum(form, sample, shift);
  return complete_ustat(form, sample, shift, cap);
}

// ---------------------------------------------------------------------------
// Enumeration oracles over finite-support distributions

/// Exact Var(form(W_1 - theta, ..., W_k - theta)) with theta the exact mean.
template <typename Scalar>
Scalar kernel_variance_enum(const KLinearForm<Scalar>& form,
                            const FiniteSupportDistribution<Scalar>& dist,
                            double cap = kOracleCap) {
  const int k = form.arity();
  const Index m = dist.support_size();
  check_enumeration(std::pow(static_cast<double>(m), k), cap, "kernel variance");
  const auto theta = dist.mean();
  std::vector<Element<Scalar>> inc;
  for (const auto& a : dist.atoms()) inc.push_back(a - theta);

  std::vector<Scalar> values, weights;
  std::vector<const Element<Scalar>*> args(static_cast<std::size_t>(k));
  for_each_tuple(m, k, [&](std::span<const Index> t) {
    Scalar w = 1;
    for (int s = 0; s < k; ++s) {
      args[s] = &inc[static_cast<std::size_t>(t[s])];
      w *= dist.probs()[static_cast<std::size_t>(t[s])];
    }
    values.push_back(form(typename KLinearForm<Scalar>::Args(args)));
    weights.push_back(w);
  });
  Scalar mean = 0;
  for (std::size_t i = 0; i < values.size(); ++i) mean += weights[i] * values[i];
  Scalar var = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    var += weights[i] * (values[i] - mean) * (values[i] - mean);
  return var;
}

/// Exact Var of complete_ustat(form, sample, theta) over all support^n samples.
template <typename Scalar>
Scalar ustat_variance_direct(const KLinearForm<Scalar>& form,
                             const FiniteSupportDistribution<Scalar>& dist, Index n,
                             double cap = kOracleCap) {
  require(n >= form.arity(), Errc::ArityExceedsSample, "n must be at least the arity");
  const Index m = dist.support_size();
  check_enumeration(std::pow(static_cast<double>(m), static_cast<double>(n)), cap,
                    "U-statistic variance");
  const auto theta = dist.mean();
  std::vector<Scalar> values, weights;
  std::vector<Element<Scalar>> sample(static_cast<std::size_t>(n));
  for_each_tuple(m, static_cast<int>(n), [&](std::span<const Index> t) {
    Scalar w = 1;
    for (Index i = 0; i < n; ++i) {
      sample[static_cast<std::size_t>(i)] = dist.atoms()[static_cast<std::size_t>(t[i])];
      w *= dist.probs()[static_cast<std::size_t>(t[i])];
    }
    values.push_back(complete_ustat(form, std::span<const Element<Scalar>>(sample), theta));
    weights.push_back(w);
  });
  Scalar mean = 0;
  for (std::size_t i = 0; i < values.size(); ++i) mean += weights[i] * values[i];
  Scalar var = 0;
  for (std::size_t i = 0; i < values.size(); ++i)
    var += weights[i] * (values[i] - mean) * (values[i] - mean);
  return var;
}

/// max over the other slots' configurations of |E[form(W_1-theta,...,W_k-theta) | all but slot]|.
/// `slot` is 1-based.
template <typename Scalar>
Scalar conditional_degeneracy_gap(const KLinearForm<Scalar>& form,
                                  const FiniteSupportDistribution<Scalar>& dist, int slot,
                                  double cap = kOracleCap) {
  const int k = form.arity();
  require(slot >= 1 && slot <= k, Errc::InvalidArgument, "slot out of range");
  const Index m = dist.support_size();
  check_enumeration(std::pow(static_cast<double>(m), k), cap, "degeneracy gap");
  const auto theta = dist.mean();
  std::vector<Element<Scalar>> inc;
  for (const auto& a : dist.atoms()) inc.push_back(a - theta);

  Scalar worst = 0;
  std::vector<const Element<Scalar>*> args(static_cast<std::size_t>(k));
  for_each_tuple(m, k - 1, [&](std::span<const Index> others) {
    for (int s = 0, o = 0; s < k; ++s)
      if (s != slot - 1) args[s] = &inc[static_cast<std::size_t>(others[o++])];
    Scalar cond = 0;
    for (Index a = 0; a < m; ++a) {
      args[slot - 1] = &inc[static_cast<std::size_t>(a)];
      cond += dist.probs()[static_cast<std::size_t>(a)] *
              form(typename KLinearForm<Scalar>::Args(args));
    }
    using std::abs;
    worst = std::max(worst, abs(cond));
  });
  return worst;
}

/// |form[U^(l)(theta_tilde)] - sum_j C(l,j) form[h^j, U^(l-j)(theta)]| with h = theta - theta_tilde.
template <typename Scalar>
Scalar shift_binomial_gap(const KLinearForm<Scalar>& form, std::span<const Element<Scalar>> sample,
                          const Element<Scalar>& theta, const Element<Scalar>& theta_tilde,
                          double cap = kOracleCap) {
  const int l = form.arity();
  const Scalar lhs = complete_ustat(form, sample, theta_tilde, cap);
  const Element<Scalar> h = theta - theta_tilde;
  Scalar rhs = 0;
  for (int j = 0; j <= l; ++j) {
    const auto partial = form.fix_leading(h, j);
    const Scalar inner = (j == l) ? partial(typename KLinearForm<Scalar>::Args{})
                                  : complete_ustat(partial, sample, theta, cap);
    rhs += static_cast<Scalar>(binomial(l, j)) * inner;
  }
  using std::abs;
  return abs(lhs - rhs);
}

}  // namespace debias
