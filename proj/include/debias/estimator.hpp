#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "debias/element.hpp"
#include "debias/error.hpp"
#include "debias/ustat.hpp"

namespace debias {

/// A functional f together with its Frechet derivative forms up to max_order.
template <typename Scalar>
struct DerivativeFamily {
  using ElementType = Element<Scalar>;

  std::function<Scalar(const ElementType&)> value;
  /// Symmetric k-linear form D^k f(x); arity k.
  std::function<KLinearForm<Scalar>(const ElementType&, int)> derivative;
  int max_order = 1;
  /// Empty when x is admissible; otherwise a description of the violation.
  std::function<std::optional<std::string>(const ElementType&)> domain_guard;
  ElementKind kind = ElementKind::DenseMatrix;
  Index dim = 0;

  void check_domain(const ElementType& x) const {
    require(x.kind() == kind && x.dim() == dim, Errc::DimensionMismatch,
            "point does not match the family's carrier");
    if (domain_guard) {
      if (auto violation = domain_guard(x)) fail(Errc::PilotOutsideDomain, *violation);
    }
  }
};

struct OrderSchedule {
  enum class Mode { Fixed, LogOfN };
  Mode mode = Mode::Fixed;
  int fixed_order = 1;

  static OrderSchedule fixed(int s) { return {Mode::Fixed, s}; }
  static OrderSchedule log_of_n() { return {Mode::LogOfN, 0}; }
};

/// Fixed(s) -> s;  LogOfN -> floor(log(e n)) = floor(1 + ln n).
inline int resolve_order(const OrderSchedule& schedule, Index n) {
  require(n >= 1, Errc::InvalidArgument, "order schedule needs n >= 1");
  if (schedule.mode == OrderSchedule::Mode::Fixed) return schedule.fixed_order;
  return static_cast<int>(std::floor(1.0 + std::log(static_cast<double>(n))));
}

template <typename Scalar>
struct OneSidedReport {
  Scalar value = 0;
  /// Entry k is (1/k!) D^k f(pilot)[U^(k)(pilot)]; entry 0 is f(pilot).
  std::vector<Scalar> per_order_terms;
  Element<Scalar> pilot;
  int s = 0;
};

template <typename Scalar>
struct CrossFitReport {
  Scalar value = 0;
  OneSidedReport<Scalar> side_a;
  OneSidedReport<Scalar> side_b;
};

template <typename Scalar>
using PilotFn = std::function<Element<Scalar>(std::span<const Element<Scalar>>)>;

/// f(pilot) + sum_{k=1..s} (1/k!) D^k f(pilot)[U^(k)(pilot)] on `sample`.
///
/// Orders up to 3 are evaluated through power sums in O(n) form evaluations; higher
/// orders enumerate index tuples and are refused above kUstatCap (use the
/// permutation-randomized path in product_dp.hpp instead).
template <typename Scalar>
OneSidedReport<Scalar> one_sided(const DerivativeFamily<Scalar>& family,
                                 const Element<Scalar>& pilot,
                                 std::span<const Element<Scalar>> sample, int s) {
  require(s >= 0, Errc::InvalidArgument, "order must be nonnegative");
  require(s <= family.max_order, Errc::OrderExceedsFamily,
          "order " + std::to_string(s) + " exceeds family max order " +
              std::to_string(family.max_order));
  require(!sample.empty(), Errc::EmptySample, "one-sided estimator on an empty sample");
  family.check_domain(pilot);

  OneSidedReport<Scalar> report;
  report.pilot = pilot;
  report.s = s;
  report.per_order_terms.reserve(static_cast<std::size_t>(s) + 1);
  report.per_order_terms.push_back(family.value(pilot));

  Scalar inv_factorial = 1;
  for (int k = 1; k <= s; ++k) {
    inv_factorial /= static_cast<Scalar>(k);
    const auto form = family.derivative(pilot, k);
    report.per_order_terms.push_back(inv_factorial * ustat_fast(form, sample, pilot));
  }
  for (Scalar t : report.per_order_terms) report.value += t;
  return report;
}

template <typename Scalar>
CrossFitReport<Scalar> cross_fit(const DerivativeFamily<Scalar>& family,
                                 const PilotFn<Scalar>& pilot_fn,
                                 std::span<const Element<Scalar>> part1,
                                 std::span<const Element<Scalar>> part2,
                                 const OrderSchedule& schedule) {
  require(part1.size() == part2.size(), Errc::UnequalSplit,
          "cross-fitting needs equal halves (" + std::to_string(part1.size()) + " vs " +
              std::to_string(part2.size()) + ")");
  require(!part1.empty(), Errc::EmptySample, "cross-fitting on empty halves");
  const int s = resolve_order(schedule, static_cast<Index>(part1.size()));

  CrossFitReport<Scalar> report;
  report.side_a = one_sided(family, pilot_fn(part2), part1, s);
  report.side_b = one_sided(family, pilot_fn(part1), part2, s);
  report.value = (report.side_a.value + report.side_b.value) / Scalar(2);
  return report;
}

/// Largest pairwise difference of one_sided across pilots. Zero for polynomial
/// functionals of degree <= s.
template <typename Scalar>
Scalar pilot_invariance_gap(const DerivativeFamily<Scalar>& family,
                            std::span<const Element<Scalar>> sample, int s,
                            std::span<const Element<Scalar>> pilots) {
  std::vector<Scalar> values;
  for (const auto& p : pilots) values.push_back(one_sided(family, p, sample, s).value);
  Scalar worst = 0;
  using std::abs;
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = i + 1; j < values.size(); ++j)
      worst = std::max(worst, abs(values[i] - values[j]));
  return worst;
}

/// |E[one_sided(family, pilot, sample, s)] - f(theta)| with the expectation taken by
/// enumerating all support^n samples.
template <typename Scalar>
Scalar unbiasedness_gap(const DerivativeFamily<Scalar>& family,
                        const FiniteSupportDistribution<Scalar>& dist, Index n,
                        const Element<Scalar>& pilot, int s, double cap = kOracleCap) {
  const Index m = dist.support_size();
  check_enumeration(std::pow(static_cast<double>(m), static_cast<double>(n)), cap,
                    "unbiasedness gap");
  std::vector<Element<Scalar>> sample(static_cast<std::size_t>(n));
  Scalar expectation = 0;
  for_each_tuple(m, static_cast<int>(n), [&](std::span<const Index> t) {
    Scalar w = 1;
    for (Index i = 0; i < n; ++i) {
      sample[static_cast<std::size_t>(i)] = dist.atoms()[static_cast<std::size_t>(t[i])];
      w *= dist.probs()[static_cast<std::size_t>(t[i])];
    }
    expectation += w * one_sided(family, pilot, std::span<const Element<Scalar>>(sample), s).value;
  });
  using std::abs;
  return abs(expectation - family.value(dist.mean()));
}

}  // namespace debias
