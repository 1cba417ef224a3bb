#include <cmath>
#include <functional>

#include "debias/baselines.hpp"
#include "debias/random.hpp"
#include "debias/ustat.hpp"

namespace debias {

namespace {

constexpr int kMaxRedraws = 100;

double guarded_value(const DerivativeFamily<double>& family, const ElementD& x) {
  family.check_domain(x);
  return family.value(x);
}

}  // namespace

double plugin_estimate(const DerivativeFamily<double>& family, const MomentSample& sample) {
  return guarded_value(family, sample.mean());
}

double jackknife_estimate(const DerivativeFamily<double>& family, const MomentSample& sample) {
  const Index n = sample.size();
  require(n >= 2, Errc::InsufficientData, "jackknife needs at least two observations");
  const ElementD mean = sample.mean();
  const double full = guarded_value(family, mean);
  const double nd = static_cast<double>(n);
  const ElementD total = nd * mean;
  double deleted_sum = 0;
  for (Index i = 0; i < n; ++i) {
    ElementD deleted = total - sample.observation(i);
    deleted *= 1.0 / (nd - 1.0);
    deleted_sum += guarded_value(family, deleted);
  }
  return nd * full - (nd - 1.0) * (deleted_sum / nd);
}

double iterated_bootstrap_estimate(const DerivativeFamily<double>& family,
                                   const MomentSample& sample, int order, int mc_size,
                                   std::uint64_t seed) {
  require(order >= 0 && order <= 3, Errc::InvalidArgument, "bootstrap order must be in [0, 3]");
  require(mc_size >= 1, Errc::InvalidArgument, "bootstrap needs mc_size >= 1");
  const Index n = sample.size();
  const ElementD root = sample.mean();
  const double root_value = guarded_value(family, root);
  if (order == 0) return root_value;

  std::vector<double> level_sum(static_cast<std::size_t>(order) + 1, 0.0);
  std::vector<double> level_count(static_cast<std::size_t>(order) + 1, 0.0);
  level_sum[0] = root_value;
  level_count[0] = 1;
  const double inv_n = 1.0 / static_cast<double>(n);

  // Depth-first walk so that only one path of draws is alive at a time.
  std::function<void(const ElementD&, int, std::uint64_t)> expand =
      [&](const ElementD& node, int depth, std::uint64_t node_id) {
        for (int c = 0; c < mc_size; ++c) {
          const std::uint64_t child_id = node_id * static_cast<std::uint64_t>(mc_size) + c + 1;
          ElementD child;
          bool accepted = false;
          for (int attempt = 0; attempt < kMaxRedraws && !accepted; ++attempt) {
            Rng gen = make_stream(seed, {tag("bootstrap"), static_cast<std::uint64_t>(depth),
                                         child_id, static_cast<std::uint64_t>(attempt)});
            const Eigen::VectorXd g = standard_normal(n, gen);
            child = sample.weighted_mean(g);
            child.add_scaled(1.0 - g.sum() * inv_n, node);
            accepted = !family.domain_guard || !family.domain_guard(child);
          }
          require(accepted, Errc::DegenerateResample,
                  "bootstrap draw stayed outside the domain after 100 redraws");
          level_sum[static_cast<std::size_t>(depth)] += family.value(child);
          level_count[static_cast<std::size_t>(depth)] += 1;
          if (depth < order) expand(child, depth + 1, child_id);
        }
      };
  expand(root, 1, 0);

  double corrected = 0;
  for (int i = 0; i <= order; ++i) {
    const double level_mean = level_sum[static_cast<std::size_t>(i)] / level_count[static_cast<std::size_t>(i)];
    const double sign = i % 2 ? -1.0 : 1.0;
    corrected += sign * binomial(order + 1, i + 1) * level_mean;
  }
  return corrected;
}

double hodse_estimate(const DerivativeFamily<double>& family, std::span<const ElementD> sample,
                      int order) {
  require(!sample.empty(), Errc::EmptySample, "HODSE on an empty sample");
  return one_sided(family, mean_element(sample), sample, order).value;
}

std::vector<std::pair<Index, Index>> kl_block_layout(Index n, int order) {
  require(order >= 0, Errc::InvalidArgument, "order must be nonnegative");
  const Index blocks = 1 + static_cast<Index>(order) * (order + 1) / 2;
  require(n >= blocks, Errc::InsufficientData,
          "blockwise estimator needs " + std::to_string(blocks) + " observations, got " +
              std::to_string(n));
  const Index size = n / blocks;
  const Index remainder = n - blocks * size;
  std::vector<std::pair<Index, Index>> layout;
  layout.emplace_back(0, size + remainder);
  for (Index b = 1; b < blocks; ++b) layout.emplace_back(remainder + b * size, size);
  return layout;
}

double kl_blockwise_estimate(const DerivativeFamily<double>& family, const MomentSample& sample,
                             int order) {
  require(order <= family.max_order, Errc::OrderExceedsFamily, "order exceeds family max order");
  const auto layout = kl_block_layout(sample.size(), order);
  const ElementD pilot = sample.slice(layout[0].first, layout[0].second).mean();
  double value = guarded_value(family, pilot);

  std::size_t next = 1;
  double inv_factorial = 1;
  for (int k = 1; k <= order; ++k) {
    inv_factorial /= k;
    std::vector<ElementD> increments;
    for (int j = 0; j < k; ++j, ++next)
      increments.push_back(sample.slice(layout[next].first, layout[next].second).mean() - pilot);
    std::vector<const ElementD*> args;
    for (const auto& h : increments) args.push_back(&h);
    value += inv_factorial * family.derivative(pilot, k)(args);
  }
  return value;
}

}  // namespace debias
