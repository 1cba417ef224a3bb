#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "debias/element.hpp"
#include "debias/estimator.hpp"

namespace debias {

/// Observations W_1..W_n whose average is the moment parameter.
///
/// Backed either by explicit Elements or by raw data (X for gram matrices
/// W_i = x_i x_i^T; (X, y) for regression pairs W_i = (x_i x_i^T, x_i y_i)). The raw
/// backings compute means and weighted means as matrix products without materializing
/// the n Elements.
class MomentSample {
 public:
  static MomentSample from_elements(std::vector<ElementD> observations);
  static MomentSample gram(Eigen::MatrixXd x);
  static MomentSample regression(Eigen::MatrixXd x, Eigen::VectorXd y);

  Index size() const;
  ElementKind kind() const;
  Index dim() const;

  ElementD observation(Index i) const;
  std::vector<ElementD> observations() const;
  ElementD mean() const;
  /// n^{-1} sum_i w_i W_i.
  ElementD weighted_mean(const Eigen::VectorXd& weights) const;
  /// Observations [begin, begin + count).
  MomentSample slice(Index begin, Index count) const;

 private:
  enum class Backing { Elements, Gram, Regression };
  Backing backing_ = Backing::Elements;
  std::vector<ElementD> elements_;
  Eigen::MatrixXd x_;
  Eigen::VectorXd y_;
};

/// Clips the eigenvalues of a symmetric matrix from below at epsilon * max(1, ||M||_op).
Eigen::MatrixXd eig_floor(const Eigen::MatrixXd& m, double epsilon);
/// eig_floor applied to the matrix part of an Element.
ElementD eig_floor(const ElementD& e, double epsilon);

ElementD fit_sample_moments(const MomentSample& sample);
ElementD fit_sample_moments(std::span<const ElementD> sample);
/// Coordinate-wise median of block means over a contiguous partition into `blocks`
/// nearly equal blocks (sizes differ by at most one, larger blocks first).
ElementD fit_median_of_means(std::span<const ElementD> sample, int blocks);
ElementD fit_median_of_means(const MomentSample& sample, int blocks);

class PilotEstimator {
 public:
  enum class Variant { SampleMoments, MedianOfMeans, EigFloor };

  static PilotEstimator sample_moments();
  static PilotEstimator median_of_means(int blocks);
  static PilotEstimator eig_floor(PilotEstimator inner, double epsilon = 1e-6);

  Variant variant() const { return variant_; }
  ElementD fit(std::span<const ElementD> sample) const;
  ElementD fit(const MomentSample& sample) const;
  PilotFn<double> as_pilot_fn() const;

 private:
  Variant variant_ = Variant::SampleMoments;
  int blocks_ = 1;
  double epsilon_ = 1e-6;
  std::shared_ptr<const PilotEstimator> inner_;
};

/// f(mean of the sample).
double plugin_estimate(const DerivativeFamily<double>& family, const MomentSample& sample);

/// n f(all) - (n-1) mean_i f(all but i).
double jackknife_estimate(const DerivativeFamily<double>& family, const MomentSample& sample);

/// Order-q iterated Gaussian-multiplier bootstrap bias correction.
///
/// A draw at state v is v + n^{-1} sum_i g_i (W_i - v), g_i iid N(0,1). The draws form a
/// tree with `mc_size` children per node and depth q; with L_i the average of f over
/// depth-i nodes, sum_{j<=q} (-1)^j B^j f = sum_{i<=q} (-1)^i C(q+1, i+1) L_i.
/// Draws leaving the domain are redrawn, at most 100 times.
double iterated_bootstrap_estimate(const DerivativeFamily<double>& family,
                                   const MomentSample& sample, int order, int mc_size,
                                   std::uint64_t seed);

/// One-sided expansion on the full sample, anchored at the same-sample mean.
double hodse_estimate(const DerivativeFamily<double>& family, std::span<const ElementD> sample,
                      int order);

/// Blockwise estimator with 1 + s(s+1)/2 contiguous blocks: block 0 is the pilot, level k
/// uses k fresh blocks. Remainder observations go to block 0.
double kl_blockwise_estimate(const DerivativeFamily<double>& family, const MomentSample& sample,
                             int order);

/// Block boundaries used by kl_blockwise_estimate: {begin, count} per block.
std::vector<std::pair<Index, Index>> kl_block_layout(Index n, int order);

}  // namespace debias
