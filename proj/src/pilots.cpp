#include <algorithm>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "debias/baselines.hpp"
#include "debias/ustat.hpp"

namespace debias {

MomentSample MomentSample::from_elements(std::vector<ElementD> observations) {
  require(!observations.empty(), Errc::EmptySample, "moment sample needs observations");
  for (const auto& e : observations) observations.front().check_compatible(e);
  MomentSample s;
  s.backing_ = Backing::Elements;
  s.elements_ = std::move(observations);
  return s;
}

MomentSample MomentSample::gram(Eigen::MatrixXd x) {
  require(x.rows() > 0 && x.cols() > 0, Errc::EmptySample, "gram sample needs data");
  MomentSample s;
  s.backing_ = Backing::Gram;
  s.x_ = std::move(x);
  return s;
}

MomentSample MomentSample::regression(Eigen::MatrixXd x, Eigen::VectorXd y) {
  require(x.rows() > 0 && x.cols() > 0, Errc::EmptySample, "regression sample needs data");
  require(y.size() == x.rows(), Errc::DimensionMismatch, "X and y row counts differ");
  MomentSample s;
  s.backing_ = Backing::Regression;
  s.x_ = std::move(x);
  s.y_ = std::move(y);
  return s;
}

Index MomentSample::size() const {
  return backing_ == Backing::Elements ? static_cast<Index>(elements_.size()) : x_.rows();
}

ElementKind MomentSample::kind() const {
  switch (backing_) {
    case Backing::Elements: return elements_.front().kind();
    case Backing::Gram: return ElementKind::DenseMatrix;
    case Backing::Regression: return ElementKind::MomentPair;
  }
  return ElementKind::DenseMatrix;
}

Index MomentSample::dim() const {
  return backing_ == Backing::Elements ? elements_.front().dim() : x_.cols();
}

ElementD MomentSample::observation(Index i) const {
  require(i >= 0 && i < size(), Errc::InvalidArgument, "observation index out of range");
  if (backing_ == Backing::Elements) return elements_[static_cast<std::size_t>(i)];
  const Eigen::VectorXd xi = x_.row(i).transpose();
  if (backing_ == Backing::Gram) return ElementD::dense(xi * xi.transpose());
  return ElementD::pair(xi * xi.transpose(), xi * y_(i));
}

std::vector<ElementD> MomentSample::observations() const {
  if (backing_ == Backing::Elements) return elements_;
  std::vector<ElementD> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (Index i = 0; i < size(); ++i) out.push_back(observation(i));
  return out;
}

ElementD MomentSample::mean() const {
  if (backing_ == Backing::Elements) return mean_element(std::span<const ElementD>(elements_));
  const double inv_n = 1.0 / static_cast<double>(size());
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(dim(), dim());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(x_.transpose(), inv_n);
  gram = gram.selfadjointView<Eigen::Lower>();
  if (backing_ == Backing::Gram) return ElementD::dense(std::move(gram));
  return ElementD::pair(std::move(gram), inv_n * (x_.transpose() * y_));
}

ElementD MomentSample::weighted_mean(const Eigen::VectorXd& weights) const {
  require(weights.size() == size(), Errc::DimensionMismatch, "one weight per observation");
  const double inv_n = 1.0 / static_cast<double>(size());
  if (backing_ == Backing::Elements) {
    ElementD acc = ElementD::zero(kind(), dim());
    for (Index i = 0; i < size(); ++i) acc.add_scaled(weights(i), elements_[static_cast<std::size_t>(i)]);
    return acc *= inv_n;
  }
  const Eigen::MatrixXd weighted = x_.array().colwise() * weights.array();
  Eigen::MatrixXd gram = inv_n * (x_.transpose() * weighted);
  if (backing_ == Backing::Gram) return ElementD::dense(std::move(gram));
  return ElementD::pair(std::move(gram), inv_n * (weighted.transpose() * y_));
}

MomentSample MomentSample::slice(Index begin, Index count) const {
  require(begin >= 0 && count > 0 && begin + count <= size(), Errc::InvalidArgument,
          "slice out of range");
  MomentSample s;
  s.backing_ = backing_;
  if (backing_ == Backing::Elements) {
    s.elements_.assign(elements_.begin() + begin, elements_.begin() + begin + count);
  } else {
    s.x_ = x_.middleRows(begin, count);
    if (backing_ == Backing::Regression) s.y_ = y_.segment(begin, count);
  }
  return s;
}

Eigen::MatrixXd eig_floor(const Eigen::MatrixXd& m, double epsilon) {
  require(epsilon > 0, Errc::InvalidArgument, "eig_floor epsilon must be positive");
  require(m.rows() == m.cols(), Errc::DimensionMismatch, "eig_floor needs a square matrix");
  const double scale = std::max(1.0, m.norm());
  require((m - m.transpose()).norm() <= 1e-10 * scale, Errc::NonSymmetric,
          "eig_floor needs a symmetric matrix");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
  const Eigen::VectorXd& lambda = eig.eigenvalues();
  const double op_norm = lambda.cwiseAbs().maxCoeff();
  const double floor = epsilon * std::max(1.0, op_norm);
  if (lambda.minCoeff() >= floor) return m;
  const Eigen::VectorXd clipped = lambda.cwiseMax(floor);
  Eigen::MatrixXd out = eig.eigenvectors() * clipped.asDiagonal() * eig.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

ElementD eig_floor(const ElementD& e, double epsilon) {
  ElementD out = e;
  out.matrix() = eig_floor(e.matrix(), epsilon);
  return out;
}

ElementD fit_sample_moments(const MomentSample& sample) { return sample.mean(); }

ElementD fit_sample_moments(std::span<const ElementD> sample) { return mean_element(sample); }

ElementD fit_median_of_means(std::span<const ElementD> sample, int blocks) {
  const auto n = static_cast<Index>(sample.size());
  require(n >= 1, Errc::EmptySample, "median of means on an empty sample");
  require(blocks >= 1 && blocks <= n, Errc::TooManyBlocks,
          std::to_string(blocks) + " blocks for " + std::to_string(n) + " observations");
  std::vector<std::vector<double>> block_means;
  const Index base = n / blocks;
  const Index extra = n % blocks;
  Index begin = 0;
  for (int b = 0; b < blocks; ++b) {
    const Index count = base + (b < extra ? 1 : 0);
    block_means.push_back(mean_element(sample.subspan(static_cast<std::size_t>(begin),
                                                      static_cast<std::size_t>(count)))
                              .flatten());
    begin += count;
  }
  std::vector<double> median(block_means.front().size());
  std::vector<double> column(static_cast<std::size_t>(blocks));
  for (std::size_t c = 0; c < median.size(); ++c) {
    for (int b = 0; b < blocks; ++b) column[b] = block_means[b][c];
    std::sort(column.begin(), column.end());
    const std::size_t mid = column.size() / 2;
    median[c] = column.size() % 2 ? column[mid] : 0.5 * (column[mid - 1] + column[mid]);
  }
  return ElementD::unflatten(sample.front().kind(), sample.front().dim(), median);
}

ElementD fit_median_of_means(const MomentSample& sample, int blocks) {
  const auto obs = sample.observations();
  return fit_median_of_means(std::span<const ElementD>(obs), blocks);
}

PilotEstimator PilotEstimator::sample_moments() { return PilotEstimator{}; }

PilotEstimator PilotEstimator::median_of_means(int blocks) {
  require(blocks >= 1, Errc::InvalidArgument, "median of means needs blocks >= 1");
  PilotEstimator p;
  p.variant_ = Variant::MedianOfMeans;
  p.blocks_ = blocks;
  return p;
}

PilotEstimator PilotEstimator::eig_floor(PilotEstimator inner, double epsilon) {
  require(epsilon > 0, Errc::InvalidArgument, "eig floor epsilon must be positive");
  PilotEstimator p;
  p.variant_ = Variant::EigFloor;
  p.epsilon_ = epsilon;
  p.inner_ = std::make_shared<const PilotEstimator>(std::move(inner));
  return p;
}

ElementD PilotEstimator::fit(std::span<const ElementD> sample) const {
  switch (variant_) {
    case Variant::SampleMoments: return fit_sample_moments(sample);
    case Variant::MedianOfMeans: return fit_median_of_means(sample, blocks_);
    case Variant::EigFloor: return debias::eig_floor(inner_->fit(sample), epsilon_);
  }
  return fit_sample_moments(sample);
}

ElementD PilotEstimator::fit(const MomentSample& sample) const {
  switch (variant_) {
    case Variant::SampleMoments: return fit_sample_moments(sample);
    case Variant::MedianOfMeans: return fit_median_of_means(sample, blocks_);
    case Variant::EigFloor: return debias::eig_floor(inner_->fit(sample), epsilon_);
  }
  return fit_sample_moments(sample);
}

PilotFn<double> PilotEstimator::as_pilot_fn() const {
  return [self = *this](std::span<const ElementD> sample) { return self.fit(sample); };
}

}  // namespace debias
