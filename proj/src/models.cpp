#include <cmath>

#include "debias/error.hpp"
#include "debias/simlab.hpp"

namespace debias {

Eigen::MatrixXd ar1_covariance(Index d, double rho) {
  Eigen::MatrixXd sigma(d, d);
  for (Index j = 0; j < d; ++j)
    for (Index k = 0; k < d; ++k) sigma(j, k) = std::pow(rho, static_cast<double>(std::abs(j - k)));
  return sigma;
}

Eigen::MatrixXd SigmaSpec::covariance(Index d) const {
  if (kind == Kind::Identity) return Eigen::MatrixXd::Identity(d, d);
  return ar1_covariance(d, rho);
}

namespace {

Eigen::MatrixXd cholesky_factor(const Eigen::MatrixXd& sigma) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  require(llt.info() == Eigen::Success, Errc::InvalidArgument, "covariance is not positive definite");
  return llt.matrixL();
}

}  // namespace

std::pair<Eigen::MatrixXd, Eigen::VectorXd> gen_regression(Index n, Index d, double rho, Rng& rng) {
  require(d >= 2, Errc::DimensionTooSmall, "regression model needs d >= 2");
  require(n >= 1, Errc::InvalidArgument, "regression model needs n >= 1");
  const Eigen::MatrixXd lower = cholesky_factor(ar1_covariance(d, rho));
  std::normal_distribution<double> z;
  Eigen::MatrixXd raw(n, d);
  Eigen::VectorXd eps(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < d; ++j) raw(i, j) = z(rng);
    eps(i) = z(rng);
  }
  Eigen::MatrixXd x = raw * lower.transpose();
  Eigen::VectorXd y(n);
  for (Index i = 0; i < n; ++i) {
    const double x1 = x(i, 0), x2 = x(i, 1);
    y(i) = std::sin(x1) + 0.5 * (x2 * x2 - 0.6) + (1.0 + 0.3 * x1 * x1) * eps(i);
  }
  return {std::move(x), std::move(y)};
}

double true_beta_eta() { return std::exp(-0.5); }

double true_beta_eta(const Eigen::VectorXd& eta) {
  require(eta.size() >= 1, Errc::DimensionMismatch, "eta must have at least one coordinate");
  return eta(0) * std::exp(-0.5);
}

Eigen::MatrixXd gen_gaussian(Index n, Index d, const SigmaSpec& sigma, Rng& rng) {
  require(n >= 1 && d >= 1, Errc::InvalidArgument, "gaussian sample needs n, d >= 1");
  std::normal_distribution<double> z;
  Eigen::MatrixXd raw(n, d);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < d; ++j) raw(i, j) = z(rng);
  if (sigma.kind == SigmaSpec::Kind::Identity) return raw;
  return raw * cholesky_factor(sigma.covariance(d)).transpose();
}

Index dimension_for(Index n_total, double gamma) {
  const double raw = std::pow(static_cast<double>(n_total), gamma);
  const double nearest = std::round(raw);
  // pow(1000, 1/3) style inputs land a hair below the integer they mean.
  if (std::abs(raw - nearest) <= 1e-9 * std::max(1.0, nearest)) return static_cast<Index>(nearest);
  return static_cast<Index>(std::floor(raw));
}

double OracleSigma::sigma() const { return std::sqrt(variance); }

OracleSigma oracle_sigma(const ModelDescriptor& model, Index mc_draws, std::uint64_t seed) {
  require(mc_draws >= 2, Errc::InvalidArgument, "oracle sigma needs at least two draws");
  constexpr Index kChunk = 10000;
  Rng rng = make_stream(seed, {tag("oracle-sigma")});

  // Draws are generated in chunks; the influence values are kept for a two-pass variance.
  std::vector<double> influence;
  influence.reserve(static_cast<std::size_t>(mc_draws));
  if (const auto* g = std::get_if<GramDescriptor>(&model)) {
    const Index d = g->sigma.rows();
    require(g->eta1.size() == d && g->eta2.size() == d, Errc::DimensionMismatch,
            "eta dims must match sigma");
    require(g->eta1.norm() > 0 && g->eta2.norm() > 0, Errc::InvalidArgument,
            "eta vectors must be nonzero");
    Eigen::LLT<Eigen::MatrixXd> llt(g->sigma);
    require(llt.info() == Eigen::Success, Errc::InvalidArgument, "sigma is not positive definite");
    const Eigen::VectorXd u = llt.solve(g->eta1);
    const Eigen::VectorXd v = llt.solve(g->eta2);
    const Eigen::MatrixXd lower = llt.matrixL();
    std::normal_distribution<double> z;
    for (Index done = 0; done < mc_draws; done += kChunk) {
      const Index m = std::min(kChunk, mc_draws - done);
      Eigen::MatrixXd raw(m, d);
      for (Index i = 0; i < m; ++i)
        for (Index j = 0; j < d; ++j) raw(i, j) = z(rng);
      const Eigen::MatrixXd x = raw * lower.transpose();
      const Eigen::VectorXd a = x * u, b = x * v;
      for (Index i = 0; i < m; ++i) influence.push_back(a(i) * b(i));
    }
  } else {
    const auto& r = std::get<RegressionDescriptor>(model);
    require(r.eta.size() == r.d, Errc::DimensionMismatch, "eta dim must match d");
    require(r.eta.norm() > 0, Errc::InvalidArgument, "eta must be nonzero");
    const Eigen::MatrixXd sigma = ar1_covariance(r.d, r.rho);
    const Eigen::VectorXd w = sigma.llt().solve(r.eta);
    const double beta1 = true_beta_eta();
    for (Index done = 0; done < mc_draws; done += kChunk) {
      const Index m = std::min(kChunk, mc_draws - done);
      auto [x, y] = gen_regression(m, r.d, r.rho, rng);
      const Eigen::VectorXd residual = y - beta1 * x.col(0);
      const Eigen::VectorXd a = x * w;
      for (Index i = 0; i < m; ++i) influence.push_back(a(i) * residual(i));
    }
  }

  const double count = static_cast<double>(influence.size());
  double mean = 0;
  for (double v : influence) mean += v;
  mean /= count;
  double m2 = 0, m4 = 0;
  for (double v : influence) {
    const double c = (v - mean) * (v - mean);
    m2 += c;
    m4 += c * c;
  }
  m2 /= count;
  m4 /= count;
  OracleSigma out;
  out.variance = m2 * count / (count - 1.0);
  out.se = std::sqrt(std::max(0.0, m4 - m2 * m2) / count);
  return out;
}

}  // namespace debias
