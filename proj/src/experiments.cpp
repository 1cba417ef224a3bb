#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <exception>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include "debias/baselines.hpp"
#include "debias/functionals.hpp"
#include "debias/product_dp.hpp"
#include "debias/simlab.hpp"

namespace debias {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool same_bits(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

/// Runs fn(i) for i in [0, count) on `threads` workers. Results must be written by index;
/// the first exception is rethrown after all workers stop.
template <typename Fn>
void parallel_for(int count, int threads, Fn&& fn) {
  threads = std::max(1, std::min(threads, count));
  if (threads == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = count;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

const std::set<std::string>& known_estimators() {
  static const std::set<std::string> ids = {"plugin", "jackknife", "hodse", "kl",
                                            "ib",     "ck_full",   "ck_pre"};
  return ids;
}

bool takes_order(const std::string& id) { return id != "plugin" && id != "jackknife"; }

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t mid = v.size() / 2;
  return v.size() % 2 ? v[mid] : 0.5 * (v[mid - 1] + v[mid]);
}

/// Everything one regression replication needs, with the materialized observations
/// built on first use.
class RegressionReplication {
 public:
  RegressionReplication(const RegressionModelConfig& config,
                        const FamilyWithStructure<double>& model, Index d, double gamma, int rep)
      : config_(config), model_(model) {
    const std::uint64_t gamma_key = std::bit_cast<std::uint64_t>(gamma);
    Rng data = make_stream(config.seed, {tag("regression-data"), gamma_key, static_cast<std::uint64_t>(rep)});
    auto [x, y] = gen_regression(config.N_total, d, config.rho, data);
    sample_ = MomentSample::regression(std::move(x), std::move(y));
    ib_seed_ = derive_seed(config.seed, {tag("bootstrap"), gamma_key, static_cast<std::uint64_t>(rep)});
    pre_seed_ = derive_seed(config.seed, {tag("pre"), gamma_key, static_cast<std::uint64_t>(rep)});
  }

  double estimate(const EstimatorSpec& spec) {
    const auto& family = model_.family;
    const std::string& id = spec.estimator;
    if (id == "plugin") return plugin_estimate(family, sample_);
    if (id == "jackknife") return jackknife_estimate(family, sample_);
    if (id == "kl") return kl_blockwise_estimate(family, sample_, spec.order);
    if (id == "ib") return iterated_bootstrap_estimate(family, sample_, spec.order, config_.ib_mc, ib_seed_);
    const auto& obs = observations();
    if (id == "hodse") return hodse_estimate(family, obs, spec.order);

    const std::size_t half = obs.size() / 2;
    const std::span<const ElementD> all(obs);
    const auto part1 = all.subspan(0, half), part2 = all.subspan(half, half);
    const auto pilot = PilotEstimator::eig_floor(PilotEstimator::sample_moments()).as_pilot_fn();
    if (id == "ck_full") return cross_fit(family, pilot, part1, part2, OrderSchedule::fixed(spec.order)).value;
    PermutationPlan plan;
    plan.b = config_.b;
    plan.seed = pre_seed_;
    return pre_cross_fit(family, model_.structure, pilot, part1, part2,
                         OrderSchedule::fixed(spec.order), plan)
        .value;
  }

 private:
  const std::vector<ElementD>& observations() {
    if (observations_.empty()) observations_ = sample_.observations();
    return observations_;
  }

  const RegressionModelConfig& config_;
  const FamilyWithStructure<double>& model_;
  MomentSample sample_;
  std::vector<ElementD> observations_;
  std::uint64_t ib_seed_ = 0;
  std::uint64_t pre_seed_ = 0;
};

}  // namespace

bool operator==(const RatioCell& a, const RatioCell& b) {
  return a.spec == b.spec && same_bits(a.median_ratio, b.median_ratio) &&
         same_bits(a.mean_ratio, b.mean_ratio) && a.failures == b.failures && a.reps == b.reps;
}

std::vector<EstimatorSpec> default_roster() {
  return {{"plugin", 0}, {"jackknife", 0}, {"hodse", 2}, {"kl", 2},
          {"ib", 2},     {"ck_full", 2},   {"ck_pre", 2}};
}

std::string estimator_label(const EstimatorSpec& spec) {
  static const std::map<std::string, std::string> names = {
      {"plugin", "Plug-in"}, {"jackknife", "Jackknife"}, {"hodse", "HODSE"}, {"kl", "K&L"},
      {"ib", "IB"},          {"ck_full", "C&K Full"},    {"ck_pre", "C&K PRE"}};
  const auto it = names.find(spec.estimator);
  const std::string name = it == names.end() ? spec.estimator : it->second;
  if (!takes_order(spec.estimator)) return name;
  return name + " (o" + std::to_string(spec.order) + ")";
}

void RegressionModelConfig::validate() const {
  require(N_total >= 4 && N_total % 2 == 0, Errc::ConfigError, "N_total must be even and >= 4");
  require(rho > 0 && rho < 1, Errc::ConfigError, "rho must lie in (0, 1)");
  require(replications >= 1, Errc::ConfigError, "replications must be >= 1");
  require(!gamma_grid.empty(), Errc::ConfigError, "gamma_grid is empty");
  for (double g : gamma_grid)
    require(g > 0 && g < 1 && dimension_for(N_total, g) >= 2, Errc::ConfigError,
            "gamma " + std::to_string(g) + " gives d < 2 or is outside (0, 1)");
  require(!roster.empty(), Errc::ConfigError, "roster is empty");
  bool has_plugin = false;
  for (const auto& e : roster) {
    require(known_estimators().count(e.estimator) == 1, Errc::ConfigError,
            "unknown estimator '" + e.estimator + "'");
    has_plugin = has_plugin || e.estimator == "plugin";
    if (takes_order(e.estimator))
      require(e.order >= 1 && e.order <= 8, Errc::ConfigError,
              e.estimator + " order must lie in [1, 8]");
    if (e.estimator == "ib")
      require(e.order <= 3, Errc::ConfigError, "ib order must lie in [1, 3]");
  }
  require(has_plugin, Errc::ConfigError, "roster must include plugin");
  require(b >= 1, Errc::ConfigError, "b must be >= 1");
  require(ib_mc >= 1, Errc::ConfigError, "ib_mc must be >= 1");
  require(threads >= 1, Errc::ConfigError, "threads must be >= 1");
}

ReplicationErrors run_ratio_replications(const RegressionModelConfig& config, double gamma) {
  config.validate();
  const Index d = dimension_for(config.N_total, gamma);
  require(d >= 2, Errc::DimensionTooSmall, "regression model needs d >= 2");
  int max_order = 1;
  for (const auto& e : config.roster) max_order = std::max(max_order, e.order);
  Eigen::VectorXd eta = Eigen::VectorXd::Zero(d);
  eta(0) = 1;
  const auto model = build_regression<double>({eta}, std::max(8, max_order));
  const double truth = true_beta_eta();

  ReplicationErrors out;
  out.d = d;
  out.squared_errors.assign(static_cast<std::size_t>(config.replications), {});
  parallel_for(config.replications, config.threads, [&](int rep) {
    RegressionReplication replication(config, model, d, gamma, rep);
    std::vector<double> errors;
    for (const auto& spec : config.roster) {
      double se = kNaN;
      try {
        const double est = replication.estimate(spec);
        if (std::isfinite(est)) se = (est - truth) * (est - truth);
      } catch (const Error&) {
      }
      errors.push_back(se);
    }
    out.squared_errors[static_cast<std::size_t>(rep)] = std::move(errors);
  });
  return out;
}

RatioTable run_ratio_experiment(const RegressionModelConfig& config) {
  config.validate();
  RatioTable table;
  table.config = config;
  const auto plugin_at = static_cast<std::size_t>(
      std::find_if(config.roster.begin(), config.roster.end(),
                   [](const EstimatorSpec& e) { return e.estimator == "plugin"; }) -
      config.roster.begin());

  for (double gamma : config.gamma_grid) {
    const auto raw = run_ratio_replications(config, gamma);
    RatioRow row;
    row.gamma = gamma;
    row.d = raw.d;
    for (std::size_t e = 0; e < config.roster.size(); ++e) {
      RatioCell cell;
      cell.spec = config.roster[e];
      cell.reps = config.replications;
      std::vector<double> ratios;
      double sum_est = 0, sum_plugin = 0;
      for (const auto& errors : raw.squared_errors) {
        const double se = errors[e], sp = errors[plugin_at];
        if (!std::isfinite(se)) {
          ++cell.failures;
          continue;
        }
        if (!std::isfinite(sp) || sp <= 0) continue;
        ratios.push_back(se / sp);
        sum_est += se;
        sum_plugin += sp;
      }
      cell.median_ratio = ratios.empty() ? kNaN : median_of(ratios);
      cell.mean_ratio = ratios.empty() ? kNaN : sum_est / sum_plugin;
      row.cells.push_back(cell);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Normality study

void GramModelConfig::validate() const {
  require(replications >= 1, Errc::EmptyStudy, "study needs at least one replication");
  require(n_per_split >= 2, Errc::ConfigError, "n_per_split must be >= 2");
  require(d >= 1, Errc::ConfigError, "d must be >= 1");
  if (sigma_spec.kind == SigmaSpec::Kind::AR1)
    require(sigma_spec.rho > -1 && sigma_spec.rho < 1, Errc::ConfigError, "AR1 rho must lie in (-1, 1)");
  require(eta1.size() == 0 || eta1.size() == d, Errc::ConfigError, "eta1 must have length d");
  require(eta2.size() == 0 || eta2.size() == d, Errc::ConfigError, "eta2 must have length d");
  require(resolved_eta1().norm() > 0 && resolved_eta2().norm() > 0, Errc::ConfigError,
          "eta vectors must be nonzero");
  require(estimator == "ck_full" || estimator == "ck_pre", Errc::ConfigError,
          "normality study estimator must be ck_full or ck_pre");
  require(standardization == "oracle" || standardization == "plugin", Errc::ConfigError,
          "standardization must be oracle or plugin");
  require(order.mode == OrderSchedule::Mode::LogOfN || order.fixed_order >= 1, Errc::ConfigError,
          "order must be >= 1");
  require(b >= 1, Errc::ConfigError, "b must be >= 1");
  require(oracle_mc_draws >= 2, Errc::ConfigError, "oracle_mc_draws must be >= 2");
  require(threads >= 1, Errc::ConfigError, "threads must be >= 1");
}

Eigen::VectorXd GramModelConfig::resolved_eta1() const {
  return eta1.size() ? eta1 : Eigen::VectorXd::Unit(d, 0);
}

Eigen::VectorXd GramModelConfig::resolved_eta2() const {
  return eta2.size() ? eta2 : Eigen::VectorXd::Unit(d, 0);
}

bool operator==(const GramModelConfig& a, const GramModelConfig& b) {
  return a.n_per_split == b.n_per_split && a.d == b.d && a.sigma_spec.kind == b.sigma_spec.kind &&
         a.sigma_spec.rho == b.sigma_spec.rho && a.eta1 == b.eta1 && a.eta2 == b.eta2 &&
         a.order.mode == b.order.mode && a.order.fixed_order == b.order.fixed_order &&
         a.replications == b.replications && a.seed == b.seed && a.estimator == b.estimator &&
         a.b == b.b && a.standardization == b.standardization &&
         a.oracle_mc_draws == b.oracle_mc_draws && a.threads == b.threads;
}

bool operator==(const KSReport& a, const KSReport& b) {
  if (a.standardized.size() != b.standardized.size()) return false;
  for (std::size_t i = 0; i < a.standardized.size(); ++i)
    if (!same_bits(a.standardized[i], b.standardized[i])) return false;
  return a.estimator == b.estimator && same_bits(a.ks_statistic, b.ks_statistic) &&
         a.replications == b.replications && a.failures == b.failures &&
         a.standardization == b.standardization && same_bits(a.sigma, b.sigma) &&
         same_bits(a.sigma_se, b.sigma_se) && same_bits(a.truth, b.truth) && a.config == b.config;
}

double ks_distance_normal(std::vector<double> values) {
  require(!values.empty(), Errc::EmptyStudy, "KS distance of an empty sample");
  std::sort(values.begin(), values.end());
  const double m = static_cast<double>(values.size());
  double worst = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-values[i] / std::sqrt(2.0));
    worst = std::max({worst, (static_cast<double>(i) + 1.0) / m - cdf, cdf - static_cast<double>(i) / m});
  }
  return worst;
}

KSReport run_ks_study(const GramModelConfig& config) {
  config.validate();
  if (config.n_per_split <= config.d)
    std::clog << "warning: n_per_split <= d; pilots may be singular\n";
  const Index d = config.d;
  const Eigen::MatrixXd sigma = config.sigma_spec.covariance(d);
  const Eigen::VectorXd eta1 = config.resolved_eta1(), eta2 = config.resolved_eta2();
  const double truth = eta1.dot(sigma.llt().solve(eta2));
  const auto model = build_precision<double>({eta1, eta2});
  const auto pilot = PilotEstimator::eig_floor(PilotEstimator::sample_moments()).as_pilot_fn();
  const double root_n = std::sqrt(2.0 * static_cast<double>(config.n_per_split));

  KSReport report;
  report.estimator = config.estimator;
  report.replications = config.replications;
  report.standardization = config.standardization;
  report.truth = truth;
  report.config = config;
  report.sigma = kNaN;
  report.sigma_se = kNaN;
  if (config.standardization == "oracle") {
    const auto oracle = oracle_sigma(GramDescriptor{sigma, eta1, eta2}, config.oracle_mc_draws, config.seed);
    report.sigma = oracle.sigma();
    report.sigma_se = oracle.se;
  }

  std::vector<double> z(static_cast<std::size_t>(config.replications), kNaN);
  parallel_for(config.replications, config.threads, [&](int rep) {
    Rng data = make_stream(config.seed, {tag("gram-data"), static_cast<std::uint64_t>(rep)});
    const Eigen::MatrixXd x = gen_gaussian(2 * config.n_per_split, d, config.sigma_spec, data);
    std::vector<ElementD> obs;
    obs.reserve(static_cast<std::size_t>(x.rows()));
    for (Index i = 0; i < x.rows(); ++i) {
      const Eigen::VectorXd xi = x.row(i).transpose();
      obs.push_back(ElementD::dense(xi * xi.transpose()));
    }
    const std::span<const ElementD> all(obs);
    const auto half = static_cast<std::size_t>(config.n_per_split);
    try {
      double est = 0;
      if (config.estimator == "ck_full") {
        est = cross_fit(model.family, pilot, all.subspan(0, half), all.subspan(half, half), config.order).value;
      } else {
        PermutationPlan plan;
        plan.b = config.b;
        plan.seed = derive_seed(config.seed, {tag("pre"), static_cast<std::uint64_t>(rep)});
        est = pre_cross_fit(model.family, model.structure, pilot, all.subspan(0, half),
                            all.subspan(half, half), config.order, plan)
                  .value;
      }
      double scale = report.sigma;
      if (config.standardization == "plugin") {
        const Eigen::MatrixXd gram = x.transpose() * x / static_cast<double>(x.rows());
        Eigen::LLT<Eigen::MatrixXd> llt(gram);
        if (llt.info() != Eigen::Success) return;
        const Eigen::VectorXd a = x * llt.solve(eta1), b = x * llt.solve(eta2);
        const Eigen::ArrayXd infl = a.array() * b.array();
        scale = std::sqrt((infl - infl.mean()).square().sum() / static_cast<double>(infl.size() - 1));
      }
      const double value = root_n * (est - truth) / scale;
      if (std::isfinite(value)) z[static_cast<std::size_t>(rep)] = value;
    } catch (const Error&) {
    }
  });

  for (double v : z) {
    if (std::isfinite(v)) report.standardized.push_back(v);
    else ++report.failures;
  }
  require(!report.standardized.empty(), Errc::EmptyStudy, "every replication failed");
  report.ks_statistic = ks_distance_normal(report.standardized);
  return report;
}

}  // namespace debias
