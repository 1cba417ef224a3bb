#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "debias/estimator.hpp"
#include "debias/random.hpp"

namespace debias {

// ---------------------------------------------------------------------------
// Data generators

Eigen::MatrixXd ar1_covariance(Index d, double rho);

struct SigmaSpec {
  enum class Kind { Identity, AR1 };
  Kind kind = Kind::Identity;
  double rho = 0;

  static SigmaSpec identity() { return {}; }
  static SigmaSpec ar1(double rho) { return {Kind::AR1, rho}; }
  Eigen::MatrixXd covariance(Index d) const;
};

/// n rows of X ~ N(0, Sigma), Sigma_jk = rho^|j-k|, and
/// Y = sin(X_1) + (X_2^2 - 0.6)/2 + (1 + 0.3 X_1^2) eps.
/// Each row draws its d normals then eps, in that order.
std::pair<Eigen::MatrixXd, Eigen::VectorXd> gen_regression(Index n, Index d, double rho, Rng& rng);

/// eta^T beta for eta = e_1: exp(-1/2).
double true_beta_eta();
/// eta^T beta for a general eta; beta = exp(-1/2) e_1.
double true_beta_eta(const Eigen::VectorXd& eta);

/// n i.i.d. N(0, Sigma) rows.
Eigen::MatrixXd gen_gaussian(Index n, Index d, const SigmaSpec& sigma, Rng& rng);

/// floor(N^gamma), guarded against the rounding of pow at exact integers.
Index dimension_for(Index n_total, double gamma);

// ---------------------------------------------------------------------------
// Configurations

/// Estimator ids: plugin, jackknife, hodse, kl, ib, ck_full, ck_pre.
struct EstimatorSpec {
  std::string estimator;
  int order = 0;

  friend bool operator==(const EstimatorSpec&, const EstimatorSpec&) = default;
};

std::vector<EstimatorSpec> default_roster();
std::string estimator_label(const EstimatorSpec& spec);

struct RegressionModelConfig {
  Index N_total = 1000;
  std::vector<double> gamma_grid = {0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45,
                                    0.50, 0.55, 0.60, 0.65, 0.70, 0.75};
  double rho = 0.6;
  int replications = 100;
  std::uint64_t seed = 20260101;
  std::vector<EstimatorSpec> roster = default_roster();
  int b = 1;
  int ib_mc = 40;
  int threads = 1;

  void validate() const;
  friend bool operator==(const RegressionModelConfig&, const RegressionModelConfig&) = default;
};

struct GramModelConfig {
  Index n_per_split = 1000;
  Index d = 10;
  SigmaSpec sigma_spec = SigmaSpec::ar1(0.6);
  /// Empty means e_1.
  Eigen::VectorXd eta1;
  Eigen::VectorXd eta2;
  OrderSchedule order = OrderSchedule::fixed(2);
  int replications = 500;
  std::uint64_t seed = 20260101;
  /// ck_full or ck_pre.
  std::string estimator = "ck_full";
  int b = 1;
  /// oracle or plugin.
  std::string standardization = "oracle";
  Index oracle_mc_draws = 1000000;
  int threads = 1;

  void validate() const;
  Eigen::VectorXd resolved_eta1() const;
  Eigen::VectorXd resolved_eta2() const;
};

bool operator==(const GramModelConfig& a, const GramModelConfig& b);

// ---------------------------------------------------------------------------
// Results

struct RatioCell {
  EstimatorSpec spec;
  /// Median over replications of SE_estimator / SE_plugin. NaN when no replication succeeded.
  double median_ratio = 0;
  /// Mean squared error of the estimator over that of plug-in.
  double mean_ratio = 0;
  int failures = 0;
  int reps = 0;

  friend bool operator==(const RatioCell& a, const RatioCell& b);
};

struct RatioRow {
  double gamma = 0;
  Index d = 0;
  std::vector<RatioCell> cells;

  friend bool operator==(const RatioRow&, const RatioRow&) = default;
};

struct RatioTable {
  RegressionModelConfig config;
  std::vector<RatioRow> rows;

  friend bool operator==(const RatioTable&, const RatioTable&) = default;
};

/// Raw per-replication squared errors for one gamma; NaN marks a failure.
struct ReplicationErrors {
  Index d = 0;
  /// errors[rep][estimator]
  std::vector<std::vector<double>> squared_errors;
};

struct KSReport {
  std::string estimator;
  double ks_statistic = 0;
  int replications = 0;
  int failures = 0;
  /// "oracle" (sigma below is the Monte Carlo value) or "plugin".
  std::string standardization;
  double sigma = 0;
  double sigma_se = 0;
  double truth = 0;
  std::vector<double> standardized;
  GramModelConfig config;

  friend bool operator==(const KSReport&, const KSReport&);
};

// ---------------------------------------------------------------------------
// Experiments

/// Squared errors of every roster estimator for every replication at one gamma.
ReplicationErrors run_ratio_replications(const RegressionModelConfig& config, double gamma);

RatioTable run_ratio_experiment(const RegressionModelConfig& config);

/// sup_x |F_n(x) - Phi(x)| of the sample against the standard normal.
double ks_distance_normal(std::vector<double> values);

KSReport run_ks_study(const GramModelConfig& config);

struct GramDescriptor {
  Eigen::MatrixXd sigma;
  Eigen::VectorXd eta1;
  Eigen::VectorXd eta2;
};

struct RegressionDescriptor {
  Index d = 2;
  double rho = 0.6;
  Eigen::VectorXd eta;
};

using ModelDescriptor = std::variant<GramDescriptor, RegressionDescriptor>;

struct OracleSigma {
  /// Monte Carlo variance of the influence function.
  double variance = 0;
  /// Standard error of that variance.
  double se = 0;
  double sigma() const;
};

OracleSigma oracle_sigma(const ModelDescriptor& model, Index mc_draws, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Reports

enum class ReportFormat { Csv, Markdown, Json };

ReportFormat parse_format(const std::string& name);

void emit(const RatioTable& table, ReportFormat format, std::ostream& out);
void emit(const KSReport& report, ReportFormat format, std::ostream& out);
/// Writes to `path`; IoError when the file cannot be written.
void emit(const RatioTable& table, ReportFormat format, const std::string& path);
void emit(const KSReport& report, ReportFormat format, const std::string& path);

std::string to_json_string(const RatioTable& table);
std::string to_json_string(const KSReport& report);
RatioTable ratio_table_from_json(const std::string& text);
KSReport ks_report_from_json(const std::string& text);

/// Configs from JSON whose keys mirror the field names; unknown keys are a ConfigError.
RegressionModelConfig regression_config_from_json(const std::string& text);
GramModelConfig gram_config_from_json(const std::string& text);
std::string to_json_string(const RegressionModelConfig& config);
std::string to_json_string(const GramModelConfig& config);

}  // namespace debias
