#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "debias/simlab.hpp"

using namespace debias;

namespace {

Errc code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an error");
  return Errc::InvalidArgument;
}

bool same_bits(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

RegressionModelConfig small_ratio_config() {
  RegressionModelConfig c;
  c.N_total = 80;
  c.gamma_grid = {0.3, 0.5};
  c.replications = 6;
  c.seed = 77;
  c.roster = {{"plugin", 0}, {"jackknife", 0}, {"hodse", 2}, {"kl", 2},
              {"ib", 1},     {"ck_full", 2},   {"ck_pre", 2}};
  c.ib_mc = 5;
  return c;
}

GramModelConfig small_gram_config() {
  GramModelConfig c;
  c.n_per_split = 60;
  c.d = 3;
  c.replications = 12;
  c.seed = 5;
  c.oracle_mc_draws = 20000;
  return c;
}

std::string emit_string(const RatioTable& t, ReportFormat f) {
  std::ostringstream out;
  emit(t, f, out);
  return out.str();
}

}  // namespace

TEST_CASE("regression generator") {
  Rng rng(1);
  const Index n = 40000;
  auto [x, y] = gen_regression(n, 4, 0.6, rng);
  CHECK(x.rows() == n);
  CHECK(x.cols() == 4);
  const double tol = 3.0 / std::sqrt(static_cast<double>(n));
  for (Index j = 0; j < 4; ++j) CHECK(std::abs(x.col(j).squaredNorm() / n - 1.0) < 4 * tol);
  const double c12 = x.col(0).dot(x.col(1)) / std::sqrt(x.col(0).squaredNorm() * x.col(1).squaredNorm());
  CHECK(std::abs(c12 - 0.6) < tol);

  // Conditional mean at the origin: sin(0) + (0 - 0.6) / 2.
  CHECK(std::sin(0.0) + 0.5 * (0.0 - 0.6) == doctest::Approx(-0.3));

  Rng a(9), b(9);
  CHECK(gen_regression(10, 3, 0.6, a).first == gen_regression(10, 3, 0.6, b).first);
  CHECK(code_of([&] { gen_regression(10, 1, 0.6, rng); }) == Errc::DimensionTooSmall);
}

TEST_CASE("true regression coefficient") {
  CHECK(true_beta_eta() == std::exp(-0.5));
  CHECK(true_beta_eta() == doctest::Approx(0.6065306597));
  CHECK(true_beta_eta(Eigen::Vector3d(0, 1, 0)) == 0.0);
  CHECK(true_beta_eta(Eigen::Vector2d(1, 0)) == true_beta_eta());

  Rng rng(2);
  auto [x, y] = gen_regression(20000, 5, 0.6, rng);
  const Eigen::VectorXd beta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
  CHECK(std::abs(beta(0) - std::exp(-0.5)) <= 0.05);
  CHECK(std::abs(beta(1)) <= 0.05);
}

TEST_CASE("gaussian generator") {
  Rng rng(3);
  const Index n = 5000, d = 6;
  const Eigen::MatrixXd x = gen_gaussian(n, d, SigmaSpec::identity(), rng);
  const Eigen::MatrixXd cov = x.transpose() * x / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov - Eigen::MatrixXd::Identity(d, d));
  CHECK(es.eigenvalues().cwiseAbs().maxCoeff() <= 3 * std::sqrt(static_cast<double>(d) / n));

  CHECK(SigmaSpec::ar1(0.0).covariance(4) == SigmaSpec::identity().covariance(4));
  CHECK(ar1_covariance(3, 0.5)(0, 2) == doctest::Approx(0.25));

  Rng a(4), b(4);
  CHECK(gen_gaussian(7, 3, SigmaSpec::ar1(0.6), a) == gen_gaussian(7, 3, SigmaSpec::ar1(0.6), b));
}

TEST_CASE("dimension grid") {
  CHECK(dimension_for(1000, 0.3) == 7);
  CHECK(dimension_for(1000, 0.4) == 15);
  CHECK(dimension_for(1000, 0.75) == 177);
  CHECK(dimension_for(100, 0.5) == 10);
  CHECK(dimension_for(1000, 1.0 / 3.0) == 10);
}

TEST_CASE("config validation") {
  auto c = small_ratio_config();
  CHECK_NOTHROW(c.validate());
  c.N_total = 81;
  CHECK(code_of([&] { c.validate(); }) == Errc::ConfigError);
  c = small_ratio_config();
  c.roster = {{"jackknife", 0}};
  CHECK(code_of([&] { c.validate(); }) == Errc::ConfigError);
  c.roster = {{"plugin", 0}, {"bogus", 1}};
  CHECK(code_of([&] { c.validate(); }) == Errc::ConfigError);
  CHECK(estimator_label({"ck_pre", 2}) == "C&K PRE (o2)");
  CHECK(default_roster().front().estimator == "plugin");
}

TEST_CASE("ratio experiment") {
  const auto config = small_ratio_config();
  const auto table = run_ratio_experiment(config);
  REQUIRE(table.rows.size() == 2);
  CHECK(table.rows[0].d == dimension_for(80, 0.3));
  for (const auto& row : table.rows) {
    REQUIRE(row.cells.size() == config.roster.size());
    CHECK(row.cells[0].median_ratio == 1.0);
    CHECK(row.cells[0].mean_ratio == 1.0);
    for (const auto& cell : row.cells) {
      CHECK(cell.reps == config.replications);
      if (!std::isnan(cell.median_ratio)) CHECK(cell.median_ratio >= 0);
    }
  }

  SUBCASE("thread count does not change the table") {
    auto threaded = config;
    threaded.threads = 3;
    auto other = run_ratio_experiment(threaded);
    other.config.threads = config.threads;
    CHECK(other == table);
  }

  SUBCASE("adding a replication keeps the earlier ones") {
    auto more = config;
    more.replications += 1;
    const auto shorter = run_ratio_replications(config, 0.5);
    const auto longer = run_ratio_replications(more, 0.5);
    REQUIRE(longer.squared_errors.size() == shorter.squared_errors.size() + 1);
    for (std::size_t r = 0; r < shorter.squared_errors.size(); ++r)
      for (std::size_t e = 0; e < shorter.squared_errors[r].size(); ++e)
        CHECK(same_bits(shorter.squared_errors[r][e], longer.squared_errors[r][e]));
  }
}

TEST_CASE("failures stay in their cell") {
  // d = 15 with N = 40: K&L blocks of 10 observations give singular block means.
  RegressionModelConfig c;
  c.N_total = 40;
  c.gamma_grid = {0.75};
  c.replications = 3;
  c.roster = {{"plugin", 0}, {"kl", 2}, {"jackknife", 0}};
  const auto table = run_ratio_experiment(c);
  const auto& row = table.rows.at(0);
  CHECK(row.d == 15);
  CHECK(row.cells[0].failures == 0);
  CHECK(row.cells[1].failures == 3);
  CHECK(std::isnan(row.cells[1].median_ratio));
  CHECK(row.cells[2].failures == 0);
  CHECK(row.cells[0].median_ratio == 1.0);
}

TEST_CASE("KS distance") {
  CHECK(ks_distance_normal({0.0}) == doctest::Approx(0.5));
  CHECK(code_of([] { ks_distance_normal({}); }) == Errc::EmptyStudy);
  std::vector<double> quantiles;
  // Midpoint quantiles are within 1/(2m) of the normal CDF everywhere.
  for (int i = 0; i < 200; ++i) {
    const double p = (i + 0.5) / 200.0;
    double lo = -10, hi = 10;
    for (int it = 0; it < 100; ++it) {
      const double mid = 0.5 * (lo + hi);
      (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p ? lo : hi) = mid;
    }
    quantiles.push_back(lo);
  }
  CHECK(ks_distance_normal(quantiles) == doctest::Approx(0.0025).epsilon(1e-6));
}

TEST_CASE("KS study") {
  auto c = small_gram_config();
  const auto a = run_ks_study(c);
  CHECK(a.replications == 12);
  CHECK(a.standardized.size() + static_cast<std::size_t>(a.failures) == 12);
  CHECK(a.ks_statistic >= 0);
  CHECK(a.ks_statistic <= 1);
  CHECK(a.standardization == "oracle");
  CHECK(a.sigma > 0);

  const auto b = run_ks_study(c);
  CHECK(a.ks_statistic == b.ks_statistic);
  CHECK(a == b);

  c.threads = 4;
  CHECK(run_ks_study(c).ks_statistic == a.ks_statistic);

  c.threads = 1;
  c.estimator = "ck_pre";
  c.standardization = "plugin";
  const auto pre = run_ks_study(c);
  CHECK(pre.estimator == "ck_pre");
  CHECK(pre.standardization == "plugin");

  c.replications = 0;
  CHECK(code_of([&] { run_ks_study(c); }) == Errc::EmptyStudy);
}

TEST_CASE("oracle sigma") {
  const GramDescriptor scalar{Eigen::MatrixXd::Identity(1, 1), Eigen::VectorXd::Ones(1),
                              Eigen::VectorXd::Ones(1)};
  const auto small = oracle_sigma(scalar, 50000, 3);
  CHECK(std::abs(small.variance - 2.0) <= 3 * small.se);
  CHECK(small.sigma() == doctest::Approx(std::sqrt(small.variance)));

  const auto big = oracle_sigma(scalar, 100000, 3);
  CHECK(small.se / big.se == doctest::Approx(std::sqrt(2.0)).epsilon(0.1));

  const GramDescriptor zero{Eigen::MatrixXd::Identity(2, 2), Eigen::VectorXd::Zero(2),
                            Eigen::VectorXd::Ones(2)};
  CHECK(code_of([&] { oracle_sigma(zero, 100, 1); }) == Errc::InvalidArgument);

  RegressionDescriptor reg;
  reg.d = 3;
  reg.eta = Eigen::Vector3d(1, 0, 0);
  const auto sandwich = oracle_sigma(reg, 20000, 4);
  CHECK(sandwich.variance > 0);
}

TEST_CASE("report emission") {
  RatioTable empty;
  empty.config = small_ratio_config();
  const auto csv = emit_string(empty, ReportFormat::Csv);
  CHECK(csv == "gamma,d,estimator,order,median_ratio,mean_ratio,failures,reps,seed\r\n");

  auto config = small_ratio_config();
  config.replications = 3;
  const auto table = run_ratio_experiment(config);
  const auto json = to_json_string(table);
  CHECK(ratio_table_from_json(json) == table);
  CHECK(to_json_string(ratio_table_from_json(json)) == json);

  const auto md = emit_string(table, ReportFormat::Markdown);
  int rows = 0;
  std::istringstream lines(md);
  for (std::string line; std::getline(lines, line);)
    if (line.rfind("| 0.", 0) == 0) ++rows;
  // One row per gamma in each of the median and mean tables.
  CHECK(rows == 2 * static_cast<int>(table.rows.size()));

  const auto body = emit_string(table, ReportFormat::Csv);
  CHECK(std::count(body.begin(), body.end(), '\n') ==
        1 + static_cast<long>(table.rows.size() * config.roster.size()));

  CHECK(parse_format("md") == ReportFormat::Markdown);
  CHECK(code_of([] { parse_format("xml"); }) == Errc::ConfigError);
  CHECK(code_of([&] { emit(table, ReportFormat::Csv, std::string("/nonexistent-dir/x/out.csv")); }) ==
        Errc::IoError);

  const auto dir = std::filesystem::temp_directory_path() / "debias_report_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "table.json").string();
  emit(table, ReportFormat::Json, path);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ratio_table_from_json(ss.str()) == table);
  std::filesystem::remove_all(dir);

  auto ks_config = small_gram_config();
  ks_config.replications = 5;
  const auto ks = run_ks_study(ks_config);
  CHECK(ks_report_from_json(to_json_string(ks)) == ks);
}

TEST_CASE("config JSON") {
  const auto c = regression_config_from_json(R"({"N_total": 200, "gamma_grid": [0.3],
      "roster": [{"estimator": "plugin", "order": 0}, {"estimator": "ck_pre", "order": 3}]})");
  CHECK(c.N_total == 200);
  CHECK(c.rho == 0.6);
  CHECK(c.roster.size() == 2);
  CHECK(regression_config_from_json(to_json_string(c)) == c);
  CHECK(code_of([] { regression_config_from_json(R"({"N_totl": 10})"); }) == Errc::ConfigError);
  CHECK(code_of([] { regression_config_from_json("not json"); }) == Errc::ConfigError);

  const auto g = gram_config_from_json(R"({"d": 4, "sigma_spec": {"kind": "AR1", "rho": 0.3},
      "eta1": [1, 0, 0, 0], "order": "LogOfN"})");
  CHECK(g.d == 4);
  CHECK(g.sigma_spec.rho == 0.3);
  CHECK(g.order.mode == OrderSchedule::Mode::LogOfN);
  CHECK(gram_config_from_json(to_json_string(g)) == g);
  CHECK(gram_config_from_json(R"({"sigma_spec": "Identity"})").sigma_spec.kind == SigmaSpec::Kind::Identity);
  CHECK(code_of([] { gram_config_from_json(R"({"replications": 5, "extra": 1})"); }) == Errc::ConfigError);
}
