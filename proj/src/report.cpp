#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "debias/error.hpp"
#include "debias/simlab.hpp"

namespace debias {

using nlohmann::json;

namespace {

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

std::string csv_number(double v) { return std::isfinite(v) ? format("%#.6g", v) : std::string(); }

/// RFC-4180 quoting: only fields with separators, quotes or line breaks are quoted.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

double number_from(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed, const std::string& what) {
  require(j.is_object(), Errc::ConfigError, what + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    require(allowed.count(key) == 1, Errc::ConfigError, "unknown " + what + " key '" + key + "'");
}

template <typename Fn>
auto parse_guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const json::exception& e) {
    throw Error(Errc::ConfigError, e.what());
  }
}

std::string order_text(const OrderSchedule& order) {
  return order.mode == OrderSchedule::Mode::LogOfN ? "log" : std::to_string(order.fixed_order);
}

json to_json(const RegressionModelConfig& c) {
  json roster = json::array();
  for (const auto& e : c.roster) roster.push_back({{"estimator", e.estimator}, {"order", e.order}});
  return {{"N_total", c.N_total},          {"gamma_grid", c.gamma_grid}, {"rho", c.rho},
          {"replications", c.replications}, {"seed", c.seed},             {"roster", roster},
          {"b", c.b},                       {"ib_mc", c.ib_mc},           {"threads", c.threads}};
}

RegressionModelConfig regression_config_from(const json& j) {
  reject_unknown_keys(j, {"N_total", "gamma_grid", "rho", "replications", "seed", "roster", "b", "ib_mc", "threads"},
                      "regression config");
  RegressionModelConfig c;
  if (j.contains("N_total")) c.N_total = j.at("N_total").get<Index>();
  if (j.contains("gamma_grid")) c.gamma_grid = j.at("gamma_grid").get<std::vector<double>>();
  if (j.contains("rho")) c.rho = j.at("rho").get<double>();
  if (j.contains("replications")) c.replications = j.at("replications").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("b")) c.b = j.at("b").get<int>();
  if (j.contains("ib_mc")) c.ib_mc = j.at("ib_mc").get<int>();
  if (j.contains("threads")) c.threads = j.at("threads").get<int>();
  if (j.contains("roster")) {
    c.roster.clear();
    for (const auto& e : j.at("roster")) {
      reject_unknown_keys(e, {"estimator", "order"}, "roster entry");
      c.roster.push_back({e.at("estimator").get<std::string>(), e.value("order", 0)});
    }
  }
  return c;
}

json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vector_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

json to_json(const GramModelConfig& c) {
  json sigma = {{"kind", c.sigma_spec.kind == SigmaSpec::Kind::AR1 ? "AR1" : "Identity"}};
  if (c.sigma_spec.kind == SigmaSpec::Kind::AR1) sigma["rho"] = c.sigma_spec.rho;
  json order = c.order.mode == OrderSchedule::Mode::LogOfN ? json("LogOfN") : json(c.order.fixed_order);
  return {{"n_per_split", c.n_per_split},
          {"d", c.d},
          {"sigma_spec", sigma},
          {"eta1", vector_json(c.eta1)},
          {"eta2", vector_json(c.eta2)},
          {"order", order},
          {"replications", c.replications},
          {"seed", c.seed},
          {"estimator", c.estimator},
          {"b", c.b},
          {"standardization", c.standardization},
          {"oracle_mc_draws", c.oracle_mc_draws},
          {"threads", c.threads}};
}

GramModelConfig gram_config_from(const json& j) {
  reject_unknown_keys(j,
                      {"n_per_split", "d", "sigma_spec", "eta1", "eta2", "order", "replications", "seed",
                       "estimator", "b", "standardization", "oracle_mc_draws", "threads"},
                      "gram config");
  GramModelConfig c;
  if (j.contains("n_per_split")) c.n_per_split = j.at("n_per_split").get<Index>();
  if (j.contains("d")) c.d = j.at("d").get<Index>();
  if (j.contains("sigma_spec")) {
    const auto& s = j.at("sigma_spec");
    const std::string kind = s.is_string() ? s.get<std::string>() : s.at("kind").get<std::string>();
    if (kind == "Identity") {
      c.sigma_spec = SigmaSpec::identity();
    } else if (kind == "AR1") {
      c.sigma_spec = SigmaSpec::ar1(s.is_object() ? s.value("rho", 0.6) : 0.6);
    } else {
      fail(Errc::ConfigError, "sigma_spec kind must be Identity or AR1");
    }
  }
  if (j.contains("eta1")) c.eta1 = vector_from(j.at("eta1"));
  if (j.contains("eta2")) c.eta2 = vector_from(j.at("eta2"));
  if (j.contains("order")) {
    const auto& o = j.at("order");
    if (o.is_string()) {
      require(o.get<std::string>() == "LogOfN", Errc::ConfigError, "order must be an integer or \"LogOfN\"");
      c.order = OrderSchedule::log_of_n();
    } else {
      c.order = OrderSchedule::fixed(o.get<int>());
    }
  }
  if (j.contains("replications")) c.replications = j.at("replications").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("estimator")) c.estimator = j.at("estimator").get<std::string>();
  if (j.contains("b")) c.b = j.at("b").get<int>();
  if (j.contains("standardization")) c.standardization = j.at("standardization").get<std::string>();
  if (j.contains("oracle_mc_draws")) c.oracle_mc_draws = j.at("oracle_mc_draws").get<Index>();
  if (j.contains("threads")) c.threads = j.at("threads").get<int>();
  return c;
}

json to_json(const RatioTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json cells = json::array();
    for (const auto& c : r.cells)
      cells.push_back({{"estimator", c.spec.estimator},
                       {"order", c.spec.order},
                       {"median_ratio", number_or_null(c.median_ratio)},
                       {"mean_ratio", number_or_null(c.mean_ratio)},
                       {"failures", c.failures},
                       {"reps", c.reps}});
    rows.push_back({{"gamma", r.gamma}, {"d", r.d}, {"cells", cells}});
  }
  return {{"kind", "ratio_table"}, {"config", to_json(t.config)}, {"rows", rows}};
}

json to_json(const KSReport& r) {
  return {{"kind", "ks_report"},
          {"estimator", r.estimator},
          {"ks_statistic", number_or_null(r.ks_statistic)},
          {"replications", r.replications},
          {"failures", r.failures},
          {"standardization", r.standardization},
          {"sigma", number_or_null(r.sigma)},
          {"sigma_se", number_or_null(r.sigma_se)},
          {"truth", number_or_null(r.truth)},
          {"standardized", r.standardized},
          {"config", to_json(r.config)}};
}

void write_ratio_csv(const RatioTable& t, std::ostream& out) {
  out << "gamma,d,estimator,order,median_ratio,mean_ratio,failures,reps,seed\r\n";
  for (const auto& r : t.rows)
    for (const auto& c : r.cells)
      out << format("%g", r.gamma) << ',' << r.d << ',' << csv_field(c.spec.estimator) << ','
          << c.spec.order << ',' << csv_number(c.median_ratio) << ',' << csv_number(c.mean_ratio) << ','
          << c.failures << ',' << c.reps << ',' << t.config.seed << "\r\n";
}

void write_ratio_markdown_block(const RatioTable& t, bool median, std::ostream& out) {
  out << (median ? "Median" : "Mean") << " squared-error ratios relative to the plug-in estimator ("
      << t.config.replications << " replications, seed " << t.config.seed << ").\n\n";
  out << "| γ | d |";
  for (const auto& e : t.config.roster) out << ' ' << estimator_label(e) << " |";
  out << "\n|---|---|";
  for (std::size_t i = 0; i < t.config.roster.size(); ++i) out << "---|";
  out << '\n';
  for (const auto& r : t.rows) {
    out << "| " << format("%.2f", r.gamma) << " | " << r.d << " |";
    for (const auto& c : r.cells) {
      const double v = median ? c.median_ratio : c.mean_ratio;
      out << ' ' << (std::isfinite(v) ? format("%.3f", v) : std::string("n/a"));
      if (c.failures > 0) out << " (" << c.failures << " failed)";
      out << " |";
    }
    out << '\n';
  }
}

void write_ks_csv(const KSReport& r, std::ostream& out) {
  out << "estimator,d,n_per_split,order,replications,failures,standardization,sigma,truth,ks_statistic,seed\r\n";
  out << csv_field(r.estimator) << ',' << r.config.d << ',' << r.config.n_per_split << ','
      << order_text(r.config.order) << ',' << r.replications << ',' << r.failures << ','
      << csv_field(r.standardization) << ',' << csv_number(r.sigma) << ',' << csv_number(r.truth) << ','
      << csv_number(r.ks_statistic) << ',' << r.config.seed << "\r\n";
}

void write_ks_markdown(const KSReport& r, std::ostream& out) {
  out << "KS distance of standardized errors to N(0,1).\n\n";
  out << "| estimator | d | n per split | order | replications | failures | standardization | sigma | KS |\n";
  out << "|---|---|---|---|---|---|---|---|---|\n";
  out << "| " << r.estimator << " | " << r.config.d << " | " << r.config.n_per_split << " | "
      << order_text(r.config.order) << " | " << r.replications << " | " << r.failures << " | "
      << r.standardization << " | " << (std::isfinite(r.sigma) ? format("%.4f", r.sigma) : "n/a") << " | "
      << format("%.4f", r.ks_statistic) << " |\n";
}

template <typename T>
void emit_to_path(const T& value, ReportFormat format, const std::string& path) {
  std::ofstream file(path, std::ios::binary);
  require(file.good(), Errc::IoError, "cannot open '" + path + "' for writing");
  emit(value, format, file);
  file.flush();
  require(file.good(), Errc::IoError, "failed writing '" + path + "'");
}

}  // namespace

ReportFormat parse_format(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "md") return ReportFormat::Markdown;
  if (name == "json") return ReportFormat::Json;
  fail(Errc::ConfigError, "format must be csv, md or json");
}

void emit(const RatioTable& table, ReportFormat format, std::ostream& out) {
  switch (format) {
    case ReportFormat::Csv: write_ratio_csv(table, out); break;
    case ReportFormat::Markdown:
      write_ratio_markdown_block(table, true, out);
      out << '\n';
      write_ratio_markdown_block(table, false, out);
      break;
    case ReportFormat::Json: out << to_json(table).dump(2) << '\n'; break;
  }
}

void emit(const KSReport& report, ReportFormat format, std::ostream& out) {
  switch (format) {
    case ReportFormat::Csv: write_ks_csv(report, out); break;
    case ReportFormat::Markdown: write_ks_markdown(report, out); break;
    case ReportFormat::Json: out << to_json(report).dump(2) << '\n'; break;
  }
}

void emit(const RatioTable& table, ReportFormat format, const std::string& path) {
  emit_to_path(table, format, path);
}

void emit(const KSReport& report, ReportFormat format, const std::string& path) {
  emit_to_path(report, format, path);
}

std::string to_json_string(const RatioTable& table) { return to_json(table).dump(2); }
std::string to_json_string(const KSReport& report) { return to_json(report).dump(2); }
std::string to_json_string(const RegressionModelConfig& config) { return to_json(config).dump(2); }
std::string to_json_string(const GramModelConfig& config) { return to_json(config).dump(2); }

RatioTable ratio_table_from_json(const std::string& text) {
  return parse_guarded([&] {
    const json j = json::parse(text);
    require(j.value("kind", "") == "ratio_table", Errc::ConfigError, "not a ratio table");
    RatioTable t;
    t.config = regression_config_from(j.at("config"));
    for (const auto& r : j.at("rows")) {
      RatioRow row;
      row.gamma = r.at("gamma").get<double>();
      row.d = r.at("d").get<Index>();
      for (const auto& c : r.at("cells")) {
        RatioCell cell;
        cell.spec = {c.at("estimator").get<std::string>(), c.at("order").get<int>()};
        cell.median_ratio = number_from(c.at("median_ratio"));
        cell.mean_ratio = number_from(c.at("mean_ratio"));
        cell.failures = c.at("failures").get<int>();
        cell.reps = c.at("reps").get<int>();
        row.cells.push_back(cell);
      }
      t.rows.push_back(std::move(row));
    }
    return t;
  });
}

KSReport ks_report_from_json(const std::string& text) {
  return parse_guarded([&] {
    const json j = json::parse(text);
    require(j.value("kind", "") == "ks_report", Errc::ConfigError, "not a KS report");
    KSReport r;
    r.estimator = j.at("estimator").get<std::string>();
    r.ks_statistic = number_from(j.at("ks_statistic"));
    r.replications = j.at("replications").get<int>();
    r.failures = j.at("failures").get<int>();
    r.standardization = j.at("standardization").get<std::string>();
    r.sigma = number_from(j.at("sigma"));
    r.sigma_se = number_from(j.at("sigma_se"));
    r.truth = number_from(j.at("truth"));
    r.standardized = j.at("standardized").get<std::vector<double>>();
    r.config = gram_config_from(j.at("config"));
    return r;
  });
}

RegressionModelConfig regression_config_from_json(const std::string& text) {
  return parse_guarded([&] { return regression_config_from(json::parse(text)); });
}

GramModelConfig gram_config_from_json(const std::string& text) {
  return parse_guarded([&] { return gram_config_from(json::parse(text)); });
}

}  // namespace debias
