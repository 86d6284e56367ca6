#include "milscreen/impact.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "milscreen/rng.hpp"

namespace milscreen {

namespace {

void check_rate(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) throw DomainError(std::string(name) + " must lie in [0,1]");
}

void check_count(double v, const char* name) {
  if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError(std::string(name) + " must be >= 0");
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

}  // namespace

void CountryStats::validate() const {
  auto open_unit = [&](double v, const char* what) {
    if (!(v > 0.0 && v < 1.0)) throw ConfigError("country " + name + ": " + what + " must lie in (0,1)");
  };
  if (name.empty()) throw ConfigError("country: empty name");
  if (!(lung_cancers_per_year >= 0.0)) throw ConfigError("country " + name + ": negative case count");
  open_unit(luad_fraction, "luad_fraction");
  open_unit(egfr_low, "egfr_low");
  open_unit(egfr_high, "egfr_high");
  open_unit(test_low, "test_low");
  open_unit(test_high, "test_high");
  if (egfr_low > egfr_high) throw ConfigError("country " + name + ": egfr_low > egfr_high");
  if (test_low > test_high) throw ConfigError("country " + name + ": test_low > test_high");
}

const std::vector<CountryStats>& builtin_countries() {
  static const std::vector<CountryStats> registry = {
      {"US", 250000, 0.41, 0.09, 0.23, 0.72, 0.76},
      {"China", 815000, 0.63, 0.37, 0.48, 0.42, 0.46},
      {"Brazil", 30200, 0.38, 0.08, 0.28, 0.38, 0.38},
      {"Germany", 56000, 0.40, 0.11, 0.14, 0.66, 0.66},
  };
  return registry;
}

const CountryStats& find_country(const std::vector<CountryStats>& registry, const std::string& name) {
  for (const auto& c : registry) {
    if (c.name == name) return c;
  }
  std::string known;
  for (const auto& c : registry) known += (known.empty() ? "" : ", ") + c.name;
  throw ConfigError("unknown country '" + name + "' (known: " + known + ")");
}

std::vector<CountryStats> load_country_overrides(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("country overrides: cannot open " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("country overrides: " + std::string(e.what()));
  }
  if (!doc.is_array()) throw FormatError("country overrides: expected a JSON array");
  std::vector<CountryStats> registry = builtin_countries();
  for (const auto& item : doc) {
    CountryStats c;
    try {
      c.name = item.at("name").get<std::string>();
      c.lung_cancers_per_year = item.at("lung_cancers_per_year").get<double>();
      c.luad_fraction = item.at("luad_fraction").get<double>();
      c.egfr_low = item.at("egfr_low").get<double>();
      c.egfr_high = item.at("egfr_high").get<double>();
      c.test_low = item.at("test_low").get<double>();
      c.test_high = item.at("test_high").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("country overrides: " + std::string(e.what()));
    }
    c.validate();
    const auto it = std::find_if(registry.begin(), registry.end(),
                                 [&](const CountryStats& r) { return r.name == c.name; });
    if (it != registry.end()) {
      *it = c;
    } else {
      registry.push_back(c);
    }
  }
  return registry;
}

double sot_current(double n_luad, double p_egfr, double p_test) {
  check_count(n_luad, "n_luad");
  check_rate(p_egfr, "p_egfr");
  check_rate(p_test, "p_test");
  return n_luad * p_egfr * (1.0 - p_test);
}

double positive_screens(double n_luad, double p_egfr, double se, double sp) {
  check_count(n_luad, "n_luad");
  check_rate(p_egfr, "p_egfr");
  check_rate(se, "sensitivity");
  check_rate(sp, "specificity");
  return se * n_luad * p_egfr + (1.0 - sp) * n_luad * (1.0 - p_egfr);
}

double precision(double p_egfr, double se, double sp) {
  check_rate(p_egfr, "p_egfr");
  check_rate(se, "sensitivity");
  check_rate(sp, "specificity");
  const double denom = p_egfr * se + (1.0 - p_egfr) * (1.0 - sp);
  if (denom <= 0.0) throw DomainError("precision: no positive predictions");
  return p_egfr * se / denom;
}

double sot_after(double n_luad, double p_egfr, double se, double sp) {
  const double screens = positive_screens(n_luad, p_egfr, se, sp);
  const double mutants = n_luad * p_egfr;
  // Nobody flagged means nobody tested: every mutant is missed.
  if (screens == 0.0) return mutants;
  const double missed = mutants - precision(p_egfr, se, sp) * screens;
  const double reduced = mutants * (1.0 - se);
  if (std::abs(missed - reduced) > 1e-9 * std::max(1.0, mutants)) {
    throw std::logic_error("sot_after: expression disagrees with N p (1 - se)");
  }
  return missed;
}

OperatingPoint find_operating_point(const RocCurve& curve, double n_luad, double p_egfr,
                                    double n_tests_budget, double margin) {
  if (curve.points.empty()) throw DomainError("find_operating_point: empty curve");
  check_count(n_luad, "n_luad");
  if (!(n_tests_budget >= 0.0 && n_tests_budget <= n_luad)) {
    throw DomainError("find_operating_point: budget must lie in [0, N_luad]");
  }
  OperatingPoint best;
  bool have = false;
  for (const auto& p : curve.points) {
    const double screens = positive_screens(n_luad, p_egfr, p.sensitivity, p.specificity);
    const double residual = std::abs(screens - n_tests_budget);
    if (!have || residual < best.residual ||
        (residual == best.residual && p.sensitivity > best.sensitivity)) {
      best = {p.sensitivity, p.specificity, p.threshold, screens, residual, true};
      have = true;
    }
  }
  best.within_margin = best.residual <= margin * n_tests_budget;
  return best;
}

std::vector<ImpactRow> impact_report(const CountryStats& country, const RocCurve& curve,
                                     double margin) {
  country.validate();
  const double n = country.luad_cases();
  std::vector<ImpactRow> rows;
  for (const auto& [bound, p_egfr, p_test] :
       {std::tuple{"low", country.egfr_low, country.test_high},
        std::tuple{"high", country.egfr_high, country.test_low}}) {
    ImpactRow row;
    row.bound = bound;
    row.p_egfr = p_egfr;
    row.p_test = p_test;
    row.point = find_operating_point(curve, n, p_egfr, p_test * n, margin);
    row.sot_before = sot_current(n, p_egfr, p_test);
    row.sot_after = sot_after(n, p_egfr, row.point.sensitivity, row.point.specificity);
    if (row.sot_before > 0.0) {
      row.reduction_pct = 100.0 * (row.sot_before - row.sot_after) / row.sot_before;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_impact_csv(const std::filesystem::path& path, const CountryStats& country,
                      const std::vector<ImpactRow>& rows) {
  std::ofstream out(path);
  if (!out) throw FormatError("impact: cannot write " + path.string());
  out << "country,bound,luad_cases,p_egfr,p_test,tests_budget,sensitivity,specificity,"
         "threshold,positive_screens,within_margin,sot_before,sot_after,reduction_pct\n";
  const double n = country.luad_cases();
  for (const auto& r : rows) {
    out << country.name << ',' << r.bound << ',' << std::llround(n) << ',' << fmt(r.p_egfr) << ','
        << fmt(r.p_test) << ',' << std::llround(r.p_test * n) << ',' << fmt(r.point.sensitivity)
        << ',' << fmt(r.point.specificity) << ',' << fmt(r.point.threshold) << ','
        << std::llround(r.point.positive_screens) << ',' << (r.point.within_margin ? 1 : 0) << ','
        << std::llround(r.sot_before) << ',' << std::llround(r.sot_after) << ','
        << (r.reduction_pct ? fmt(*r.reduction_pct, 4) : "NA") << '\n';
  }
}

std::vector<GridCell> sensitivity_grid(double n_luad, double p_egfr, double p_test, double step) {
  if (!(step > 0.0 && step <= 0.5)) throw DomainError("sensitivity_grid: step must lie in (0, 0.5]");
  const double before = sot_current(n_luad, p_egfr, p_test);
  const auto count = static_cast<int>(std::floor(1.0 / step + 1e-9)) + 1;
  std::vector<GridCell> grid;
  grid.reserve(static_cast<std::size_t>(count) * static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const double se = std::min(1.0, i * step);
    for (int j = 0; j < count; ++j) {
      const double sp = std::min(1.0, j * step);
      GridCell cell{se, sp, positive_screens(n_luad, p_egfr, se, sp), std::nullopt};
      if (before > 0.0) cell.reduction_pct = 100.0 * (before - n_luad * p_egfr * (1.0 - se)) / before;
      grid.push_back(cell);
    }
  }
  return grid;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& grid) {
  std::ofstream out(path);
  if (!out) throw FormatError("grid: cannot write " + path.string());
  out << "sensitivity,specificity,positive_screens,reduction_pct\n";
  for (const auto& c : grid) {
    out << fmt(c.sensitivity) << ',' << fmt(c.specificity) << ',' << fmt(c.positive_screens, 10)
        << ',' << (c.reduction_pct ? fmt(*c.reduction_pct, 8) : "NA") << '\n';
  }
}

std::int64_t simulate_enrollment(std::int64_t n_screened, double positive_rate, int n_trials,
                                 double confidence, std::uint64_t seed, int threads) {
  if (n_screened < 0) throw DomainError("simulate_enrollment: n_screened must be >= 0");
  check_rate(positive_rate, "positive_rate");
  if (n_trials < 1000) throw DomainError("simulate_enrollment: n_trials must be >= 1000");
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw DomainError("simulate_enrollment: confidence must lie in (0,1)");
  }
  if (positive_rate == 0.0 || n_screened == 0) return 0;
  if (positive_rate == 1.0) return n_screened;

  // Binomial CDF table from log-pmf.
  const auto n = static_cast<std::size_t>(n_screened);
  const double log_p = std::log(positive_rate);
  const double log_q = std::log1p(-positive_rate);
  const double lg_n1 = std::lgamma(static_cast<double>(n) + 1.0);
  std::vector<double> cdf(n + 1);
  double acc = 0.0;
  for (std::size_t k = 0; k <= n; ++k) {
    const double kk = static_cast<double>(k);
    acc += std::exp(lg_n1 - std::lgamma(kk + 1.0) - std::lgamma(static_cast<double>(n - k) + 1.0) +
                    kk * log_p + (static_cast<double>(n) - kk) * log_q);
    cdf[k] = acc;
  }
  for (double& c : cdf) c /= acc;

  std::vector<std::int64_t> draws(static_cast<std::size_t>(n_trials));
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t) {
      const double u = static_cast<double>(splitmix64(derive_seed(seed, {t})) >> 11) * 0x1.0p-53;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
      draws[t] = std::min<std::int64_t>(it - cdf.begin(), n_screened);
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1) {
    run(0, draws.size());
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (draws.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(draws.size(), b + chunk);
      if (b < e) pool.emplace_back(run, b, e);
    }
  }
  std::sort(draws.begin(), draws.end());
  // 1-based order statistic ceil((1 - confidence) * n_trials); the epsilon
  // absorbs representation error in (1 - 0.95) * 10000.
  const auto k = static_cast<std::size_t>(
      std::max(1.0, std::ceil((1.0 - confidence) * n_trials - 1e-9)));
  return draws[std::min(k, draws.size()) - 1];
}

double enrichment(double p_egfr, double se, double sp) {
  if (p_egfr == 0.0) throw DomainError("enrichment: prevalence must be > 0");
  return precision(p_egfr, se, sp) / p_egfr;
}

}  // namespace milscreen
