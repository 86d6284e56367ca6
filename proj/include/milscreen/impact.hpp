#pragma once

// Screening-impact and trial-enrollment calculus: sub-optimal treatment
// counts, budget-matched ROC operating points, reduction tables,
// sensitivity/specificity grids and binomial enrollment bounds.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "milscreen/metrics.hpp"

namespace milscreen {

struct CountryStats {
  std::string name;
  double lung_cancers_per_year = 0;
  double luad_fraction = 0;
  double egfr_low = 0;
  double egfr_high = 0;
  double test_low = 0;
  double test_high = 0;

  double luad_cases() const { return lung_cancers_per_year * luad_fraction; }
  void validate() const;
};

/// Built-in registry: US, China, Brazil, Germany.
const std::vector<CountryStats>& builtin_countries();

/// Registry lookup; throws ConfigError listing the known names.
const CountryStats& find_country(const std::vector<CountryStats>& registry, const std::string& name);

/// Built-ins with entries from a JSON array of CountryStats objects replacing
/// (by name) or extending them.
std::vector<CountryStats> load_country_overrides(const std::filesystem::path& path);

double sot_current(double n_luad, double p_egfr, double p_test);
double positive_screens(double n_luad, double p_egfr, double se, double sp);
double precision(double p_egfr, double se, double sp);

/// N p - pr N_test+, the missed mutants when only predicted positives are tested.
double sot_after(double n_luad, double p_egfr, double se, double sp);

struct OperatingPoint {
  double sensitivity = 0;
  double specificity = 0;
  double threshold = 0;
  double positive_screens = 0;
  double residual = 0;  // |positive_screens - budget|
  bool within_margin = true;
};

/// Curve point whose positive-screen count is closest to the budget; ties go
/// to the higher sensitivity.
OperatingPoint find_operating_point(const RocCurve& curve, double n_luad, double p_egfr,
                                    double n_tests_budget, double margin = 0.05);

struct ImpactRow {
  std::string bound;  // "low" or "high"
  double p_egfr = 0;
  double p_test = 0;
  OperatingPoint point;
  double sot_before = 0;
  double sot_after = 0;
  std::optional<double> reduction_pct;  // absent when sot_before is 0
};

/// Low bound pairs (egfr_low, test_high); high bound pairs (egfr_high, test_low).
std::vector<ImpactRow> impact_report(const CountryStats& country, const RocCurve& curve,
                                     double margin = 0.05);

void write_impact_csv(const std::filesystem::path& path, const CountryStats& country,
                      const std::vector<ImpactRow>& rows);

struct GridCell {
  double sensitivity;
  double specificity;
  double positive_screens;
  std::optional<double> reduction_pct;  // absent when nothing to reduce
};

std::vector<GridCell> sensitivity_grid(double n_luad, double p_egfr, double p_test, double step);

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridCell>& grid);

/// (1 - confidence) lower quantile of Binomial(n_screened, rate) over
/// n_trials simulated trials. Trials are inverse-CDF draws from per-trial
/// seeded uniforms, so the bound is monotone in rate and n_screened for a
/// fixed seed and independent of `threads`.
std::int64_t simulate_enrollment(std::int64_t n_screened, double positive_rate, int n_trials = 10000,
                                 double confidence = 0.95, std::uint64_t seed = 0, int threads = 1);

/// precision / prevalence.
double enrichment(double p_egfr, double se, double sp);

}  // namespace milscreen
