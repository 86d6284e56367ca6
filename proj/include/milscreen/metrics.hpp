#pragma once

// Evaluation: ROC/AUC, bootstrap intervals, Youden threshold, stratified AUC,
// logistic-regression covariate importance and attention-by-group summaries.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "milscreen/milnet.hpp"

namespace milscreen {

struct ScoredSlide {
  double score = 0;
  int label = 0;
  std::map<std::string, std::string> strata;
};

using ScoredSet = std::vector<ScoredSlide>;

ScoredSet make_scored_set(const std::vector<double>& scores, const std::vector<int>& labels);

/// P(random positive outranks random negative), ties counted 1/2.
double auc(const ScoredSet& scored);
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct RocPoint {
  double threshold;  // predict positive when score >= threshold
  double sensitivity;
  double specificity;
  friend bool operator==(const RocPoint&, const RocPoint&) = default;
};

enum class RocProvenance { empirical, loaded };

struct RocCurve {
  std::vector<RocPoint> points;  // thresholds strictly decreasing
  RocProvenance provenance = RocProvenance::empirical;

  /// Throws DomainError unless the curve satisfies the RocCurve invariants.
  void validate() const;
};

/// Empirical ROC over the sorted unique scores, led by a +inf threshold point.
RocCurve roc(const ScoredSet& scored);

/// Trapezoidal area over (1 - specificity, sensitivity).
double roc_area(const RocCurve& curve);

void write_roc_csv(const std::filesystem::path& path, const RocCurve& curve);
RocCurve read_roc_csv(const std::filesystem::path& path);

struct ConfidenceInterval {
  double low;
  double high;
};

/// Percentile interval of slide-level bootstrap AUCs. Single-class resamples
/// are redrawn. Resample r uses a seed derived from (seed, r), so the result
/// does not depend on `threads`.
ConfidenceInterval bootstrap_ci(const ScoredSet& scored, int n_boot = 1000, double level = 0.95,
                                std::uint64_t seed = 0, int threads = 1);

/// Linear-interpolation percentile (q in [0,1]) of an unsorted sample.
double quantile(std::vector<double> values, double q);

struct YoudenPoint {
  double threshold;
  double sensitivity;
  double specificity;
  double j;
};

/// argmax of se + sp - 1 over the curve; ties go to the higher specificity.
YoudenPoint youden_threshold(const RocCurve& curve);

struct StratumAuc {
  std::string group;
  std::size_t n = 0;
  std::size_t n_positive = 0;
  std::optional<double> auc;  // absent when degenerate
  bool degenerate = false;
  bool small = false;
};

std::vector<StratumAuc> stratified_auc(const ScoredSet& scored, const std::string& key,
                                       std::size_t min_group_size = 10);

void write_strata_csv(const std::filesystem::path& path, const std::string& key,
                      const std::vector<StratumAuc>& rows);

struct CoefficientReport {
  std::string name;
  double coefficient;
  double std_error;
  double ci_low;
  double ci_high;
  double z;
  double p_value;
};

struct LogisticImportance {
  std::vector<CoefficientReport> coefficients;  // intercept first
  int iterations = 0;
  bool converged = false;
  bool separation = false;  // some |coef| > 15 before the ridge refit
  bool ridge_applied = false;
};

/// Maximum-likelihood logistic regression (intercept added) by IRLS with Wald
/// intervals from the observed information.
LogisticImportance logistic_importance(const Tensor2Dd& X, const std::vector<int>& y,
                                       const std::vector<std::string>& names = {});

double standard_normal_cdf(double x);

struct GroupAttention {
  std::string slide_id;
  std::uint8_t group;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
  std::optional<double> median_positive;
  std::optional<double> median_negative;
};

double median(std::vector<double> values);

/// Median attention per (slide, group, sign). Bags without tile groups are skipped.
std::vector<GroupAttention> attention_by_group(
    const std::vector<FeatureBag>& bags,
    const std::vector<std::vector<SignedAttention<double>>>& signed_attentions);

}  // namespace milscreen
