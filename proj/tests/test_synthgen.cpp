#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "milscreen/metrics.hpp"
#include "milscreen/slideprep.hpp"
#include "milscreen/synthgen.hpp"

using namespace milscreen;

namespace {

// Slide score from the planted coordinates alone: mean over tiles of the max
// witness-subspace average. An oracle that knows where the signal lives.
double planted_score(const FeatureBag& bag, const std::vector<int>& dims) {
  double best = -1e300;
  for (Eigen::Index k = 0; k < bag.size(); ++k) {
    double s = 0.0;
    for (int d : dims) s += bag.features(k, d);
    best = std::max(best, s / static_cast<double>(dims.size()));
  }
  return best;
}

double planted_auc(const SynthCohort& c) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& bag : c.dataset.bags) {
    scores.push_back(planted_score(bag, c.witness_dims));
    labels.push_back(bag.label);
  }
  return auc(scores, labels);
}

CovariateRow row_with_smoking(const std::string& id, std::optional<std::string> smoking) {
  CovariateRow r;
  r.patient_id = id;
  r.values = {smoking, "female", "<50", "I", "no"};
  return r;
}

}  // namespace

TEST_CASE("default cohort structure") {
  const SynthConfig cfg;
  const SynthCohort c = generate(cfg);
  CHECK_NOTHROW(c.dataset.validate());
  CHECK(c.dataset.feature_dim == 64);
  CHECK(c.dataset.n_covariates == kEncodedCovariates);
  CHECK(c.witness_dims.size() == 32);
  CHECK(c.covariates.rows.size() == 200);
  CHECK(c.covariates.has_missing());
  for (const auto& bag : c.dataset.bags) {
    CHECK(bag.size() >= cfg.tiles_min);
    CHECK(bag.size() <= cfg.tiles_max);
    const auto n_w = std::count(bag.tile_groups.begin(), bag.tile_groups.end(), kWitnessGroup);
    if (bag.label == 1) {
      CHECK(n_w == static_cast<long>(std::ceil(0.15 * static_cast<double>(bag.size()))));
    } else {
      CHECK(n_w == 0);
    }
    CHECK(bag.tile_count_total >= 400u);
    CHECK(bag.tile_count_total <= 4000u);
  }
}

TEST_CASE("same seed gives identical bytes") {
  std::stringstream a, b;
  write_bags(a, generate(SynthConfig{}).dataset);
  write_bags(b, generate(SynthConfig{}).dataset);
  CHECK(a.str() == b.str());
  SynthConfig other;
  other.seed = 2;
  std::stringstream c;
  write_bags(c, generate(other).dataset);
  CHECK(a.str() != c.str());
}

TEST_CASE("patient prevalence within binomial bounds") {
  SynthConfig cfg;
  cfg.n_patients = 500;
  cfg.label_prevalence = 0.3;
  const SynthCohort c = generate(cfg);
  std::set<std::string> pos, all;
  for (const auto& bag : c.dataset.bags) {
    all.insert(bag.patient_id);
    if (bag.label) pos.insert(bag.patient_id);
  }
  const double frac = static_cast<double>(pos.size()) / static_cast<double>(all.size());
  CHECK(std::abs(frac - 0.3) <= 0.05);
}

TEST_CASE("witness tiles are shifted on the planted subspace") {
  const SynthConfig cfg;
  const SynthCohort c = generate(cfg);
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& bag : c.dataset.bags) {
    for (std::size_t k = 0; k < bag.tile_groups.size(); ++k) {
      if (bag.tile_groups[k] != kWitnessGroup) continue;
      for (int d : c.witness_dims) {
        sum += bag.features(static_cast<Eigen::Index>(k), d);
        ++n;
      }
    }
  }
  REQUIRE(n > 0);
  CHECK(std::abs(sum / static_cast<double>(n) - cfg.witness_shift) <= 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("zero shift removes the signal") {
  SynthConfig cfg;
  cfg.n_patients = 400;
  cfg.witness_shift = 0.0;
  CHECK(std::abs(planted_auc(generate(cfg)) - 0.5) < 0.08);
  cfg.witness_shift = 0.6;
  CHECK(planted_auc(generate(cfg)) > 0.75);
}

TEST_CASE("never-smokers are enriched among positives") {
  SynthConfig cfg;
  cfg.n_patients = 2000;
  cfg.missing_rate = 0.0;
  const SynthCohort c = generate(cfg);
  std::map<std::string, int> label;
  for (const auto& bag : c.dataset.bags) label[bag.patient_id] = bag.label;
  double never[2] = {0, 0}, total[2] = {0, 0};
  for (const auto& row : c.covariates.rows) {
    const int l = label[row.patient_id];
    total[l] += 1;
    never[l] += *row.values[0] == "never";
  }
  CHECK(std::abs(never[1] / total[1] - 0.6) < 0.05);
  CHECK(std::abs(never[0] / total[0] - 0.3) < 0.05);
}

TEST_CASE("invalid configs are rejected") {
  SynthConfig cfg;
  cfg.witness_dim = 65;
  CHECK_THROWS_AS(generate(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.label_prevalence = 1.0;
  CHECK_THROWS_AS(generate(cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.tiles_min = 0;
  CHECK_THROWS_AS(generate(cfg), ConfigError);
}

TEST_CASE("mode imputation") {
  CovariateTable t;
  t.rows = {row_with_smoking("a", "never"), row_with_smoking("b", "never"),
            row_with_smoking("c", "current"), row_with_smoking("d", std::nullopt)};
  const CovariateTable m = impute(t, ImputeStrategy::mode, 0);
  CHECK(*m.rows[3].values[0] == "never");
  CHECK_FALSE(m.has_missing());

  // tie between current and never: lexicographically first wins
  t.rows[1].values[0] = "current";
  CHECK(*impute(t, ImputeStrategy::mode, 0).rows[3].values[0] == "current");
}

TEST_CASE("complete tables are unchanged") {
  CovariateTable t;
  t.rows = {row_with_smoking("a", "former"), row_with_smoking("b", "never")};
  CHECK(impute(t, ImputeStrategy::mode, 1) == t);
  CHECK(impute(t, ImputeStrategy::distribution, 1) == t);
}

TEST_CASE("distribution imputation follows the observed frequencies") {
  CovariateTable t;
  for (int i = 0; i < 60; ++i) t.rows.push_back(row_with_smoking("n" + std::to_string(i), "never"));
  for (int i = 0; i < 40; ++i) t.rows.push_back(row_with_smoking("c" + std::to_string(i), "current"));
  for (int i = 0; i < 1000; ++i) t.rows.push_back(row_with_smoking("m" + std::to_string(i), std::nullopt));
  const CovariateTable d = impute(t, ImputeStrategy::distribution, 7);
  int never = 0;
  for (std::size_t i = 100; i < d.rows.size(); ++i) never += *d.rows[i].values[0] == "never";
  CHECK(std::abs(never / 1000.0 - 0.6) <= 0.05);
  CHECK(impute(t, ImputeStrategy::distribution, 7) == d);
}

TEST_CASE("imputation errors and vocabulary") {
  CovariateTable t;
  t.rows = {row_with_smoking("a", std::nullopt)};
  CHECK_THROWS_AS(impute(t, ImputeStrategy::mode, 0), DomainError);

  const SynthCohort c = generate(SynthConfig{});
  for (auto strategy : {ImputeStrategy::mode, ImputeStrategy::distribution}) {
    const CovariateTable f = impute(c.covariates, strategy, 3);
    CHECK_FALSE(f.has_missing());
    for (const auto& row : f.rows) {
      for (std::size_t col = 0; col < kCovariateColumns; ++col) {
        const auto& vocab = covariate_schema()[col].vocabulary;
        CHECK(std::find(vocab.begin(), vocab.end(), *row.values[col]) != vocab.end());
      }
    }
  }
}

TEST_CASE("covariate encoding") {
  CovariateRow r = row_with_smoking("a", "current");
  r.values[3] = "IV";
  const Vectord v = encode_covariates(r);
  REQUIRE(v.size() == 7);
  CHECK(v(2) == 1.0);
  CHECK(v(0) + v(1) == 0.0);
  CHECK(v(5) == 1.0);
  r.values[1] = std::nullopt;
  CHECK_THROWS_AS(encode_covariates(r), DomainError);
  r.values[1] = "other";
  CHECK_THROWS_AS(encode_covariates(r), DomainError);
}

TEST_CASE("covariate CSV round trip") {
  const SynthCohort c = generate(SynthConfig{});
  const auto path = std::filesystem::temp_directory_path() / "milscreen_cov.csv";
  write_covariates_csv(path, c.covariates);
  CHECK(read_covariates_csv(path) == c.covariates);
  std::filesystem::remove(path);
}
