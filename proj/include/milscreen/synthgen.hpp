#pragma once

// Synthetic cohorts: bags with planted witness tiles and a clinical covariate
// table whose smoking status is coupled to the label.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "milscreen/milnet.hpp"

namespace milscreen {

struct SynthConfig {
  int n_patients = 200;
  int slides_per_patient_min = 1;
  int slides_per_patient_max = 2;
  int tiles_min = 8;
  int tiles_max = 32;
  int feature_dim = 64;
  int witness_dim = 32;  // size of the planted coordinate subspace
  double witness_fraction_positive = 0.15;
  double witness_shift = 0.6;
  double label_prevalence = 0.3;
  double p_never_positive = 0.6;
  double p_never_negative = 0.3;
  double missing_rate = 0.05;  // per covariate value
  int tile_count_min = 400;    // tissue tiles on the full slide (QC)
  int tile_count_max = 4000;
  std::uint64_t seed = 1;
  std::uint64_t subspace_seed = 2024;  // shared by train and test cohorts

  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

enum class CovariateColumn { smoking, sex, age_group, stage, metastasis };

inline constexpr std::size_t kCovariateColumns = 5;

struct CovariateSchema {
  std::string name;
  std::vector<std::string> vocabulary;
};

const std::array<CovariateSchema, kCovariateColumns>& covariate_schema();

/// Missing values are std::nullopt ("NA" on disk).
struct CovariateRow {
  std::string patient_id;
  std::array<std::optional<std::string>, kCovariateColumns> values;
  friend bool operator==(const CovariateRow&, const CovariateRow&) = default;
};

struct CovariateTable {
  std::vector<CovariateRow> rows;

  const CovariateRow* find(const std::string& patient_id) const;
  bool has_missing() const;
  friend bool operator==(const CovariateTable&, const CovariateTable&) = default;
};

/// Length of encode_covariates output.
inline constexpr std::uint32_t kEncodedCovariates = 7;

/// smoking one-hot (never, former, current), sex, age group and stage as
/// ordinal/3, metastasis flag. Requires a complete row.
Vectord encode_covariates(const CovariateRow& row);

struct SynthCohort {
  Dataset dataset;
  CovariateTable covariates;     // as generated, with missing values
  std::vector<int> witness_dims; // planted coordinates, sorted
};

SynthCohort generate(const SynthConfig& config);

enum class ImputeStrategy { mode, distribution };

/// Fills missing values per column, by the column mode (ties to the
/// lexicographically first value) or by sampling the observed values.
CovariateTable impute(const CovariateTable& table, ImputeStrategy strategy, std::uint64_t seed);

void write_covariates_csv(const std::filesystem::path& path, const CovariateTable& table);
CovariateTable read_covariates_csv(const std::filesystem::path& path);

}  // namespace milscreen
