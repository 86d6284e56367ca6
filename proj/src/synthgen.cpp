#include "milscreen/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "milscreen/rng.hpp"

namespace milscreen {

namespace {

constexpr const char* kMissingToken = "NA";

std::string pad_id(const char* prefix, int value, int width) {
  std::string digits = std::to_string(value);
  if (static_cast<int>(digits.size()) < width) digits.insert(0, width - digits.size(), '0');
  return prefix + digits;
}

std::size_t pick(Rng& rng, std::initializer_list<double> weights) {
  double u = uniform01(rng);
  std::size_t i = 0;
  for (double w : weights) {
    if (u < w) return i;
    u -= w;
    ++i;
  }
  return weights.size() - 1;
}

int uniform_int(Rng& rng, int lo, int hi) {
  return lo + static_cast<int>(uniform01(rng) * static_cast<double>(hi - lo + 1));
}

std::size_t vocab_index(CovariateColumn col, const std::string& value) {
  const auto& vocab = covariate_schema()[static_cast<std::size_t>(col)].vocabulary;
  const auto it = std::find(vocab.begin(), vocab.end(), value);
  if (it == vocab.end()) {
    throw DomainError("covariate " + covariate_schema()[static_cast<std::size_t>(col)].name +
                      ": value '" + value + "' not in vocabulary");
  }
  return static_cast<std::size_t>(it - vocab.begin());
}

}  // namespace

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("synth config: " + what); };
  if (n_patients < 1) fail("n_patients must be >= 1");
  if (slides_per_patient_min < 1 || slides_per_patient_max < slides_per_patient_min) {
    fail("slides_per_patient range invalid");
  }
  if (tiles_min < 1 || tiles_max < tiles_min) fail("tiles range invalid");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (witness_dim < 1 || witness_dim > feature_dim) fail("witness_dim must lie in [1, feature_dim]");
  auto unit = [&](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) fail(std::string(name) + " must lie in [0,1]");
  };
  unit(witness_fraction_positive, "witness_fraction_positive");
  unit(p_never_positive, "p_never_positive");
  unit(p_never_negative, "p_never_negative");
  unit(missing_rate, "missing_rate");
  if (!(label_prevalence > 0.0 && label_prevalence < 1.0)) fail("label_prevalence must lie in (0,1)");
  if (!std::isfinite(witness_shift)) fail("witness_shift must be finite");
  if (tile_count_min < 0 || tile_count_max < tile_count_min) fail("tile_count range invalid");
}

const std::array<CovariateSchema, kCovariateColumns>& covariate_schema() {
  static const std::array<CovariateSchema, kCovariateColumns> schema = {{
      {"smoking", {"never", "former", "current"}},
      {"sex", {"female", "male"}},
      {"age_group", {"<50", "50-64", "65-74", "75+"}},
      {"stage", {"I", "II", "III", "IV"}},
      {"metastasis", {"no", "yes"}},
  }};
  return schema;
}

const CovariateRow* CovariateTable::find(const std::string& patient_id) const {
  for (const auto& row : rows) {
    if (row.patient_id == patient_id) return &row;
  }
  return nullptr;
}

bool CovariateTable::has_missing() const {
  return std::any_of(rows.begin(), rows.end(), [](const CovariateRow& r) {
    return std::any_of(r.values.begin(), r.values.end(), [](const auto& v) { return !v; });
  });
}

Vectord encode_covariates(const CovariateRow& row) {
  for (std::size_t c = 0; c < kCovariateColumns; ++c) {
    if (!row.values[c]) {
      throw DomainError("encode_covariates: patient " + row.patient_id + " has missing " +
                        covariate_schema()[c].name);
    }
  }
  Vectord v = Vectord::Zero(kEncodedCovariates);
  v(static_cast<Eigen::Index>(vocab_index(CovariateColumn::smoking, *row.values[0]))) = 1.0;
  v(3) = static_cast<double>(vocab_index(CovariateColumn::sex, *row.values[1]));
  v(4) = static_cast<double>(vocab_index(CovariateColumn::age_group, *row.values[2])) / 3.0;
  v(5) = static_cast<double>(vocab_index(CovariateColumn::stage, *row.values[3])) / 3.0;
  v(6) = static_cast<double>(vocab_index(CovariateColumn::metastasis, *row.values[4]));
  return v;
}

SynthCohort generate(const SynthConfig& config) {
  config.validate();
  SynthCohort cohort;

  {
    Rng sub(config.subspace_seed);
    std::vector<int> dims(static_cast<std::size_t>(config.feature_dim));
    std::iota(dims.begin(), dims.end(), 0);
    for (int i = 0; i < config.witness_dim; ++i) {
      const int j = uniform_int(sub, i, config.feature_dim - 1);
      std::swap(dims[static_cast<std::size_t>(i)], dims[static_cast<std::size_t>(j)]);
    }
    dims.resize(static_cast<std::size_t>(config.witness_dim));
    std::sort(dims.begin(), dims.end());
    cohort.witness_dims = std::move(dims);
  }

  const auto& schema = covariate_schema();
  std::vector<int> labels;
  for (int p = 0; p < config.n_patients; ++p) {
    Rng rng(derive_seed(config.seed, {0, static_cast<std::uint64_t>(p)}));
    const int label = uniform01(rng) < config.label_prevalence ? 1 : 0;
    labels.push_back(label);

    CovariateRow row;
    row.patient_id = pad_id("P", p, 4);
    const double never = label ? config.p_never_positive : config.p_never_negative;
    // remaining mass split former:current 3:1 for mutants, 4:3 for wild-type
    const double former_share = label ? 0.75 : 4.0 / 7.0;
    const std::size_t smoking =
        pick(rng, {never, (1.0 - never) * former_share, (1.0 - never) * (1.0 - former_share)});
    const std::array<std::size_t, kCovariateColumns> idx = {
        smoking, pick(rng, {0.5, 0.5}), pick(rng, {0.15, 0.35, 0.3, 0.2}),
        pick(rng, {0.4, 0.2, 0.25, 0.15}), pick(rng, {0.7, 0.3})};
    for (std::size_t c = 0; c < kCovariateColumns; ++c) {
      const bool missing = uniform01(rng) < config.missing_rate;
      if (!missing) row.values[c] = schema[c].vocabulary[idx[c]];
    }
    cohort.covariates.rows.push_back(std::move(row));
  }

  // A column that came out entirely missing cannot be imputed; only possible
  // for tiny cohorts with a high missing rate.
  const CovariateTable complete = impute(cohort.covariates, ImputeStrategy::mode, config.seed);

  Dataset& ds = cohort.dataset;
  ds.feature_dim = static_cast<std::uint32_t>(config.feature_dim);
  ds.n_covariates = kEncodedCovariates;
  for (int p = 0; p < config.n_patients; ++p) {
    Rng rng(derive_seed(config.seed, {1, static_cast<std::uint64_t>(p)}));
    const int label = labels[static_cast<std::size_t>(p)];
    const Vectord encoded = encode_covariates(complete.rows[static_cast<std::size_t>(p)]);
    const int slides = uniform_int(rng, config.slides_per_patient_min, config.slides_per_patient_max);
    for (int s = 0; s < slides; ++s) {
      FeatureBag bag;
      bag.patient_id = cohort.covariates.rows[static_cast<std::size_t>(p)].patient_id;
      bag.slide_id = bag.patient_id + "-S" + std::to_string(s + 1);
      bag.label = label;
      bag.covariates = encoded.cast<float>().cast<double>();
      const int tiles = uniform_int(rng, config.tiles_min, config.tiles_max);
      bag.tile_count_total =
          static_cast<std::uint32_t>(uniform_int(rng, config.tile_count_min, config.tile_count_max));
      std::normal_distribution<double> normal(0.0, 1.0);
      bag.features.resize(tiles, config.feature_dim);
      for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = normal(rng);
      bag.tile_groups.assign(static_cast<std::size_t>(tiles), kBackgroundGroup);
      if (label == 1) {
        const int n_witness = static_cast<int>(
            std::ceil(config.witness_fraction_positive * static_cast<double>(tiles) - 1e-12));
        std::vector<int> order(static_cast<std::size_t>(tiles));
        std::iota(order.begin(), order.end(), 0);
        for (int i = 0; i < n_witness; ++i) {
          const int j = uniform_int(rng, i, tiles - 1);
          std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
          const int tile = order[static_cast<std::size_t>(i)];
          bag.tile_groups[static_cast<std::size_t>(tile)] = kWitnessGroup;
          for (int d : cohort.witness_dims) bag.features(tile, d) += config.witness_shift;
        }
      }
      // stored as float on disk; keep in-memory values identical
      bag.features = bag.features.cast<float>().cast<double>();
      ds.bags.push_back(std::move(bag));
    }
  }
  return cohort;
}

CovariateTable impute(const CovariateTable& table, ImputeStrategy strategy, std::uint64_t seed) {
  CovariateTable out = table;
  for (std::size_t c = 0; c < kCovariateColumns; ++c) {
    std::vector<std::string> observed;
    bool any_missing = false;
    for (const auto& row : table.rows) {
      if (row.values[c]) {
        observed.push_back(*row.values[c]);
      } else {
        any_missing = true;
      }
    }
    if (!any_missing) continue;
    if (observed.empty()) {
      throw DomainError("impute: column " + covariate_schema()[c].name + " is entirely missing");
    }
    if (strategy == ImputeStrategy::mode) {
      std::map<std::string, std::size_t> counts;
      for (const auto& v : observed) ++counts[v];
      const std::string* best = nullptr;
      std::size_t best_count = 0;
      for (const auto& [value, count] : counts) {
        if (count > best_count) {
          best = &value;
          best_count = count;
        }
      }
      for (auto& row : out.rows) {
        if (!row.values[c]) row.values[c] = *best;
      }
    } else {
      Rng rng(derive_seed(seed, {c}));
      for (auto& row : out.rows) {
        if (!row.values[c]) {
          const auto i = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(observed.size()));
          row.values[c] = observed[std::min(i, observed.size() - 1)];
        }
      }
    }
  }
  return out;
}

void write_covariates_csv(const std::filesystem::path& path, const CovariateTable& table) {
  std::ofstream out(path);
  if (!out) throw FormatError("covariates: cannot write " + path.string());
  out << "patient_id";
  for (const auto& col : covariate_schema()) out << ',' << col.name;
  out << '\n';
  for (const auto& row : table.rows) {
    out << row.patient_id;
    for (const auto& v : row.values) out << ',' << (v ? *v : kMissingToken);
    out << '\n';
  }
}

CovariateTable read_covariates_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("covariates: cannot open " + path.string());
  std::string line;
  std::string expected = "patient_id";
  for (const auto& col : covariate_schema()) expected += "," + col.name;
  if (!std::getline(in, line)) throw FormatError("covariates: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != expected) throw FormatError("covariates: header must be '" + expected + "'");
  CovariateTable table;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != kCovariateColumns + 1) {
      throw FormatError("covariates: line " + std::to_string(lineno) + " has " +
                        std::to_string(fields.size()) + " fields");
    }
    CovariateRow row;
    row.patient_id = fields[0];
    for (std::size_t c = 0; c < kCovariateColumns; ++c) {
      const std::string& v = fields[c + 1];
      if (v == kMissingToken) continue;
      const auto& vocab = covariate_schema()[c].vocabulary;
      if (std::find(vocab.begin(), vocab.end(), v) == vocab.end()) {
        throw FormatError("covariates: line " + std::to_string(lineno) + ": '" + v +
                          "' is not a valid " + covariate_schema()[c].name);
      }
      row.values[c] = v;
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace milscreen
