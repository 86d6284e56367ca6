#include "milscreen/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "milscreen/archive.hpp"
#include "milscreen/impact.hpp"
#include "milscreen/metrics.hpp"
#include "milscreen/protocol.hpp"
#include "milscreen/slideprep.hpp"
#include "milscreen/synthgen.hpp"

namespace milscreen {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string> kCommands = {"generate", "tile",   "train", "eval",
                                            "attention", "impact", "trial"};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const json& doc) { open_out(path) << doc.dump(2) << '\n'; }

fs::path default_out_dir() {
  const char* env = std::getenv("MILSCREEN_OUT");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path(".");
}

std::string config_value(const std::string& key, const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw ConfigError("config key '" + key + "' must be a string, number or boolean");
}

/// Flags from a JSON config file, inserted ahead of the command line so that
/// explicit flags (parsed later, last value wins) override file values.
std::vector<std::string> config_args(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  if (doc.contains("options")) doc = doc.at("options");  // a run manifest
  if (!doc.is_object()) throw ConfigError("config " + path.string() + ": expected a JSON object");
  std::vector<std::string> args;
  for (const auto& [key, value] : doc.items()) {
    if (value.is_null()) continue;
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "config") continue;
    args.push_back("--" + flag);
    args.push_back(config_value(key, value));
  }
  return args;
}

/// Options as given or defaulted; unset optional flags are omitted.
json resolved_options(const CLI::App& sub) {
  json options = json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    const std::string name = opt->get_name(false, true);
    if (name.empty() || opt->get_lnames().empty()) continue;
    const std::string key = opt->get_lnames().front();
    if (key == "help" || key == "config") continue;
    if (opt->count() > 0) {
      options[key] = opt->results().back();
    } else if (!opt->get_default_str().empty()) {
      options[key] = opt->get_default_str();
    }
  }
  return options;
}

void write_manifest(const fs::path& path, const CLI::App& sub, const json& extra = json::object()) {
  json doc = {{"command", sub.get_name()}, {"options", resolved_options(sub)}};
  for (const auto& [k, v] : extra.items()) doc[k] = v;
  write_json(path, doc);
}

// Adds an option whose default is recorded in the manifest.
template <class T>
CLI::Option* opt(CLI::App* sub, const std::string& flag, T& var, const std::string& desc) {
  return sub->add_option(flag, var, desc)->capture_default_str();
}

/// Replaces bag covariates with the encoding of the mode-imputed table rows.
void apply_covariates(Dataset& dataset, const CovariateTable& table) {
  const CovariateTable filled = impute(table, ImputeStrategy::mode, 0);
  for (auto& bag : dataset.bags) {
    const CovariateRow* row = filled.find(bag.patient_id);
    if (row == nullptr) throw FormatError("covariates: no row for patient " + bag.patient_id);
    bag.covariates = encode_covariates(*row);
  }
  dataset.n_covariates = kEncodedCovariates;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  SynthConfig synth;
  std::string name = "cohort";
  std::string out_dir;
};

void add_generate(CLI::App* sub, GenerateArgs& a) {
  SynthConfig& c = a.synth;
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--name", a.name, "output file stem");
  opt(sub, "--seed", c.seed, "master seed");
  opt(sub, "--subspace-seed", c.subspace_seed, "seed of the planted witness coordinates");
  opt(sub, "--patients", c.n_patients, "number of patients");
  opt(sub, "--slides-min", c.slides_per_patient_min, "slides per patient, lower bound");
  opt(sub, "--slides-max", c.slides_per_patient_max, "slides per patient, upper bound");
  opt(sub, "--tiles-min", c.tiles_min, "tiles per bag, lower bound");
  opt(sub, "--tiles-max", c.tiles_max, "tiles per bag, upper bound");
  opt(sub, "--feature-dim", c.feature_dim, "tile feature dimension D1");
  opt(sub, "--witness-dim", c.witness_dim, "planted subspace size");
  opt(sub, "--witness-fraction", c.witness_fraction_positive, "witness tile fraction on positive slides");
  opt(sub, "--witness-shift", c.witness_shift, "mean shift of witness tiles");
  opt(sub, "--prevalence", c.label_prevalence, "fraction of positive patients");
  opt(sub, "--p-never-positive", c.p_never_positive, "P(never smoker | positive)");
  opt(sub, "--p-never-negative", c.p_never_negative, "P(never smoker | negative)");
  opt(sub, "--missing-rate", c.missing_rate, "per-value covariate missingness");
  opt(sub, "--tile-count-min", c.tile_count_min, "full-slide tissue tiles, lower bound");
  opt(sub, "--tile-count-max", c.tile_count_max, "full-slide tissue tiles, upper bound");
}

void run_generate(const CLI::App& sub, const GenerateArgs& a, std::ostream& out) {
  const SynthCohort cohort = generate(a.synth);
  fs::create_directories(a.out_dir);
  const fs::path bags = fs::path(a.out_dir) / (a.name + ".milb");
  const fs::path csv = fs::path(a.out_dir) / (a.name + "_covariates.csv");
  write_bags(bags, cohort.dataset);
  write_covariates_csv(csv, cohort.covariates);

  std::set<std::string> patients, positives;
  for (const auto& bag : cohort.dataset.bags) {
    patients.insert(bag.patient_id);
    if (bag.label == 1) positives.insert(bag.patient_id);
  }
  const double prevalence = static_cast<double>(positives.size()) / static_cast<double>(patients.size());
  write_manifest(fs::path(a.out_dir) / (a.name + "_manifest.json"), sub);
  out << "bags " << cohort.dataset.bags.size() << "\npatients " << patients.size() << "\nprevalence "
      << std::setprecision(4) << prevalence << "\nfeature_dim " << cohort.dataset.feature_dim << '\n'
      << "wrote " << bags.string() << ' ' << csv.string() << '\n';
}

// -------------------------------------------------------------------- tile

struct TileArgs {
  fs::path list;
  std::string out = "slides.milb";
  std::string out_dir;
  int tile_size = kDefaultTileSize;
  double min_foreground = 0.5;
  int feature_dim = 64;
};

void add_tile(CLI::App* sub, TileArgs& a) {
  sub->add_option("--list", a.list, "CSV: path,slide_id,patient_id,label (paths relative to the list)")
      ->required();
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--out", a.out, "bag file name inside the output directory");
  opt(sub, "--tile-size", a.tile_size, "tile edge in pixels");
  opt(sub, "--min-foreground", a.min_foreground, "minimum tissue fraction of a kept tile");
  opt(sub, "--feature-dim", a.feature_dim, "feature dimension D1 (>= 16)");
}

void run_tile(const CLI::App& sub, const TileArgs& a, std::ostream& out, std::ostream& err) {
  std::ifstream in(a.list);
  if (!in) throw FormatError("cannot open slide list " + a.list.string());
  Dataset dataset;
  dataset.feature_dim = static_cast<std::uint32_t>(a.feature_dim);
  dataset.n_covariates = 0;
  std::string line;
  std::getline(in, line);  // header
  std::size_t skipped = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_list(line);
    if (fields.size() != 4) throw FormatError("slide list: expected 4 fields in '" + line + "'");
    fs::path path = fields[0];
    if (path.is_relative()) path = a.list.parent_path() / path;
    const RasterSlide slide = read_pgm(path);
    const TileGrid grid = extract_tiles(slide, a.tile_size, a.min_foreground);
    if (grid.tiles.empty()) {
      err << "warning: " << fields[1] << " has no tissue tiles, skipped\n";
      ++skipped;
      continue;
    }
    FeatureBag bag;
    bag.slide_id = fields[1];
    bag.patient_id = fields[2];
    bag.label = fields[3] == "1" ? 1 : 0;
    if (fields[3] != "0" && fields[3] != "1") throw FormatError("slide list: label must be 0 or 1");
    bag.tile_count_total = static_cast<std::uint32_t>(grid.tiles.size());
    bag.features.resize(static_cast<Eigen::Index>(grid.tiles.size()), a.feature_dim);
    for (std::size_t k = 0; k < grid.tiles.size(); ++k) {
      const auto pixels = tile_pixels(slide, grid.tiles[k], a.tile_size);
      bag.features.row(static_cast<Eigen::Index>(k)) =
          featurize_tile(pixels, a.tile_size, a.feature_dim, grid.threshold).transpose();
    }
    bag.covariates = Vectord(0);
    dataset.bags.push_back(std::move(bag));
  }
  if (dataset.bags.empty()) throw FormatError("slide list: no slide produced tissue tiles");
  fs::create_directories(a.out_dir);
  const fs::path target = fs::path(a.out_dir) / a.out;
  write_bags(target, dataset);
  write_manifest(fs::path(a.out_dir) / "tile_manifest.json", sub);
  out << "bags " << dataset.bags.size() << "\nskipped " << skipped << "\nwrote " << target.string() << '\n';
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  fs::path bags;
  fs::path covariates;
  std::string out_dir;
  std::string mode = "gma";
  std::string preset = "desk";
  std::optional<int> epochs;
  std::optional<std::string> optimizer;
  std::optional<double> lr;
  std::optional<double> sample_fraction;
  std::optional<int> hidden_dim;
  int replicates = 3;
  int splits = 20;
  double train_frac = 0.8;
  std::size_t top_k = 10;
  double pos_weight = 0.7;
  double alpha = 0.4;
  bool half_split = false;
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_train(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--bags", a.bags, "MILB bag file")->required();
  sub->add_option("--covariates", a.covariates, "covariate CSV replacing bag covariates");
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--mode", a.mode, "tile | gma | gma_multimodal");
  opt(sub, "--preset", a.preset, "desk | full (optimizer schedule defaults)");
  sub->add_option("--epochs", a.epochs, "epochs (preset default)");
  sub->add_option("--optimizer", a.optimizer, "sgd | adam (preset default)");
  sub->add_option("--lr", a.lr, "learning rate (preset default)");
  sub->add_option("--sample-fraction", a.sample_fraction, "per-epoch sampling fraction (preset default)");
  sub->add_option("--hidden-dim", a.hidden_dim, "attention hidden size D2 (preset default)");
  opt(sub, "--replicates", a.replicates, "replicates per split");
  opt(sub, "--splits", a.splits, "train/validation splits");
  opt(sub, "--train-frac", a.train_frac, "training fraction of patients");
  opt(sub, "--top-k", a.top_k, "ensemble size recorded in the archive");
  opt(sub, "--pos-weight", a.pos_weight, "loss weight of the positive class");
  opt(sub, "--alpha", a.alpha, "joint loss weight (multimodal)");
  opt(sub, "--half-split", a.half_split, "hold out half of each training side for the extractor");
  opt(sub, "--seed", a.seed, "master seed");
  opt(sub, "--threads", a.threads, "worker threads (results do not depend on it)");
}

TrainConfig resolve_train_config(const TrainArgs& a) {
  const TrainMode mode = parse_train_mode(a.mode);
  TrainConfig c;
  if (a.preset == "desk") {
    c = TrainConfig::desk(mode);
  } else if (a.preset == "full") {
    c = mode == TrainMode::tile_supervised ? TrainConfig::full_tile_supervised() : TrainConfig::full_gma();
  } else {
    throw ConfigError("unknown preset '" + a.preset + "' (desk, full)");
  }
  c.mode = mode;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.optimizer) {
    if (*a.optimizer == "sgd") {
      c.optimizer = OptimizerKind::sgd;
    } else if (*a.optimizer == "adam") {
      c.optimizer = OptimizerKind::adam;
    } else {
      throw ConfigError("unknown optimizer '" + *a.optimizer + "' (sgd, adam)");
    }
  }
  if (a.lr) c.learning_rate = *a.lr;
  if (a.sample_fraction) c.sample_fraction = *a.sample_fraction;
  if (a.hidden_dim) c.hidden_dim = *a.hidden_dim;
  c.replicates = a.replicates;
  c.pos_weight = a.pos_weight;
  c.fusion_alpha = a.alpha;
  c.extractor_half_split = a.half_split;
  c.seed = a.seed;
  c.validate();
  return c;
}

void run_train(const CLI::App& sub, const TrainArgs& a, std::ostream& out) {
  ProtocolConfig pc;
  pc.train = resolve_train_config(a);
  pc.n_splits = a.splits;
  pc.train_fraction = a.train_frac;
  pc.top_k = a.top_k;
  pc.threads = a.threads;
  if (pc.n_splits < 1) throw ConfigError("--splits must be >= 1");
  if (pc.top_k < 1) throw ConfigError("--top-k must be >= 1");
  if (pc.top_k > static_cast<std::size_t>(pc.n_splits)) {
    throw ConfigError("--top-k " + std::to_string(pc.top_k) + " exceeds the " + std::to_string(pc.n_splits) +
                      " split winners; lower --top-k or raise --splits");
  }

  Dataset dataset = read_bags(a.bags);
  if (!a.covariates.empty()) apply_covariates(dataset, read_covariates_csv(a.covariates));
  const ProtocolResult result = run_protocol(dataset, pc);

  fs::create_directories(fs::path(a.out_dir) / "history");
  ModelArchive archive;
  archive.mode = pc.train.mode;
  archive.feature_dim = dataset.feature_dim;
  archive.n_covariates = dataset.n_covariates;
  archive.top_k = pc.top_k;
  archive.train_config_json = train_config_json(pc.train);
  archive.models = result.winners();
  write_archive(fs::path(a.out_dir) / "archive.json", archive);

  json splits = json::array();
  for (std::size_t s = 0; s < result.splits.size(); ++s) {
    const auto& outcome = result.splits[s];
    json aucs = json::array();
    for (const auto& m : outcome.replicates) {
      aucs.push_back(std::isnan(m.val_auc) ? json(nullptr) : json(m.val_auc));
      write_history_csv(fs::path(a.out_dir) / "history" /
                            ("split" + std::to_string(s) + "_rep" + std::to_string(m.replicate) + ".csv"),
                        m.history);
    }
    splits.push_back({{"split", s}, {"chosen", outcome.chosen}, {"val_auc", aucs}});
  }
  const double mean_auc = result.mean_validation_auc();
  write_json(fs::path(a.out_dir) / "train_summary.json",
             {{"mode", to_string(pc.train.mode)},
              {"mean_validation_auc", std::isnan(mean_auc) ? json(nullptr) : json(mean_auc)},
              {"splits", splits}});
  write_manifest(fs::path(a.out_dir) / "train_manifest.json", sub,
                 {{"resolved_train_config", json::parse(archive.train_config_json)}});
  out << "mode " << to_string(pc.train.mode) << "\nsplits " << result.splits.size()
      << "\nmean_validation_auc " << std::setprecision(4) << mean_auc << "\nwrote "
      << (fs::path(a.out_dir) / "archive.json").string() << '\n';
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  fs::path archive;
  fs::path bags;
  fs::path covariates;
  std::string out_dir;
  std::string strata;
  int bootstrap = 1000;
  double level = 0.95;
  double qc_min_area = 0.0;
  int tile_size = kDefaultTileSize;
  double mpp = kDefaultMicronsPerPixel;
  std::size_t top_k = 0;
  std::size_t min_group = 10;
  std::uint64_t seed = 0;
  int threads = 1;
};

void add_eval(CLI::App* sub, EvalArgs& a) {
  sub->add_option("--archive", a.archive, "model archive from train")->required();
  sub->add_option("--bags", a.bags, "MILB bag file")->required();
  sub->add_option("--covariates", a.covariates, "covariate CSV (strata and multimodal inputs)");
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--strata", a.strata, "comma-separated covariate names to stratify by");
  opt(sub, "--bootstrap", a.bootstrap, "bootstrap resamples for the AUC interval");
  opt(sub, "--level", a.level, "interval level");
  opt(sub, "--qc-min-area", a.qc_min_area, "drop slides with less tissue (cm^2)");
  opt(sub, "--tile-size", a.tile_size, "tile edge in pixels (QC area)");
  opt(sub, "--mpp", a.mpp, "microns per pixel (QC area)");
  opt(sub, "--top-k", a.top_k, "ensemble size; 0 uses the archive value");
  opt(sub, "--min-group", a.min_group, "strata smaller than this are flagged");
  opt(sub, "--seed", a.seed, "bootstrap seed");
  opt(sub, "--threads", a.threads, "worker threads (results do not depend on it)");
}

void check_compatible(const ModelArchive& archive, const Dataset& dataset) {
  if (archive.feature_dim != dataset.feature_dim) {
    throw ShapeError("archive expects feature dimension D1=" + std::to_string(archive.feature_dim) +
                     " but bags have D1=" + std::to_string(dataset.feature_dim));
  }
  if (archive.mode == TrainMode::gma_multimodal && archive.n_covariates != dataset.n_covariates) {
    throw ShapeError("archive expects " + std::to_string(archive.n_covariates) +
                     " covariates but bags have " + std::to_string(dataset.n_covariates));
  }
}

void run_eval(const CLI::App& sub, const EvalArgs& a, std::ostream& out) {
  const ModelArchive archive = read_archive(a.archive);
  Dataset dataset = read_bags(a.bags);
  std::optional<CovariateTable> table;
  if (!a.covariates.empty()) {
    table = read_covariates_csv(a.covariates);
    if (archive.mode == TrainMode::gma_multimodal) apply_covariates(dataset, *table);
  }
  check_compatible(archive, dataset);
  const auto keys = split_list(a.strata);
  if (!keys.empty() && !table) throw ConfigError("--strata needs --covariates");
  std::map<std::string, std::size_t> column;
  for (std::size_t c = 0; c < kCovariateColumns; ++c) column[covariate_schema()[c].name] = c;
  for (const auto& key : keys) {
    if (!column.contains(key)) throw ConfigError("unknown stratum '" + key + "'");
  }

  std::vector<FeatureBag> kept;
  std::size_t dropped = 0;
  for (auto& bag : dataset.bags) {
    if (tissue_area_cm2(bag.tile_count_total, a.tile_size, a.mpp) < a.qc_min_area) {
      ++dropped;
    } else {
      kept.push_back(std::move(bag));
    }
  }
  if (kept.empty()) throw FormatError("eval: every slide failed QC");

  const std::size_t k = a.top_k == 0 ? archive.top_k : a.top_k;
  if (k > archive.models.size()) {
    throw ConfigError("--top-k " + std::to_string(k) + " exceeds the " + std::to_string(archive.models.size()) +
                      " archived models");
  }
  const std::vector<double> scores = topk_ensemble(archive.models, k, kept);
  std::vector<int> labels;
  for (const auto& bag : kept) labels.push_back(bag.label);
  ScoredSet scored = make_scored_set(scores, labels);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const CovariateRow* row = table ? table->find(kept[i].patient_id) : nullptr;
    for (const auto& key : keys) {
      const auto& value = row != nullptr ? row->values[column[key]] : std::nullopt;
      scored[i].strata[key] = value.value_or("NA");
    }
  }

  fs::create_directories(a.out_dir);
  {
    auto csv = open_out(fs::path(a.out_dir) / "scores.csv");
    csv << "slide_id,patient_id,label,score,tissue_area_cm2\n";
    for (std::size_t i = 0; i < kept.size(); ++i) {
      csv << kept[i].slide_id << ',' << kept[i].patient_id << ',' << int(kept[i].label) << ','
          << fmt(scores[i]) << ',' << fmt(tissue_area_cm2(kept[i].tile_count_total, a.tile_size, a.mpp))
          << '\n';
    }
  }
  json report = {{"n_models_available", archive.models.size()},
                 {"top_k", k},
                 {"n_slides", kept.size()},
                 {"n_dropped_qc", dropped},
                 {"qc_min_area_cm2", a.qc_min_area}};
  const bool two_class = std::count(labels.begin(), labels.end(), 1) > 0 &&
                         std::count(labels.begin(), labels.end(), 0) > 0;
  if (two_class) {
    const RocCurve curve = roc(scored);
    write_roc_csv(fs::path(a.out_dir) / "roc.csv", curve);
    const double area = auc(scored);
    const ConfidenceInterval ci = bootstrap_ci(scored, a.bootstrap, a.level, a.seed, a.threads);
    const YoudenPoint yp = youden_threshold(curve);
    report["auc"] = area;
    report["ci"] = {{"level", a.level}, {"low", ci.low}, {"high", ci.high}, {"resamples", a.bootstrap}};
    report["youden"] = {{"threshold", yp.threshold}, {"sensitivity", yp.sensitivity},
                        {"specificity", yp.specificity}, {"j", yp.j}};
    out << "auc " << std::setprecision(4) << area << " [" << ci.low << ", " << ci.high << "]\n";
  } else {
    report["auc"] = nullptr;
    out << "auc undefined (single-class slides)\n";
  }
  for (const auto& key : keys) {
    write_strata_csv(fs::path(a.out_dir) / ("strata_" + key + ".csv"), key, stratified_auc(scored, key, a.min_group));
  }
  write_json(fs::path(a.out_dir) / "eval_report.json", report);
  write_manifest(fs::path(a.out_dir) / "eval_manifest.json", sub);
  out << "slides " << kept.size() << "\ndropped " << dropped << '\n';
}

// --------------------------------------------------------------- attention

struct AttentionArgs {
  fs::path archive;
  fs::path bags;
  fs::path covariates;
  std::string out_dir;
  std::size_t rank = 0;
};

void add_attention(CLI::App* sub, AttentionArgs& a) {
  sub->add_option("--archive", a.archive, "model archive from train")->required();
  sub->add_option("--bags", a.bags, "MILB bag file with tile groups")->required();
  sub->add_option("--covariates", a.covariates, "covariate CSV (multimodal archives)");
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--rank", a.rank, "model rank by validation AUC (0 = best)");
}

void run_attention(const CLI::App& sub, const AttentionArgs& a, std::ostream& out) {
  const ModelArchive archive = read_archive(a.archive);
  if (archive.mode == TrainMode::tile_supervised) {
    throw ConfigError("attention needs a gma or gma_multimodal archive");
  }
  Dataset dataset = read_bags(a.bags);
  if (!a.covariates.empty() && archive.mode == TrainMode::gma_multimodal) {
    apply_covariates(dataset, read_covariates_csv(a.covariates));
  }
  check_compatible(archive, dataset);
  for (const auto& bag : dataset.bags) {
    if (bag.tile_groups.empty()) throw FormatError("attention: slide " + bag.slide_id + " has no tile groups");
  }
  const auto ranked = ranked_models(archive);
  if (a.rank >= ranked.size()) throw ConfigError("--rank exceeds the number of archived models");
  const TrainedModel& model = ranked[a.rank];

  std::vector<std::vector<SignedAttention<double>>> signed_all;
  fs::create_directories(a.out_dir);
  auto tiles = open_out(fs::path(a.out_dir) / "attention_tiles.csv");
  tiles << "slide_id,tile,group,sign,attention\n";
  for (const auto& bag : dataset.bags) {
    signed_all.push_back(signed_attention(bag, model.gma));
    const auto& sa = signed_all.back();
    for (std::size_t k = 0; k < sa.size(); ++k) {
      tiles << bag.slide_id << ',' << k << ',' << group_name(bag.tile_groups[k]) << ','
            << (sa[k].positive ? '+' : '-') << ',' << fmt(sa[k].attention) << '\n';
    }
  }
  const auto groups = attention_by_group(dataset.bags, signed_all);
  auto gcsv = open_out(fs::path(a.out_dir) / "attention_groups.csv");
  gcsv << "slide_id,group,n_positive,n_negative,median_positive,median_negative\n";
  auto opt_str = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("NA"); };
  for (const auto& g : groups) {
    gcsv << g.slide_id << ',' << group_name(g.group) << ',' << g.n_positive << ',' << g.n_negative << ','
         << opt_str(g.median_positive) << ',' << opt_str(g.median_negative) << '\n';
  }

  // Positive slides where witness tiles outrank background on median positive attention.
  std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> by_slide;
  for (const auto& g : groups) {
    auto& entry = by_slide[g.slide_id];
    (g.group == kWitnessGroup ? entry.first : entry.second) = g.median_positive;
  }
  std::size_t n_pos = 0, localized = 0;
  for (const auto& bag : dataset.bags) {
    if (bag.label != 1) continue;
    const bool has_witness = std::count(bag.tile_groups.begin(), bag.tile_groups.end(), kWitnessGroup) > 0;
    if (!has_witness) continue;
    ++n_pos;
    const auto& [w, b] = by_slide[bag.slide_id];
    if (w && (!b || *w > *b)) ++localized;
  }
  const double frac = n_pos == 0 ? 0.0 : static_cast<double>(localized) / static_cast<double>(n_pos);
  write_json(fs::path(a.out_dir) / "attention_summary.json",
             {{"split", model.split},
              {"replicate", model.replicate},
              {"positive_slides_with_witnesses", n_pos},
              {"witness_above_background", localized},
              {"fraction", frac}});
  write_manifest(fs::path(a.out_dir) / "attention_manifest.json", sub);
  out << "positive slides " << n_pos << "\nwitness median above background " << localized << " ("
      << std::setprecision(4) << 100.0 * frac << "%)\n";
}

// ------------------------------------------------------------------ impact

struct ImpactArgs {
  std::string country = "US";
  fs::path roc;
  fs::path overrides;
  std::string out_dir;
  double grid_step = 0.01;
  double margin = 0.05;
};

void add_impact(CLI::App* sub, ImpactArgs& a) {
  opt(sub, "--country", a.country, "country name, or 'all'");
  sub->add_option("--roc", a.roc, "ROC CSV (threshold,sensitivity,specificity)")->required();
  sub->add_option("--overrides", a.overrides, "JSON array of country statistics");
  opt(sub, "--out-dir", a.out_dir, "output directory");
  opt(sub, "--grid-step", a.grid_step, "sensitivity/specificity grid step");
  opt(sub, "--margin", a.margin, "relative budget margin");
}

void run_impact(const CLI::App& sub, const ImpactArgs& a, std::ostream& out) {
  const std::vector<CountryStats> registry =
      a.overrides.empty() ? builtin_countries() : load_country_overrides(a.overrides);
  std::vector<CountryStats> selected;
  if (a.country == "all") {
    selected = registry;
  } else {
    selected.push_back(find_country(registry, a.country));
  }
  if (!(a.grid_step > 0.0 && a.grid_step <= 0.5)) throw ConfigError("--grid-step must lie in (0, 0.5]");
  const RocCurve curve = read_roc_csv(a.roc);
  fs::create_directories(a.out_dir);

  json report = json::array();
  out << "country bound p_egfr p_test se sp screens budget sot_before sot_after reduction%\n";
  for (const auto& c : selected) {
    const auto rows = impact_report(c, curve, a.margin);
    write_impact_csv(fs::path(a.out_dir) / ("impact_" + c.name + ".csv"), c, rows);
    json jrows = json::array();
    for (const auto& r : rows) {
      write_grid_csv(fs::path(a.out_dir) / ("grid_" + c.name + "_" + r.bound + ".csv"),
                     sensitivity_grid(c.luad_cases(), r.p_egfr, r.p_test, a.grid_step));
      const double budget = r.p_test * c.luad_cases();
      jrows.push_back({{"bound", r.bound},
                       {"p_egfr", r.p_egfr},
                       {"p_test", r.p_test},
                       {"sensitivity", r.point.sensitivity},
                       {"specificity", r.point.specificity},
                       {"threshold", r.point.threshold},
                       {"positive_screens", r.point.positive_screens},
                       {"test_budget", budget},
                       {"within_margin", r.point.within_margin},
                       {"sot_before", r.sot_before},
                       {"sot_after", r.sot_after},
                       {"reduction_pct", r.reduction_pct ? json(*r.reduction_pct) : json(nullptr)}});
      out << c.name << ' ' << r.bound << ' ' << r.p_egfr << ' ' << r.p_test << ' ' << r.point.sensitivity
          << ' ' << r.point.specificity << ' ' << std::llround(r.point.positive_screens) << ' '
          << std::llround(budget) << ' ' << std::llround(r.sot_before) << ' ' << std::llround(r.sot_after)
          << ' ' << (r.reduction_pct ? std::to_string(std::lround(*r.reduction_pct)) : "NA")
          << (r.point.within_margin ? "" : " (outside margin)") << '\n';
    }
    report.push_back({{"country", c.name},
                      {"lung_cancers_per_year", c.lung_cancers_per_year},
                      {"luad_fraction", c.luad_fraction},
                      {"egfr_low", c.egfr_low},
                      {"egfr_high", c.egfr_high},
                      {"test_low", c.test_low},
                      {"test_high", c.test_high},
                      {"rows", jrows}});
  }
  write_json(fs::path(a.out_dir) / "impact_report.json", {{"roc", a.roc.string()}, {"margin", a.margin}, {"countries", report}});
  write_manifest(fs::path(a.out_dir) / "impact_manifest.json", sub);
}

// ------------------------------------------------------------------- trial

struct TrialArgs {
  std::int64_t n = 1000;
  std::optional<double> rate;
  std::optional<double> se;
  std::optional<double> sp;
  std::optional<double> prevalence;
  int trials = 10000;
  double confidence = 0.95;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out_dir;
};

void add_trial(CLI::App* sub, TrialArgs& a) {
  opt(sub, "--n", a.n, "patients screened");
  sub->add_option("--rate", a.rate, "positive rate of the screened population");
  sub->add_option("--se", a.se, "model sensitivity");
  sub->add_option("--sp", a.sp, "model specificity");
  sub->add_option("--prevalence", a.prevalence, "mutation prevalence");
  opt(sub, "--trials", a.trials, "simulated trials");
  opt(sub, "--confidence", a.confidence, "one-sided confidence of the lower bound");
  opt(sub, "--seed", a.seed, "simulation seed");
  opt(sub, "--threads", a.threads, "worker threads (results do not depend on it)");
  opt(sub, "--out-dir", a.out_dir, "output directory");
}

void run_trial(const CLI::App& sub, const TrialArgs& a, std::ostream& out) {
  const bool by_model = a.se || a.sp || a.prevalence;
  if (a.rate && by_model) throw ConfigError("give either --rate or --se/--sp/--prevalence");
  if (!a.rate && !(a.se && a.sp && a.prevalence)) {
    throw ConfigError("give --rate, or all of --se, --sp and --prevalence");
  }
  json report = {{"n_screened", a.n}, {"trials", a.trials}, {"confidence", a.confidence}, {"seed", a.seed}};
  if (a.rate) {
    const auto bound = simulate_enrollment(a.n, *a.rate, a.trials, a.confidence, a.seed, a.threads);
    report["rate"] = *a.rate;
    report["enrolled_lower_bound"] = bound;
    out << "rate " << *a.rate << "\nenrolled lower bound " << bound << '\n';
  } else {
    const double pr = precision(*a.prevalence, *a.se, *a.sp);
    const auto model_bound = simulate_enrollment(a.n, pr, a.trials, a.confidence, a.seed, a.threads);
    const auto random_bound = simulate_enrollment(a.n, *a.prevalence, a.trials, a.confidence, a.seed, a.threads);
    report["sensitivity"] = *a.se;
    report["specificity"] = *a.sp;
    report["prevalence"] = *a.prevalence;
    report["precision"] = pr;
    report["enrichment"] = enrichment(*a.prevalence, *a.se, *a.sp);
    report["model_arm_lower_bound"] = model_bound;
    report["random_arm_lower_bound"] = random_bound;
    out << "precision " << std::setprecision(4) << pr << "\nmodel arm lower bound " << model_bound
        << "\nrandom arm lower bound " << random_bound << '\n';
  }
  fs::create_directories(a.out_dir);
  write_json(fs::path(a.out_dir) / "trial_report.json", report);
  write_manifest(fs::path(a.out_dir) / "trial_manifest.json", sub);
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gated-attention MIL screening pipeline and screening-impact calculus", "milscreen"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  const std::string out_dir = default_out_dir().string();
  GenerateArgs gen;
  TileArgs tile;
  TrainArgs train;
  EvalArgs eval;
  AttentionArgs attn;
  ImpactArgs impact;
  TrialArgs trial;
  gen.out_dir = tile.out_dir = train.out_dir = eval.out_dir = attn.out_dir = impact.out_dir = trial.out_dir = out_dir;
  std::string config;

  auto* s_gen = app.add_subcommand("generate", "synthetic bags and covariate table");
  auto* s_tile = app.add_subcommand("tile", "tile P5 graymaps into a bag file");
  auto* s_train = app.add_subcommand("train", "split/replicate training protocol");
  auto* s_eval = app.add_subcommand("eval", "ensemble evaluation with QC, bootstrap and strata");
  auto* s_attn = app.add_subcommand("attention", "signed attention per tile and group");
  auto* s_impact = app.add_subcommand("impact", "sub-optimal treatment reduction tables");
  auto* s_trial = app.add_subcommand("trial", "trial enrollment lower bounds");
  add_generate(s_gen, gen);
  add_tile(s_tile, tile);
  add_train(s_train, train);
  add_eval(s_eval, eval);
  add_attention(s_attn, attn);
  add_impact(s_impact, impact);
  add_trial(s_trial, trial);
  for (auto* sub : {s_gen, s_tile, s_train, s_eval, s_attn, s_impact, s_trial}) {
    sub->add_option("--config", config, "JSON file of option values (a manifest also works)");
  }

  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    // Config values go right after the command name so explicit flags win.
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size()) {
        path = args[i + 1];
      } else if (args[i].rfind("--config=", 0) == 0) {
        path = args[i].substr(9);
      }
      if (path.empty()) continue;
      if (args.empty() || std::find(kCommands.begin(), kCommands.end(), args[0]) == kCommands.end()) {
        throw ConfigError("--config must follow a command name");
      }
      const auto extra = config_args(path);
      args.insert(args.begin() + 1, extra.begin(), extra.end());
      break;
    }
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  try {
    if (s_gen->parsed()) run_generate(*s_gen, gen, out);
    if (s_tile->parsed()) run_tile(*s_tile, tile, out, err);
    if (s_train->parsed()) run_train(*s_train, train, out);
    if (s_eval->parsed()) run_eval(*s_eval, eval, out);
    if (s_attn->parsed()) run_attention(*s_attn, attn, out);
    if (s_impact->parsed()) run_impact(*s_impact, impact, out);
    if (s_trial->parsed()) run_trial(*s_trial, trial, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitOk;
}

}  // namespace milscreen
