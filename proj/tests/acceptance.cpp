// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "cli_support.hpp"
#include "milscreen/impact.hpp"
#include "milscreen/metrics.hpp"
#include "milscreen/protocol.hpp"
#include "milscreen/synthgen.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace milscreen;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kSotBeforeTol = 1.0;
constexpr double kSotAfterRelTol = 0.05;
constexpr double kBudgetRelTol = 0.05;
constexpr long kEnrollTarget = 142;
constexpr long kEnrollTol = 3;
constexpr double kGradTol = 1e-4;
constexpr double kRocAreaTol = 1e-12;
constexpr int kMechanismSplits = 10;
constexpr double kLocalizationMin = 0.80;
constexpr double kLogisticTol = 1e-3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct TableRow {
  const char* country;
  const char* bound;
  double se, sp, sot_before, sot_after;
};

// Reference operating points and outcomes per country and bound.
const std::vector<TableRow>& table() {
  static const std::vector<TableRow> rows = {
      {"US", "low", 0.992, 0.263, 2214, 76},          {"US", "high", 0.974, 0.356, 6601, 612},
      {"China", "low", 0.852, 0.770, 102587, 28029},  {"China", "high", 0.728, 0.864, 142944, 67036},
      {"Brazil", "low", 0.902, 0.665, 569, 90},       {"Brazil", "high", 0.836, 0.797, 1992, 527},
      {"Germany", "low", 0.967, 0.378, 838, 81},      {"Germany", "high", 0.967, 0.390, 1066, 103},
  };
  return rows;
}

struct RowInputs {
  double n_luad, p_egfr, p_test;
};

// Low bound pairs the lowest mutation rate with the highest testing rate.
RowInputs inputs(const TableRow& row) {
  const auto& c = find_country(builtin_countries(), row.country);
  const bool low = std::string(row.bound) == "low";
  return {c.lung_cancers_per_year * c.luad_fraction, low ? c.egfr_low : c.egfr_high,
          low ? c.test_high : c.test_low};
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s.precision(digits);
  s << std::fixed << v;
  return s.str();
}

Outcome sot_before() {
  double worst = 0;
  for (const auto& row : table()) {
    const auto in = inputs(row);
    worst = std::max(worst, std::abs(sot_current(in.n_luad, in.p_egfr, in.p_test) - row.sot_before));
  }
  return {worst <= kSotBeforeTol, "max |diff| " + fixed(worst)};
}

Outcome sot_after_table() {
  double worst = 0;
  for (const auto& row : table()) {
    const auto in = inputs(row);
    const double got = milscreen::sot_after(in.n_luad, in.p_egfr, row.se, row.sp);
    worst = std::max(worst, std::abs(got - row.sot_after) / row.sot_after);
  }
  return {worst <= kSotAfterRelTol, "max rel diff " + fixed(worst)};
}

Outcome budget() {
  double worst = 0;
  for (const auto& row : table()) {
    const auto in = inputs(row);
    const double budget = in.p_test * in.n_luad;
    worst = std::max(worst, std::abs(positive_screens(in.n_luad, in.p_egfr, row.se, row.sp) - budget) / budget);
  }
  // the selector must also land on these points from the reference curve
  const auto curve = read_roc_csv(testsupport::data_dir() / "reference_operating_points_roc.csv");
  bool selected = true;
  for (const auto& row : table()) {
    const auto in = inputs(row);
    const auto op = find_operating_point(curve, in.n_luad, in.p_egfr, in.p_test * in.n_luad);
    selected = selected && op.within_margin && op.sensitivity == row.se && op.specificity == row.sp;
  }
  return {worst <= kBudgetRelTol && selected,
          "max rel diff " + fixed(worst) + (selected ? ", selector agrees" : ", selector disagrees")};
}

Outcome enrollment() {
  const long got = simulate_enrollment(1000, 0.16, 10000, 0.95);
  long worst = 0;
  for (int i = 1; i <= 12; ++i) {
    const double r = 0.05 * i;
    worst = std::max(worst, std::abs(static_cast<long>(simulate_enrollment(1000, r, 10000, 0.95)) -
                                     oracle::normal_enrollment(1000, r)));
  }
  return {std::abs(got - kEnrollTarget) <= kEnrollTol && worst <= kEnrollTol,
          "bound " + std::to_string(got) + ", max normal-oracle gap " + std::to_string(worst)};
}

Outcome gradients() {
  Rng rng(2024);
  double worst = 0;
  int instances = 0;
  const std::array<LossHead<double>, 3> heads = {LossHead<double>::histology_only(), LossHead<double>::fused_only(),
                                                 LossHead<double>::joint(0.4)};
  for (int i = 0; i < 20; ++i, ++instances) {
    const int b = std::array{1, 2, 5}[static_cast<std::size_t>(i % 3)];
    const FeatureBag bag = testsupport::random_bag(b, 8, 3, rng);
    const auto model = init_gma(8, 4, 3, 500 + static_cast<std::uint64_t>(i));
    worst = std::max(worst, oracle::max_grad_error(bag, model, i % 2, heads[static_cast<std::size_t>(i % 3)]));
  }
  return {worst <= kGradTol, std::to_string(instances) + " instances, max rel err " + fixed(worst * 1e6, 3) + "e-6"};
}

Outcome auc_oracle() {
  Rng rng(99);
  std::uniform_int_distribution<std::size_t> size(2, 200);
  int exact = 0;
  double worst_area = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = size(rng);
    std::uniform_int_distribution<int> level(0, 1 + t % 20);  // few levels force ties
    std::bernoulli_distribution lab(0.35);
    std::vector<double> s;
    std::vector<int> y;
    for (std::size_t i = 0; i < n; ++i) {
      y.push_back(i < 2 ? static_cast<int>(i) : lab(rng));
      s.push_back(level(rng) * 0.1 + 0.05 * y.back());
    }
    const auto set = make_scored_set(s, y);
    exact += auc(set) == oracle::brute_auc(s, y);
    worst_area = std::max(worst_area, std::abs(roc_area(roc(set)) - auc(set)));
  }
  return {exact == 100 && worst_area <= kRocAreaTol,
          std::to_string(exact) + "/100 exact, max area gap " + [&] {
            std::ostringstream o;
            o << std::scientific << std::setprecision(1) << worst_area;
            return o.str();
          }()};
}

Outcome otsu() {
  Rng rng(7);
  int agree = 0;
  for (int t = 0; t < 1000; ++t) {
    Histogram h{};
    // mixture of dense, sparse and bimodal shapes
    const int kind = t % 3;
    std::uniform_int_distribution<int> bin(0, 255);
    std::uniform_int_distribution<std::uint64_t> count(0, 1000);
    if (kind == 0) {
      for (auto& c : h) c = count(rng);
    } else if (kind == 1) {
      for (int k = 0; k < 1 + t % 7; ++k) h[static_cast<std::size_t>(bin(rng))] += 1 + count(rng);
    } else {
      std::normal_distribution<double> a(60 + t % 40, 15), b(200 - t % 30, 20);
      for (int k = 0; k < 5000; ++k) {
        const double v = k % 3 ? b(rng) : a(rng);
        ++h[static_cast<std::size_t>(std::clamp(static_cast<int>(std::lround(v)), 0, 255))];
      }
    }
    if (std::all_of(h.begin(), h.end(), [](auto c) { return c == 0; })) h[0] = 1;
    agree += otsu_threshold(h) == oracle::otsu(h);
  }
  return {agree == 1000, std::to_string(agree) + "/1000 agree"};
}

struct MechanismRun {
  std::map<TrainMode, double> mean_auc;      // over split winners
  std::map<TrainMode, double> replicate_auc; // over every replicate, for context
  std::vector<TrainedModel> gma_winners;
};

MechanismRun train_all_modes(const Dataset& dataset) {
  MechanismRun run;
  for (const TrainMode mode : {TrainMode::tile_supervised, TrainMode::gma, TrainMode::gma_multimodal}) {
    ProtocolConfig pc;
    pc.n_splits = kMechanismSplits;
    pc.train = TrainConfig::desk(mode);
    const auto result = run_protocol(dataset, pc);
    run.mean_auc[mode] = result.mean_validation_auc();
    double sum = 0;
    int n = 0;
    for (const auto& split : result.splits) {
      for (const auto& m : split.replicates) sum += m.val_auc, ++n;
    }
    run.replicate_auc[mode] = sum / n;
    if (mode == TrainMode::gma) run.gma_winners = result.winners();
  }
  return run;
}

Outcome mechanism(const MechanismRun& run) {
  const double tile = run.mean_auc.at(TrainMode::tile_supervised);
  const double gma = run.mean_auc.at(TrainMode::gma);
  const double multi = run.mean_auc.at(TrainMode::gma_multimodal);
  const auto& r = run.replicate_auc;
  return {gma > tile && multi > gma,
          "tile " + fixed(tile) + ", gma " + fixed(gma) + ", gma_multimodal " + fixed(multi) +
              " (all replicates: " + fixed(r.at(TrainMode::tile_supervised)) + ", " + fixed(r.at(TrainMode::gma)) +
              ", " + fixed(r.at(TrainMode::gma_multimodal)) + ")"};
}

Outcome localization(const MechanismRun& run) {
  const TrainedModel* best = &run.gma_winners.front();
  for (const auto& m : run.gma_winners) {
    if (m.val_auc > best->val_auc) best = &m;
  }
  SynthConfig test_cfg;
  test_cfg.seed = 7;
  const auto test = generate(test_cfg).dataset;
  int n = 0, hit = 0;
  for (const auto& bag : test.bags) {
    if (bag.label != 1) continue;
    const auto sa = signed_attention(bag, best->gma);
    std::vector<double> witness, background;
    for (std::size_t k = 0; k < sa.size(); ++k) {
      if (!sa[k].positive) continue;
      (bag.tile_groups[k] == kWitnessGroup ? witness : background).push_back(sa[k].attention);
    }
    if (std::count(bag.tile_groups.begin(), bag.tile_groups.end(), kWitnessGroup) == 0) continue;
    ++n;
    hit += !witness.empty() && (background.empty() || median(witness) > median(background));
  }
  const double frac = n ? static_cast<double>(hit) / n : 0.0;
  return {frac >= kLocalizationMin, std::to_string(hit) + "/" + std::to_string(n) + " = " + fixed(frac)};
}

Outcome qc() {
  const bool ok = passes_tissue_qc(798) && !passes_tissue_qc(797);
  return {ok, "798 -> " + std::string(passes_tissue_qc(798) ? "pass" : "fail") + ", 797 -> " +
                  (passes_tissue_qc(797) ? "pass" : "fail")};
}

// Data files (manifests excluded) of two output trees are byte-identical.
bool same_outputs(const fs::path& a, const fs::path& b, std::string& why) {
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    if (rel.filename().string().find("manifest") != std::string::npos) continue;
    ++files;
    if (!fs::exists(b / rel) || testsupport::slurp(e.path()) != testsupport::slurp(b / rel)) {
      why = rel.string() + " differs";
      return false;
    }
  }
  if (files == 0) why = "no outputs in " + a.string();
  return files > 0;
}

Outcome determinism() {
  using testsupport::run_cli;
  const auto root = testsupport::scratch("acceptance_det");
  const std::string r = root.string();
  std::vector<std::string> failures;
  auto must = [&](const std::vector<std::string>& args) {
    const auto res = run_cli(args);
    if (res.code != 0) failures.push_back(args[0] + " exited " + std::to_string(res.code) + ": " + res.err);
    return res.code == 0;
  };
  // One first run per command; each is then replayed from its manifest.
  struct Step {
    std::vector<std::string> args;
    std::string dir;
    std::string manifest;
  };
  const std::string data_roc = (testsupport::data_dir() / "reference_operating_points_roc.csv").string();
  {
    RasterSlide s{448, 448, std::vector<std::uint8_t>(448 * 448, 230)};
    for (int y = 0; y < 448; ++y) {
      for (int x = 0; x < 448; ++x) {
        if ((x - 200) * (x - 200) + (y - 230) * (y - 230) < 190 * 190) {
          s.pixels[static_cast<std::size_t>(y * 448 + x)] = static_cast<std::uint8_t>(50 + (x * 7 + y * 3) % 90);
        }
      }
    }
    fs::create_directories(root / "raw");
    write_pgm(root / "raw" / "a.pgm", s);
    std::ofstream list(root / "raw" / "slides.csv");
    list << "path,slide_id,patient_id,label\na.pgm,A,PA,1\n";
  }
  const std::vector<Step> steps = {
      {{"generate", "--patients", "40", "--name", "train"}, "gen", "train_manifest.json"},
      {{"generate", "--patients", "30", "--seed", "3", "--name", "test"}, "gen_test", "test_manifest.json"},
      {{"tile", "--list", (root / "raw" / "slides.csv").string()}, "tile", "tile_manifest.json"},
      {{"train", "--bags", r + "/gen/train.milb", "--covariates", r + "/gen/train_covariates.csv", "--mode",
        "gma_multimodal", "--splits", "3", "--top-k", "2", "--epochs", "5", "--threads", "1"},
       "train",
       "train_manifest.json"},
      {{"eval", "--archive", r + "/train/archive.json", "--bags", r + "/gen_test/test.milb", "--covariates",
        r + "/gen_test/test_covariates.csv", "--strata", "smoking,sex", "--bootstrap", "300", "--threads", "1"},
       "eval",
       "eval_manifest.json"},
      {{"attention", "--archive", r + "/train/archive.json", "--bags", r + "/gen_test/test.milb", "--covariates",
        r + "/gen_test/test_covariates.csv"},
       "attention",
       "attention_manifest.json"},
      {{"impact", "--country", "all", "--roc", data_roc}, "impact", "impact_manifest.json"},
      {{"trial", "--se", "0.8", "--sp", "0.85", "--prevalence", "0.16", "--trials", "4000", "--threads", "1"},
       "trial",
       "trial_manifest.json"},
  };
  int replayed = 0;
  for (const auto& step : steps) {
    auto first = step.args;
    first.insert(first.end(), {"--out-dir", r + "/" + step.dir});
    if (!must(first)) continue;
    const std::string again = r + "/replay_" + step.dir;
    if (!must({step.args[0], "--config", r + "/" + step.dir + "/" + step.manifest, "--out-dir", again})) continue;
    std::string why;
    if (!same_outputs(root / step.dir, again, why)) failures.push_back(step.args[0] + " replay: " + why);
    ++replayed;
  }
  // Multi-threaded reruns of the parallel commands.
  const std::vector<std::pair<std::string, std::string>> parallel = {
      {"train", "train_manifest.json"}, {"eval", "eval_manifest.json"}, {"trial", "trial_manifest.json"}};
  for (const auto& [cmd, manifest] : parallel) {
    const std::string out = r + "/threads_" + cmd;
    if (!must({cmd, "--config", r + "/" + cmd + "/" + manifest, "--threads", "3", "--out-dir", out})) continue;
    std::string why;
    if (!same_outputs(root / cmd, out, why)) failures.push_back(cmd + " --threads 3: " + why);
  }
  std::string detail = std::to_string(replayed) + " commands replayed, 3 thread checks";
  for (const auto& f : failures) detail += "; " + f;
  return {failures.empty(), detail};
}

Outcome logistic() {
  Tensor2Dd X(80, 1);
  std::vector<int> y;
  for (int i = 0; i < 80; ++i) {
    const bool exposed = i < 40;
    X(i, 0) = exposed;
    y.push_back(exposed ? (i < 30) : (i < 50));
  }
  const auto fit = logistic_importance(X, y, {"x"});
  const double coef = fit.coefficients.at(1).coefficient;
  const double se = fit.coefficients.at(1).std_error;
  const double se_expect = std::sqrt(1 / 30.0 + 1 / 10.0 + 1 / 10.0 + 1 / 30.0);
  return {std::abs(coef - std::log(9.0)) <= kLogisticTol && std::abs(se - se_expect) <= kLogisticTol,
          "coef " + fixed(coef, 6) + ", se " + fixed(se, 6)};
}

}  // namespace

int main() {
  int failed = 0;
  auto report = [&](int id, const std::string& name, double limit_s, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = limit_s <= 0 || secs <= limit_s;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << "  [" << id << "] " << name << ": " << o.detail << " ("
              << fixed(secs, 2) << " s" << (in_time ? "" : ", over time budget") << ")" << std::endl;
  };

  report(1, "SOT before reproduces the reference counts", 1, sot_before);
  report(2, "SOT after at the reference operating points", 1, sot_after_table);
  report(3, "positive screens stay within the testing budget", 0, budget);
  report(4, "trial enrollment lower bound", 5, enrollment);
  report(5, "gated attention gradients match finite differences", 10, gradients);
  report(6, "AUC equals pairwise counting", 0, auc_oracle);
  report(7, "Otsu equals exhaustive scan", 0, otsu);

  MechanismRun run;
  report(8, "gma beats tile supervision and covariates help", 600, [&] {
    run = train_all_modes(generate(SynthConfig{}).dataset);
    return mechanism(run);
  });
  report(9, "attention localizes witness tiles", 0, [&] {
    if (run.gma_winners.empty()) return Outcome{false, "no gma models"};
    return localization(run);
  });
  report(10, "tissue QC boundary", 0, qc);
  report(11, "CLI replay and thread determinism", 0, determinism);
  report(12, "logistic importance on a 2x2 table", 0, logistic);

  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << std::endl;
  return failed == 0 ? 0 : 1;
}
