#pragma once

// Experiment protocol: patient-level splits, training loops with per-epoch
// subsampling and class weighting, replicate selection and top-k ensembling.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "milscreen/milnet.hpp"

namespace milscreen {

struct Split {
  std::vector<std::string> train;       // patient ids, sorted
  std::vector<std::string> validation;  // patient ids, sorted
};

struct SplitPlan {
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  std::vector<Split> splits;
};

/// n_splits independent shuffles of the unique patient ids; each split puts
/// round(train_frac * n) patients in training and the rest in validation.
SplitPlan make_splits(std::vector<std::string> patient_ids, int n_splits = 20,
                      double train_frac = 0.8, std::uint64_t seed = 0);

/// Bag indices of a split side.
std::vector<std::size_t> bags_of(const Dataset& dataset, const std::vector<std::string>& patients);

enum class TrainMode { tile_supervised, gma, gma_multimodal };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

struct TrainConfig {
  TrainMode mode = TrainMode::gma;
  int epochs = 50;
  OptimizerKind optimizer = OptimizerKind::adam;
  double learning_rate = 1e-4;
  double momentum = 0.0;
  int lr_decay_period = 0;  // sgd step decay every N epochs; 0 = off
  double lr_decay_factor = 0.1;
  double pos_weight = 0.7;
  double sample_fraction = 0.1;  // of slides (gma modes) or of each slide's tiles (tile mode)
  int replicates = 3;
  int hidden_dim = 512;
  double fusion_alpha = 0.4;  // weight of both histology and fused terms
  bool extractor_half_split = false;
  std::uint64_t seed = 0;

  void validate() const;

  /// Full-scale tile-level schedule: SGD 0.05, x0.1
  /// every 10 epochs, 30 epochs, 10% of each slide's tiles per epoch.
  static TrainConfig full_tile_supervised();
  /// Full-scale schedule: Adam 1e-4 for 50 epochs on 10% of the slides per epoch.
  static TrainConfig full_gma();
  /// Settings that converge on small synthetic cohorts in seconds.
  static TrainConfig desk(TrainMode mode);
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double val_auc = 0;  // NaN when the validation side is single-class
};

/// A trained model of any mode plus its provenance.
struct TrainedModel {
  TrainMode mode = TrainMode::gma;
  GmaModel<double> gma;
  TileScorer<double> tile;
  int split = 0;
  int replicate = 0;
  double val_auc = 0;
  std::vector<EpochRecord> history;
};

/// Positive-class probability for one bag.
double predict(const TrainedModel& model, const FeatureBag& bag);

/// Called once per epoch with the slide indices (into the dataset) visited.
using EpochObserver = std::function<void(int epoch, std::span<const std::size_t> slides)>;

/// Trains one replicate on one split. Every random draw comes from seeds
/// derived from (config.seed, split_index, replicate, epoch).
TrainedModel train(const Dataset& dataset, const Split& split, const TrainConfig& config,
                   int split_index = 0, int replicate = 0, const EpochObserver& observer = {});

/// Index of the best final validation AUC; ties and NaNs resolved toward the
/// lowest index.
std::size_t select_replicate(const std::vector<std::vector<EpochRecord>>& histories);
std::size_t select_replicate(const std::vector<double>& final_aucs);

/// Mean positive probability of the k models with the highest stored
/// validation AUC.
std::vector<double> topk_ensemble(const std::vector<TrainedModel>& models, std::size_t k,
                                  const std::vector<FeatureBag>& bags);

/// alpha * hist + alpha/2 * aux + alpha * fused.
double joint_loss(double l_hist, double l_aux, double l_fused, double alpha = 0.4);

struct ProtocolConfig {
  int n_splits = 20;
  double train_fraction = 0.8;
  std::size_t top_k = 10;
  TrainConfig train;
  int threads = 1;
};

struct SplitOutcome {
  std::vector<TrainedModel> replicates;
  std::size_t chosen = 0;
  const TrainedModel& winner() const { return replicates[chosen]; }
};

struct ProtocolResult {
  SplitPlan plan;
  std::vector<SplitOutcome> splits;

  std::vector<TrainedModel> winners() const;
  double mean_validation_auc() const;
};

/// Splits, replicate training (in parallel over `threads` workers, results
/// identical to a sequential run) and replicate selection.
ProtocolResult run_protocol(const Dataset& dataset, const ProtocolConfig& config);

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace milscreen
