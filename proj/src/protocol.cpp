#include "milscreen/protocol.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "milscreen/metrics.hpp"
#include "milscreen/rng.hpp"

namespace milscreen {

namespace {

// Stream tags keep derived seeds of different purposes apart.
constexpr std::uint64_t kSplitStream = 0x73706c6974;
constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kEpochStream = 0x65706f6368;
constexpr std::uint64_t kHalfStream = 0x68616c66;

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

/// First k entries of a uniformly random permutation.
template <class T>
std::vector<T> sample_without_replacement(std::vector<T> pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(rng() % (pool.size() - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

std::size_t fraction_count(double fraction, std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))));
}

OptimState<double> make_state(const TrainConfig& c) {
  if (c.optimizer == OptimizerKind::adam) return OptimState<double>::adam(c.learning_rate);
  return OptimState<double>::sgd(c.learning_rate, c.momentum, c.lr_decay_period, c.lr_decay_factor);
}

double validation_auc(const TrainedModel& model, const Dataset& dataset,
                      const std::vector<std::size_t>& val) {
  std::vector<double> scores;
  std::vector<int> labels;
  int pos = 0;
  for (std::size_t i : val) {
    scores.push_back(predict(model, dataset.bags[i]));
    labels.push_back(dataset.bags[i].label);
    pos += labels.back();
  }
  if (pos == 0 || pos == static_cast<int>(labels.size())) return std::numeric_limits<double>::quiet_NaN();
  return auc(scores, labels);
}

}  // namespace

SplitPlan make_splits(std::vector<std::string> patient_ids, int n_splits, double train_frac,
                      std::uint64_t seed) {
  std::sort(patient_ids.begin(), patient_ids.end());
  patient_ids.erase(std::unique(patient_ids.begin(), patient_ids.end()), patient_ids.end());
  if (patient_ids.size() < 5) throw DomainError("make_splits: need at least 5 patients");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw DomainError("make_splits: train_frac must lie in (0,1)");
  if (n_splits < 1) throw DomainError("make_splits: n_splits must be >= 1");
  const std::size_t n = patient_ids.size();
  const auto n_train = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(n)));
  if (n_train == 0 || n_train >= n) {
    throw DomainError("make_splits: too few patients for a non-empty train and validation set");
  }
  SplitPlan plan;
  plan.seed = seed;
  plan.train_fraction = train_frac;
  for (int s = 0; s < n_splits; ++s) {
    Rng rng(derive_seed(seed, {kSplitStream, static_cast<std::uint64_t>(s)}));
    std::vector<std::string> ids = patient_ids;
    shuffle(ids, rng);
    Split split;
    split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    plan.splits.push_back(std::move(split));
  }
  return plan;
}

std::vector<std::size_t> bags_of(const Dataset& dataset, const std::vector<std::string>& patients) {
  const std::set<std::string> wanted(patients.begin(), patients.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < dataset.bags.size(); ++i) {
    if (wanted.count(dataset.bags[i].patient_id)) out.push_back(i);
  }
  return out;
}

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::tile_supervised:
      return "tile";
    case TrainMode::gma:
      return "gma";
    case TrainMode::gma_multimodal:
      return "gma_multimodal";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& name) {
  if (name == "tile" || name == "tile_supervised") return TrainMode::tile_supervised;
  if (name == "gma") return TrainMode::gma;
  if (name == "gma_multimodal" || name == "multimodal") return TrainMode::gma_multimodal;
  throw ConfigError("unknown training mode '" + name + "' (tile, gma, gma_multimodal)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
  if (!(sample_fraction > 0.0 && sample_fraction <= 1.0)) {
    throw ConfigError("train config: sample fraction must lie in (0,1]");
  }
  if (!(learning_rate > 0.0)) throw ConfigError("train config: learning rate must be positive");
  if (!(pos_weight > 0.0 && pos_weight < 1.0)) throw ConfigError("train config: pos_weight must lie in (0,1)");
  if (replicates < 1) throw ConfigError("train config: replicates must be >= 1");
  if (hidden_dim < 1) throw ConfigError("train config: hidden_dim must be >= 1");
  if (!(fusion_alpha > 0.0)) throw ConfigError("train config: fusion alpha must be positive");
}

TrainConfig TrainConfig::full_tile_supervised() {
  TrainConfig c;
  c.mode = TrainMode::tile_supervised;
  c.epochs = 30;
  c.optimizer = OptimizerKind::sgd;
  c.learning_rate = 0.05;
  c.lr_decay_period = 10;
  c.lr_decay_factor = 0.1;
  c.sample_fraction = 0.1;
  return c;
}

TrainConfig TrainConfig::full_gma() {
  TrainConfig c;
  c.mode = TrainMode::gma;
  c.epochs = 50;
  c.optimizer = OptimizerKind::adam;
  c.learning_rate = 1e-4;
  c.sample_fraction = 0.1;
  return c;
}

TrainConfig TrainConfig::desk(TrainMode mode) {
  TrainConfig c = mode == TrainMode::tile_supervised ? full_tile_supervised() : full_gma();
  c.mode = mode;
  c.hidden_dim = 32;
  if (mode == TrainMode::tile_supervised) {
    c.epochs = 30;
    c.learning_rate = 0.01;
    c.sample_fraction = 0.5;
  } else {
    // validation AUC peaks early on small cohorts; longer runs memorize
    c.epochs = 8;
    c.learning_rate = 5e-4;
    c.sample_fraction = 0.5;
  }
  return c;
}

double predict(const TrainedModel& model, const FeatureBag& bag) {
  switch (model.mode) {
    case TrainMode::tile_supervised:
      return tile_supervised_score(bag, model.tile);
    case TrainMode::gma:
      return softmax(gma_forward(bag, model.gma).logits)(1);
    case TrainMode::gma_multimodal:
      return softmax(multimodal_forward(bag, model.gma).logits)(1);
  }
  return 0.0;
}

TrainedModel train(const Dataset& dataset, const Split& split, const TrainConfig& config,
                   int split_index, int replicate, const EpochObserver& observer) {
  config.validate();
  std::vector<std::size_t> train_bags = bags_of(dataset, split.train);
  const std::vector<std::size_t> val_bags = bags_of(dataset, split.validation);
  if (config.extractor_half_split) {
    // Keep only the half of the training patients not reserved for the
    // feature extractor.
    Rng rng(derive_seed(config.seed, {kHalfStream, static_cast<std::uint64_t>(split_index)}));
    std::vector<std::string> patients = split.train;
    shuffle(patients, rng);
    patients.resize(patients.size() - patients.size() / 2);
    train_bags = bags_of(dataset, patients);
  }
  if (train_bags.empty()) throw DomainError("train: empty training set");

  const auto s = static_cast<std::uint64_t>(split_index);
  const auto r = static_cast<std::uint64_t>(replicate);
  TrainedModel model;
  model.mode = config.mode;
  model.split = split_index;
  model.replicate = replicate;
  const std::uint64_t init_seed = derive_seed(config.seed, {kInitStream, s, r});
  if (config.mode == TrainMode::tile_supervised) {
    model.tile = init_tile_scorer(dataset.feature_dim, init_seed);
  } else {
    model.gma = init_gma(dataset.feature_dim, config.hidden_dim, dataset.n_covariates, init_seed);
  }

  // one optimizer state per parameter tensor
  std::vector<OptimState<double>> states(7, make_state(config));
  const LossHead<double> head = config.mode == TrainMode::gma_multimodal
                                    ? LossHead<double>::joint(config.fusion_alpha)
                                    : LossHead<double>::histology_only();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, {kEpochStream, s, r, static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    std::size_t steps = 0;
    std::vector<std::size_t> visited;

    if (config.mode == TrainMode::tile_supervised) {
      std::vector<std::pair<std::size_t, Eigen::Index>> items;
      for (std::size_t b : train_bags) {
        const auto n_tiles = static_cast<std::size_t>(dataset.bags[b].size());
        std::vector<Eigen::Index> tiles(n_tiles);
        std::iota(tiles.begin(), tiles.end(), Eigen::Index{0});
        for (Eigen::Index t : sample_without_replacement(std::move(tiles), fraction_count(config.sample_fraction, n_tiles), rng)) {
          items.emplace_back(b, t);
        }
      }
      shuffle(items, rng);
      visited = train_bags;
      for (const auto& [b, t] : items) {
        const FeatureBag& bag = dataset.bags[b];
        auto step = tile_backward(bag.features.row(t), model.tile, bag.label, config.pos_weight);
        optimizer_step(model.tile.W, step.grads.W, states[0], epoch);
        optimizer_step(model.tile.b, step.grads.b, states[1], epoch);
        loss_sum += step.loss;
        ++steps;
      }
    } else {
      visited = sample_without_replacement(train_bags, fraction_count(config.sample_fraction, train_bags.size()), rng);
      const bool fused = config.mode == TrainMode::gma_multimodal;
      for (std::size_t b : visited) {
        const FeatureBag& bag = dataset.bags[b];
        auto step = gma_backward(bag, model.gma, bag.label, config.pos_weight, head);
        std::size_t i = 0;
        for_each_pair(model.gma, step.grads, [&](std::string_view name, Tensor2Dd& param, const Tensor2Dd& grad) {
          const bool fusion_param = name == "W_fuse" || name == "b_fuse";
          if (fused || !fusion_param) optimizer_step(param, grad, states[i], epoch);
          ++i;
        });
        loss_sum += step.loss;
        ++steps;
      }
    }
    if (observer) observer(epoch, visited);
    model.history.push_back({epoch + 1, steps ? loss_sum / static_cast<double>(steps) : 0.0,
                             validation_auc(model, dataset, val_bags)});
  }
  model.val_auc = model.history.back().val_auc;
  return model;
}

std::size_t select_replicate(const std::vector<double>& final_aucs) {
  if (final_aucs.empty()) throw DomainError("select_replicate: no replicates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < final_aucs.size(); ++i) {
    const double a = final_aucs[i];
    const double b = final_aucs[best];
    if (!std::isnan(a) && (std::isnan(b) || a > b)) best = i;
  }
  return best;
}

std::size_t select_replicate(const std::vector<std::vector<EpochRecord>>& histories) {
  std::vector<double> finals;
  for (const auto& h : histories) {
    finals.push_back(h.empty() ? std::numeric_limits<double>::quiet_NaN() : h.back().val_auc);
  }
  return select_replicate(finals);
}

std::vector<double> topk_ensemble(const std::vector<TrainedModel>& models, std::size_t k,
                                  const std::vector<FeatureBag>& bags) {
  if (k == 0) throw DomainError("topk_ensemble: k must be >= 1");
  if (k > models.size()) {
    throw DomainError("topk_ensemble: k=" + std::to_string(k) + " exceeds " +
                      std::to_string(models.size()) + " models");
  }
  std::vector<std::size_t> order(models.size());
  std::iota(order.begin(), order.end(), 0);
  auto key = [&](std::size_t i) {
    const double v = models[i].val_auc;
    return std::isnan(v) ? -std::numeric_limits<double>::infinity() : v;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) > key(b); });
  std::vector<double> out(bags.size(), 0.0);
  for (std::size_t b = 0; b < bags.size(); ++b) {
    double sum = 0.0;
    for (std::size_t m = 0; m < k; ++m) sum += predict(models[order[m]], bags[b]);
    out[b] = sum / static_cast<double>(k);
  }
  return out;
}

double joint_loss(double l_hist, double l_aux, double l_fused, double alpha) {
  if (!std::isfinite(l_hist) || !std::isfinite(l_aux) || !std::isfinite(l_fused) || !std::isfinite(alpha)) {
    throw DomainError("joint_loss: non-finite input");
  }
  if (!(alpha > 0.0)) throw DomainError("joint_loss: alpha must be positive");
  return alpha * l_hist + alpha / 2.0 * l_aux + alpha * l_fused;
}

std::vector<TrainedModel> ProtocolResult::winners() const {
  std::vector<TrainedModel> out;
  for (const auto& s : splits) out.push_back(s.winner());
  return out;
}

double ProtocolResult::mean_validation_auc() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : splits) {
    if (!std::isnan(s.winner().val_auc)) {
      sum += s.winner().val_auc;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
}

ProtocolResult run_protocol(const Dataset& dataset, const ProtocolConfig& config) {
  config.train.validate();
  dataset.validate();
  std::vector<std::string> patients;
  for (const auto& bag : dataset.bags) patients.push_back(bag.patient_id);

  ProtocolResult result;
  result.plan = make_splits(patients, config.n_splits, config.train_fraction, config.train.seed);
  const auto n_splits = static_cast<std::size_t>(config.n_splits);
  const auto n_rep = static_cast<std::size_t>(config.train.replicates);
  result.splits.resize(n_splits);
  for (auto& s : result.splits) s.replicates.resize(n_rep);

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    while (true) {
      const std::size_t job = next.fetch_add(1);
      if (job >= n_splits * n_rep) return;
      const std::size_t s = job / n_rep;
      const std::size_t r = job % n_rep;
      try {
        result.splits[s].replicates[r] = train(dataset, result.plan.splits[s], config.train,
                                               static_cast<int>(s), static_cast<int>(r));
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int threads = std::max(1, config.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  for (auto& s : result.splits) {
    std::vector<double> finals;
    for (const auto& m : s.replicates) finals.push_back(m.val_auc);
    s.chosen = select_replicate(finals);
  }
  return result;
}

void write_history_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream out(path);
  if (!out) throw FormatError("history: cannot write " + path.string());
  out << "epoch,loss,val_auc\n" << std::setprecision(10);
  for (const auto& h : history) {
    out << h.epoch << ',' << h.loss << ',';
    if (std::isnan(h.val_auc)) {
      out << "NA";
    } else {
      out << h.val_auc;
    }
    out << '\n';
  }
}

}  // namespace milscreen
