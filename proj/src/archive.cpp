#include "milscreen/archive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"

namespace milscreen {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "milscreen-archive";
constexpr int kVersion = 1;

json tensor_json(const Tensor2Dd& t) {
  return {{"rows", t.rows()}, {"cols", t.cols()},
          {"data", std::vector<double>(t.data(), t.data() + t.size())}};
}

Tensor2Dd tensor_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw FormatError("archive: tensor data length does not match its shape");
  }
  Tensor2Dd t(rows, cols);
  std::copy(data.begin(), data.end(), t.data());
  return t;
}

json nan_as_null(double v) { return std::isnan(v) ? json(nullptr) : json(v); }
double null_as_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace

std::string train_config_json(const TrainConfig& c) {
  json j = {{"mode", to_string(c.mode)},
            {"epochs", c.epochs},
            {"optimizer", c.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"lr_decay_period", c.lr_decay_period},
            {"lr_decay_factor", c.lr_decay_factor},
            {"pos_weight", c.pos_weight},
            {"sample_fraction", c.sample_fraction},
            {"replicates", c.replicates},
            {"hidden_dim", c.hidden_dim},
            {"fusion_alpha", c.fusion_alpha},
            {"extractor_half_split", c.extractor_half_split},
            {"seed", c.seed}};
  return j.dump();
}

void write_archive(const std::filesystem::path& path, const ModelArchive& archive) {
  json models = json::array();
  for (const auto& m : archive.models) {
    json params = json::object();
    if (m.mode == TrainMode::tile_supervised) {
      m.tile.for_each([&](std::string_view name, const Tensor2Dd& t) { params[std::string(name)] = tensor_json(t); });
    } else {
      m.gma.for_each([&](std::string_view name, const Tensor2Dd& t) { params[std::string(name)] = tensor_json(t); });
    }
    json history = json::array();
    for (const auto& h : m.history) history.push_back({h.epoch, h.loss, nan_as_null(h.val_auc)});
    models.push_back({{"split", m.split},
                      {"replicate", m.replicate},
                      {"val_auc", nan_as_null(m.val_auc)},
                      {"history", history},
                      {"params", params}});
  }
  json doc = {{"format", kFormat},
              {"version", kVersion},
              {"mode", to_string(archive.mode)},
              {"feature_dim", archive.feature_dim},
              {"n_covariates", archive.n_covariates},
              {"top_k", archive.top_k},
              {"train_config", json::parse(archive.train_config_json.empty() ? "{}" : archive.train_config_json)},
              {"models", models}};
  std::ofstream out(path);
  if (!out) throw FormatError("archive: cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

ModelArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("archive: cannot open " + path.string());
  ModelArchive archive;
  try {
    const json doc = json::parse(in);
    if (doc.at("format").get<std::string>() != kFormat) throw FormatError("archive: not a model archive");
    if (doc.at("version").get<int>() != kVersion) throw FormatError("archive: unsupported version");
    archive.mode = parse_train_mode(doc.at("mode").get<std::string>());
    archive.feature_dim = doc.at("feature_dim").get<std::uint32_t>();
    archive.n_covariates = doc.at("n_covariates").get<std::uint32_t>();
    archive.top_k = doc.at("top_k").get<std::size_t>();
    archive.train_config_json = doc.at("train_config").dump();
    for (const auto& jm : doc.at("models")) {
      TrainedModel m;
      m.mode = archive.mode;
      m.split = jm.at("split").get<int>();
      m.replicate = jm.at("replicate").get<int>();
      m.val_auc = null_as_nan(jm.at("val_auc"));
      for (const auto& h : jm.at("history")) {
        m.history.push_back({h.at(0).get<int>(), h.at(1).get<double>(), null_as_nan(h.at(2))});
      }
      const json& params = jm.at("params");
      if (m.mode == TrainMode::tile_supervised) {
        m.tile.for_each([&](std::string_view name, Tensor2Dd& t) { t = tensor_from(params.at(std::string(name))); });
        if (m.tile.W.rows() != 2 || m.tile.W.cols() != archive.feature_dim || m.tile.b.size() != 2) {
          throw FormatError("archive: tile scorer shape does not match feature_dim");
        }
      } else {
        m.gma.for_each([&](std::string_view name, Tensor2Dd& t) { t = tensor_from(params.at(std::string(name))); });
        const auto& g = m.gma;
        const bool ok = g.V.cols() == archive.feature_dim && g.U.rows() == g.V.rows() &&
                        g.U.cols() == g.V.cols() && g.w_attn.rows() == 1 && g.w_attn.cols() == g.V.rows() &&
                        g.W_cls.rows() == 2 && g.W_cls.cols() == g.V.cols() && g.b_cls.size() == 2 &&
                        g.W_fuse.rows() == 2 && g.W_fuse.cols() == 2 + static_cast<Eigen::Index>(archive.n_covariates) &&
                        g.b_fuse.size() == 2;
        if (!ok) throw FormatError("archive: model parameter shapes are inconsistent");
      }
      archive.models.push_back(std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("archive: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError("archive: " + std::string(e.what()));
  }
  return archive;
}

std::vector<TrainedModel> ranked_models(const ModelArchive& archive) {
  std::vector<TrainedModel> out = archive.models;
  auto key = [](const TrainedModel& m) {
    return std::isnan(m.val_auc) ? -std::numeric_limits<double>::infinity() : m.val_auc;
  };
  std::stable_sort(out.begin(), out.end(),
                   [&](const TrainedModel& a, const TrainedModel& b) { return key(a) > key(b); });
  return out;
}

}  // namespace milscreen
