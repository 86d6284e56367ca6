#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "milscreen/protocol.hpp"

namespace milscreen {

/// Split winners of a protocol run, stored as JSON.
struct ModelArchive {
  TrainMode mode = TrainMode::gma;
  std::uint32_t feature_dim = 0;
  std::uint32_t n_covariates = 0;
  std::size_t top_k = 10;
  std::string train_config_json;  // resolved training configuration
  std::vector<TrainedModel> models;
};

void write_archive(const std::filesystem::path& path, const ModelArchive& archive);
ModelArchive read_archive(const std::filesystem::path& path);

/// Models sorted by stored validation AUC, best first (stable).
std::vector<TrainedModel> ranked_models(const ModelArchive& archive);

std::string train_config_json(const TrainConfig& config);

}  // namespace milscreen
