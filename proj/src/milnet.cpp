#include "milscreen/milnet.hpp"

#include <string>

namespace milscreen {

std::string group_name(std::uint8_t group) {
  switch (group) {
    case kBackgroundGroup:
      return "background";
    case kWitnessGroup:
      return "witness";
    default:
      return "group" + std::to_string(group);
  }
}

void Dataset::validate() const {
  for (const auto& bag : bags) {
    if (bag.features.rows() == 0) throw DomainError("bag " + bag.slide_id + ": empty bag");
    if (bag.features.cols() != static_cast<Eigen::Index>(feature_dim)) {
      throw ShapeError("bag " + bag.slide_id + ": features " + shape_str(bag.features) +
                       " but dataset D1=" + std::to_string(feature_dim));
    }
    if (bag.covariates.size() != static_cast<Eigen::Index>(n_covariates)) {
      throw ShapeError("bag " + bag.slide_id + ": " + std::to_string(bag.covariates.size()) +
                       " covariates but dataset declares " + std::to_string(n_covariates));
    }
    if (bag.label != 0 && bag.label != 1) {
      throw DomainError("bag " + bag.slide_id + ": label must be 0 or 1");
    }
    if (bag.has_groups() && bag.tile_groups.size() != static_cast<std::size_t>(bag.size())) {
      throw ShapeError("bag " + bag.slide_id + ": tile_groups length " +
                       std::to_string(bag.tile_groups.size()) + " for " +
                       std::to_string(bag.size()) + " tiles");
    }
  }
}

}  // namespace milscreen
