#pragma once

// Desk-scale slide ingestion: graymap rasters, Otsu tissue detection,
// non-overlapping tiling, tissue-area QC, handcrafted tile features and the
// MILB bag file.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "milscreen/milnet.hpp"

namespace milscreen {

inline constexpr int kDefaultTileSize = 224;
inline constexpr double kDefaultMicronsPerPixel = 0.5;
inline constexpr double kDefaultQcMinAreaCm2 = 0.1;

struct RasterSlide {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major grayscale
  double microns_per_pixel = kDefaultMicronsPerPixel;

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
};

struct TileCoord {
  int x = 0;
  int y = 0;
  friend bool operator==(const TileCoord&, const TileCoord&) = default;
};

struct TileGrid {
  int tile_size = kDefaultTileSize;
  std::vector<TileCoord> tiles;  // top-left corners, grid aligned
  int threshold = 0;             // Otsu level; pixels <= threshold are tissue
};

using Histogram = std::array<std::uint64_t, 256>;

Histogram histogram(std::span<const std::uint8_t> pixels);

/// Level t maximizing between-class variance of {<= t} vs {> t}; ties go to
/// the lowest t.
int otsu_threshold(const Histogram& hist);

/// Grid tiles whose tissue fraction reaches min_foreground_frac.
TileGrid extract_tiles(const RasterSlide& slide, int tile_size = kDefaultTileSize,
                       double min_foreground_frac = 0.5);

/// Pixels of one tile, row-major.
std::vector<std::uint8_t> tile_pixels(const RasterSlide& slide, TileCoord at, int tile_size);

double tissue_area_cm2(std::uint64_t tile_count, int tile_size_px = kDefaultTileSize,
                       double microns_per_pixel = kDefaultMicronsPerPixel);

bool passes_tissue_qc(std::uint64_t tile_count, double min_area_cm2 = kDefaultQcMinAreaCm2,
                      int tile_size_px = kDefaultTileSize,
                      double microns_per_pixel = kDefaultMicronsPerPixel);

/// Raw statistics behind featurize_tile.
struct TileStats {
  std::array<double, 16> histogram{};  // normalized, 16 equal-width bins
  double mean = 0;                     // gray levels
  double variance = 0;
  double gradient = 0;  // mean |dx| + mean |dy| over neighbour pairs
  double foreground = 0;
};

TileStats tile_stats(std::span<const std::uint8_t> tile, int tile_size, int threshold);

inline constexpr int kTileStatCount = 20;

/// 16 histogram bins, mean/255, variance/255^2, gradient/255, foreground
/// fraction; zero-padded to target_dim.
Vectord featurize_tile(std::span<const std::uint8_t> tile, int tile_size, int target_dim,
                       int threshold = 127);

/// Binary 8-bit portable graymap ("P5", maxval 255).
RasterSlide read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const RasterSlide& slide);

inline constexpr std::uint32_t kBagFormatVersion = 1;

void write_bags(std::ostream& out, const Dataset& dataset);
Dataset read_bags(std::istream& in);
void write_bags(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_bags(const std::filesystem::path& path);

}  // namespace milscreen
