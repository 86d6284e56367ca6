#include "milscreen/slideprep.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace milscreen {

Histogram histogram(std::span<const std::uint8_t> pixels) {
  Histogram h{};
  for (std::uint8_t p : pixels) ++h[p];
  return h;
}

int otsu_threshold(const Histogram& hist) {
  double total = 0.0;
  double total_sum = 0.0;
  for (int i = 0; i < 256; ++i) {
    total += static_cast<double>(hist[i]);
    total_sum += static_cast<double>(i) * static_cast<double>(hist[i]);
  }
  if (total <= 0.0) throw DomainError("otsu_threshold: empty histogram");

  // Between-class variance scaled by total^2: (mu_T w0 - mu0)^2 / (w0 w1),
  // evaluated on integer-valued sums so equal candidates compare equal.
  int best_t = 0;
  double best = -1.0;
  double w0 = 0.0;
  double sum0 = 0.0;
  for (int t = 0; t < 256; ++t) {
    w0 += static_cast<double>(hist[t]);
    sum0 += static_cast<double>(t) * static_cast<double>(hist[t]);
    const double w1 = total - w0;
    double between = 0.0;
    if (w0 > 0.0 && w1 > 0.0) {
      const double diff = sum0 * total - total_sum * w0;
      between = diff * diff / (w0 * w1);
    }
    if (between > best) {
      best = between;
      best_t = t;
    }
  }
  return best_t;
}

TileGrid extract_tiles(const RasterSlide& slide, int tile_size, double min_foreground_frac) {
  if (tile_size <= 0) throw DomainError("extract_tiles: tile_size must be positive");
  if (!(min_foreground_frac >= 0.0 && min_foreground_frac <= 1.0)) {
    throw DomainError("extract_tiles: min_foreground_frac must lie in [0,1]");
  }
  if (slide.width < tile_size || slide.height < tile_size) {
    throw DomainError("extract_tiles: slide " + std::to_string(slide.width) + "x" +
                      std::to_string(slide.height) + " is smaller than one " +
                      std::to_string(tile_size) + "px tile");
  }
  TileGrid grid;
  grid.tile_size = tile_size;
  grid.threshold = otsu_threshold(histogram(slide.pixels));
  const auto needed = static_cast<std::uint64_t>(
      std::ceil(min_foreground_frac * static_cast<double>(tile_size) * tile_size - 1e-9));
  for (int y = 0; y + tile_size <= slide.height; y += tile_size) {
    for (int x = 0; x + tile_size <= slide.width; x += tile_size) {
      std::uint64_t tissue = 0;
      for (int yy = y; yy < y + tile_size; ++yy) {
        const std::uint8_t* row = slide.pixels.data() + static_cast<std::size_t>(yy) * slide.width;
        for (int xx = x; xx < x + tile_size; ++xx) tissue += row[xx] <= grid.threshold;
      }
      if (tissue >= needed) grid.tiles.push_back({x, y});
    }
  }
  return grid;
}

std::vector<std::uint8_t> tile_pixels(const RasterSlide& slide, TileCoord at, int tile_size) {
  if (at.x < 0 || at.y < 0 || at.x + tile_size > slide.width || at.y + tile_size > slide.height) {
    throw DomainError("tile_pixels: tile out of slide bounds");
  }
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(tile_size) * tile_size);
  for (int y = at.y; y < at.y + tile_size; ++y) {
    const auto* row = slide.pixels.data() + static_cast<std::size_t>(y) * slide.width;
    out.insert(out.end(), row + at.x, row + at.x + tile_size);
  }
  return out;
}

double tissue_area_cm2(std::uint64_t tile_count, int tile_size_px, double microns_per_pixel) {
  const double side_cm = static_cast<double>(tile_size_px) * microns_per_pixel * 1e-4;
  return static_cast<double>(tile_count) * side_cm * side_cm;
}

bool passes_tissue_qc(std::uint64_t tile_count, double min_area_cm2, int tile_size_px,
                      double microns_per_pixel) {
  return tissue_area_cm2(tile_count, tile_size_px, microns_per_pixel) >= min_area_cm2;
}

TileStats tile_stats(std::span<const std::uint8_t> tile, int tile_size, int threshold) {
  const auto n = static_cast<std::size_t>(tile_size) * static_cast<std::size_t>(tile_size);
  if (tile_size <= 0 || tile.size() != n) {
    throw ShapeError("tile_stats: expected " + std::to_string(n) + " pixels, got " +
                     std::to_string(tile.size()));
  }
  TileStats s;
  double sum = 0.0;
  double sum_sq = 0.0;
  std::size_t fg = 0;
  for (std::uint8_t p : tile) {
    s.histogram[p / 16] += 1.0;
    sum += p;
    sum_sq += static_cast<double>(p) * p;
    fg += p <= threshold;
  }
  const double count = static_cast<double>(n);
  for (double& b : s.histogram) b /= count;
  s.mean = sum / count;
  s.variance = std::max(0.0, sum_sq / count - s.mean * s.mean);
  s.foreground = static_cast<double>(fg) / count;

  double dx = 0.0;
  double dy = 0.0;
  for (int y = 0; y < tile_size; ++y) {
    for (int x = 0; x < tile_size; ++x) {
      const int p = tile[static_cast<std::size_t>(y) * tile_size + x];
      if (x + 1 < tile_size) dx += std::abs(tile[static_cast<std::size_t>(y) * tile_size + x + 1] - p);
      if (y + 1 < tile_size) dy += std::abs(tile[static_cast<std::size_t>(y + 1) * tile_size + x] - p);
    }
  }
  if (tile_size > 1) {
    const double pairs = static_cast<double>(tile_size - 1) * tile_size;
    s.gradient = dx / pairs + dy / pairs;
  }
  return s;
}

Vectord featurize_tile(std::span<const std::uint8_t> tile, int tile_size, int target_dim,
                       int threshold) {
  if (target_dim < 16) throw DomainError("featurize_tile: target_dim must be >= 16");
  const TileStats s = tile_stats(tile, tile_size, threshold);
  std::array<double, kTileStatCount> raw{};
  std::copy(s.histogram.begin(), s.histogram.end(), raw.begin());
  raw[16] = s.mean / 255.0;
  raw[17] = s.variance / (255.0 * 255.0);
  raw[18] = s.gradient / 255.0;
  raw[19] = s.foreground;
  Vectord out = Vectord::Zero(target_dim);
  const int n = std::min(target_dim, kTileStatCount);
  for (int i = 0; i < n; ++i) out(i) = raw[static_cast<std::size_t>(i)];
  return out;
}

namespace {

void skip_pgm_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string comment;
      std::getline(in, comment);
    } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      in.get();
    } else {
      return;
    }
  }
}

int read_pgm_int(std::istream& in, const char* what) {
  skip_pgm_space(in);
  int v = 0;
  if (!(in >> v) || v <= 0) throw FormatError(std::string("pgm: bad ") + what);
  return v;
}

}  // namespace

RasterSlide read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("pgm: cannot open " + path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw FormatError("pgm: bad magic in " + path.string());
  RasterSlide slide;
  slide.width = read_pgm_int(in, "width");
  slide.height = read_pgm_int(in, "height");
  if (read_pgm_int(in, "maxval") != 255) throw FormatError("pgm: only maxval 255 is supported");
  in.get();  // single whitespace before the payload
  slide.pixels.resize(static_cast<std::size_t>(slide.width) * slide.height);
  in.read(reinterpret_cast<char*>(slide.pixels.data()),
          static_cast<std::streamsize>(slide.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(slide.pixels.size())) {
    throw FormatError("pgm: truncated pixel payload in " + path.string());
  }
  return slide;
}

void write_pgm(const std::filesystem::path& path, const RasterSlide& slide) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("pgm: cannot write " + path.string());
  out << "P5\n" << slide.width << " " << slide.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(slide.pixels.data()),
            static_cast<std::streamsize>(slide.pixels.size()));
}

// ---- MILB bag file -------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'I', 'L', 'B'};

class LeWriter {
 public:
  explicit LeWriter(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }
  void u16(std::uint16_t v) { bytes(v, 2); }
  void u32(std::uint32_t v) { bytes(v, 4); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void str(const std::string& s) {
    if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("bag file: identifier longer than 65535 bytes");
    }
    u16(static_cast<std::uint16_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void raw(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }

 private:
  void bytes(std::uint32_t v, int n) {
    for (int i = 0; i < n; ++i) out_.put(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  std::ostream& out_;
};

class LeReader {
 public:
  explicit LeReader(std::istream& in) : in_(in) {}

  void raw(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("bag file: truncated");
  }
  std::uint8_t u8() {
    std::uint8_t b;
    raw(&b, 1);
    return b;
  }
  std::uint16_t u16() { return static_cast<std::uint16_t>(bytes(2)); }
  std::uint32_t u32() { return bytes(4); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    std::string s(u16(), '\0');
    if (!s.empty()) raw(s.data(), s.size());
    return s;
  }

 private:
  std::uint32_t bytes(int n) {
    unsigned char b[4] = {};
    raw(b, static_cast<std::size_t>(n));
    std::uint32_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
};

}  // namespace

void write_bags(std::ostream& out, const Dataset& dataset) {
  dataset.validate();
  LeWriter w(out);
  w.raw(kMagic, 4);
  w.u32(kBagFormatVersion);
  w.u32(dataset.feature_dim);
  w.u32(dataset.n_covariates);
  w.u32(static_cast<std::uint32_t>(dataset.bags.size()));
  for (const auto& bag : dataset.bags) {
    w.str(bag.slide_id);
    w.str(bag.patient_id);
    w.u8(static_cast<std::uint8_t>(bag.label));
    w.u32(bag.tile_count_total);
    w.u32(static_cast<std::uint32_t>(bag.size()));
    for (Eigen::Index i = 0; i < bag.covariates.size(); ++i) w.f32(bag.covariates(i));
    w.u8(bag.has_groups() ? 1 : 0);
    if (bag.has_groups()) w.raw(bag.tile_groups.data(), bag.tile_groups.size());
    for (Eigen::Index i = 0; i < bag.features.size(); ++i) w.f32(bag.features.data()[i]);
  }
  if (!out) throw FormatError("bag file: write failed");
}

Dataset read_bags(std::istream& in) {
  LeReader r(in);
  char magic[4];
  r.raw(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("bag file: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kBagFormatVersion) {
    throw FormatError("bag file: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  ds.feature_dim = r.u32();
  ds.n_covariates = r.u32();
  const std::uint32_t count = r.u32();
  ds.bags.reserve(std::min<std::uint32_t>(count, 1u << 16));
  for (std::uint32_t b = 0; b < count; ++b) {
    FeatureBag bag;
    bag.slide_id = r.str();
    bag.patient_id = r.str();
    bag.label = r.u8();
    bag.tile_count_total = r.u32();
    const std::uint32_t tiles = r.u32();
    bag.covariates.resize(ds.n_covariates);
    for (std::uint32_t i = 0; i < ds.n_covariates; ++i) bag.covariates(i) = r.f32();
    const std::uint8_t has_groups = r.u8();
    if (has_groups > 1) throw FormatError("bag file: bad group flag");
    if (has_groups == 1) {
      bag.tile_groups.resize(tiles);
      if (tiles > 0) r.raw(bag.tile_groups.data(), tiles);
    }
    bag.features.resize(tiles, ds.feature_dim);
    for (Eigen::Index i = 0; i < bag.features.size(); ++i) bag.features.data()[i] = r.f32();
    ds.bags.push_back(std::move(bag));
  }
  ds.validate();
  return ds;
}

void write_bags(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("bag file: cannot write " + path.string());
  write_bags(out, dataset);
}

Dataset read_bags(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("bag file: cannot open " + path.string());
  return read_bags(in);
}

}  // namespace milscreen
