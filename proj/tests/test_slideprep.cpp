#include <cmath>
#include <sstream>

#include "doctest.h"
#include "milscreen/slideprep.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace milscreen;

namespace {

RasterSlide uniform_slide(int w, int h, std::uint8_t v) {
  return {w, h, std::vector<std::uint8_t>(static_cast<std::size_t>(w * h), v)};
}

}  // namespace

TEST_CASE("otsu examples") {
  Histogram two{};
  two[0] = 40;
  two[255] = 60;
  CHECK(otsu_threshold(two) == 0);
  Histogram one{};
  one[77] = 9;
  CHECK(otsu_threshold(one) == 0);
  Histogram three{};
  three[10] = 50;
  three[200] = 50;
  three[205] = 50;
  CHECK(otsu_threshold(three) == oracle::otsu(three));
  CHECK(otsu_threshold(three) == 10);
  CHECK_THROWS_AS(otsu_threshold(Histogram{}), DomainError);
}

TEST_CASE("otsu matches the exhaustive scan on random sparse histograms") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    Histogram h{};
    std::uniform_int_distribution<int> bin(0, 255), count(1, 500);
    const int k = 1 + trial % 6;
    for (int i = 0; i < k; ++i) h[bin(rng)] += count(rng);
    CHECK(otsu_threshold(h) == oracle::otsu(h));
  }
}

TEST_CASE("tile extraction examples") {
  CHECK(extract_tiles(uniform_slide(448, 448, 255)).tiles.empty());
  CHECK(extract_tiles(uniform_slide(448, 448, 0)).tiles.size() == 4);
  RasterSlide half = uniform_slide(448, 224, 255);
  for (int y = 0; y < 224; ++y) {
    for (int x = 0; x < 224; ++x) half.pixels[static_cast<std::size_t>(y * 448 + x)] = 40;
  }
  const TileGrid g = extract_tiles(half);
  REQUIRE(g.tiles.size() == 1);
  CHECK(g.tiles[0] == TileCoord{0, 0});
  CHECK_THROWS_AS(extract_tiles(uniform_slide(200, 448, 0)), DomainError);
}

TEST_CASE("kept tiles match a per-pixel recount") {
  Rng rng(22);
  for (int trial = 0; trial < 10; ++trial) {
    RasterSlide s = uniform_slide(448, 448, 230);
    // dark blobs of random extent per quadrant
    std::uniform_int_distribution<int> extent(0, 224), shade(20, 120), noise(-10, 10);
    for (int qy = 0; qy < 2; ++qy) {
      for (int qx = 0; qx < 2; ++qx) {
        const int e = extent(rng), v = shade(rng);
        for (int y = 0; y < 224; ++y) {
          for (int x = 0; x < e; ++x) {
            s.pixels[static_cast<std::size_t>((qy * 224 + y) * 448 + qx * 224 + x)] = static_cast<std::uint8_t>(v);
          }
        }
      }
    }
    for (auto& p : s.pixels) p = static_cast<std::uint8_t>(std::clamp(p + noise(rng), 0, 255));
    const int t = otsu_threshold(histogram(s.pixels));
    std::size_t expect = 0;
    for (int ty = 0; ty < 2; ++ty) {
      for (int tx = 0; tx < 2; ++tx) {
        int tissue = 0;
        for (int y = 0; y < 224; ++y) {
          for (int x = 0; x < 224; ++x) tissue += s.at(tx * 224 + x, ty * 224 + y) <= t;
        }
        expect += tissue * 2 >= 224 * 224;
      }
    }
    const TileGrid g = extract_tiles(s);
    CHECK(g.threshold == t);
    CHECK(g.tiles.size() == expect);
  }
}

TEST_CASE("tissue area QC arithmetic") {
  CHECK(tissue_area_cm2(0) == 0.0);
  CHECK(std::abs(tissue_area_cm2(798) - 0.100101) < 1e-6);
  CHECK(passes_tissue_qc(798));
  CHECK_FALSE(passes_tissue_qc(797));
  CHECK(std::abs(tissue_area_cm2(797) - 0.09998) < 1e-5);
  for (std::uint64_t n : {1u, 5u, 100u, 12345u}) {
    CHECK(tissue_area_cm2(2 * n) == doctest::Approx(2 * tissue_area_cm2(n)).epsilon(1e-14));
  }
}

TEST_CASE("tile features") {
  const int ts = 16;
  std::vector<std::uint8_t> flat(ts * ts, 100);
  const TileStats fs = tile_stats(flat, ts, 127);
  CHECK(fs.variance == 0.0);
  CHECK(fs.histogram[100 / 16] == 1.0);
  CHECK(std::count(fs.histogram.begin(), fs.histogram.end(), 0.0) == 15);

  std::vector<std::uint8_t> checker(ts * ts);
  for (int y = 0; y < ts; ++y) {
    for (int x = 0; x < ts; ++x) checker[static_cast<std::size_t>(y * ts + x)] = (x + y) % 2 ? 255 : 0;
  }
  const TileStats cs = tile_stats(checker, ts, 127);
  CHECK(cs.mean == 127.5);
  CHECK(cs.histogram[0] == 0.5);
  CHECK(cs.histogram[15] == 0.5);

  Rng rng(23);
  std::uniform_int_distribution<int> px(0, 255);
  std::vector<std::uint8_t> tile(ts * ts);
  for (auto& p : tile) p = static_cast<std::uint8_t>(px(rng));
  const std::vector<std::uint8_t> rotated(tile.rbegin(), tile.rend());
  const Vectord a = featurize_tile(tile, ts, 64);
  CHECK(a.size() == 64);
  CHECK(identical(a, featurize_tile(rotated, ts, 64)));
  CHECK(a.tail(64 - kTileStatCount).isZero());
  CHECK_THROWS(featurize_tile(tile, ts, 8));
}

TEST_CASE("bag file round trip") {
  Rng rng(24);
  Dataset ds;
  ds.feature_dim = 5;
  ds.n_covariates = 2;
  for (int i = 0; i < 4; ++i) {
    auto bag = testsupport::random_bag(1 + i, 5, 2, rng);
    bag.features = bag.features.cast<float>().cast<double>();
    bag.covariates = bag.covariates.cast<float>().cast<double>();
    bag.slide_id = "slide-" + std::to_string(i);
    bag.patient_id = "patient-" + std::to_string(i / 2);
    bag.label = i % 2;
    bag.tile_count_total = 1000u + static_cast<std::uint32_t>(i);
    if (i % 2 == 0) bag.tile_groups.assign(static_cast<std::size_t>(bag.size()), kWitnessGroup);
    ds.bags.push_back(bag);
  }
  std::stringstream buf;
  write_bags(buf, ds);
  CHECK(read_bags(buf) == ds);
}

TEST_CASE("bag file header and errors") {
  Dataset empty;
  empty.feature_dim = 3;
  std::stringstream buf;
  write_bags(buf, empty);
  const std::string bytes = buf.str();
  CHECK(bytes.size() == 20);
  CHECK(bytes.substr(0, 4) == "MILB");
  std::stringstream again(bytes);
  CHECK(read_bags(again) == empty);

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream b1(bad);
  CHECK_THROWS_WITH_AS(read_bags(b1), doctest::Contains("bad magic"), FormatError);
  std::stringstream b2(bytes.substr(0, 10));
  CHECK_THROWS_WITH_AS(read_bags(b2), doctest::Contains("truncated"), FormatError);
  std::string v2 = bytes;
  v2[4] = 2;
  std::stringstream b3(v2);
  CHECK_THROWS_WITH_AS(read_bags(b3), doctest::Contains("version"), FormatError);

  Rng rng(25);
  Dataset one;
  one.feature_dim = 4;
  one.bags.push_back(testsupport::random_bag(3, 4, 0, rng));
  std::stringstream full;
  write_bags(full, one);
  const std::string fb = full.str();
  std::stringstream cut(fb.substr(0, fb.size() - 3));
  CHECK_THROWS_WITH_AS(read_bags(cut), doctest::Contains("truncated"), FormatError);
}

TEST_CASE("graymap round trip") {
  RasterSlide s = uniform_slide(7, 3, 10);
  s.pixels[5] = 250;
  const auto path = std::filesystem::temp_directory_path() / "milscreen_test.pgm";
  write_pgm(path, s);
  const RasterSlide r = read_pgm(path);
  CHECK(r.width == 7);
  CHECK(r.height == 3);
  CHECK(r.pixels == s.pixels);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_pgm(path), FormatError);
}
