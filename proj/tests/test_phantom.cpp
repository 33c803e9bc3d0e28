#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "hdmae/errors.hpp"
#include "hdmae/phantom.hpp"

using namespace hdmae;
namespace fs = std::filesystem;

namespace {

std::string error_of(const std::string& bytes) {
  try {
    decode_pgm(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Phantom, DeterministicAndInRange) {
  const PatchConfig cfg;
  const auto a = synth_phantom(42, cfg, true);
  const auto b = synth_phantom(42, cfg, true);
  EXPECT_EQ(encode_pgm(a.image), encode_pgm(b.image));
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_EQ(a.region.inside, b.region.inside);
  EXPECT_NO_THROW(a.image.validate());
  EXPECT_NO_THROW(a.region.validate());
  EXPECT_EQ(a.region.grid_side, 8);
  EXPECT_EQ(a.label, 1);
  EXPECT_TRUE(a.lesion_center.has_value());
  const auto clean = synth_phantom(42, cfg, false);
  EXPECT_EQ(clean.label, 0);
  EXPECT_FALSE(clean.lesion_center.has_value());
}

TEST(Phantom, LesionCentreInsideRegionForManySeeds) {
  const PatchConfig cfg;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = synth_phantom(seed, cfg, true);
    ASSERT_TRUE(s.lesion_center);
    const auto [x, y] = *s.lesion_center;
    const int token = static_cast<int>(y) / cfg.patch_side * cfg.grid_side() +
                      static_cast<int>(x) / cfg.patch_side;
    ASSERT_TRUE(s.region.is_inside(token)) << seed;
    ASSERT_NO_THROW(s.image.validate());
  }
}

TEST(Phantom, LesionBrightensItsNeighbourhood) {
  const PatchConfig cfg;
  const auto with = synth_phantom(7, cfg, true);
  const auto without = synth_phantom(7, cfg, false);
  const auto [x, y] = *with.lesion_center;
  const int r = static_cast<int>(y), c = static_cast<int>(x);
  EXPECT_GT(with.image.at(r, c) - without.image.at(r, c), 0.2f);
}

TEST(Dataset, ExactLabelCountAndDeterminism) {
  const PatchConfig cfg;
  const auto a = make_dataset(3, 10, 0.5, cfg);
  const auto b = make_dataset(3, 10, 0.5, cfg);
  int lesions = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    lesions += a[i].label;
    EXPECT_EQ(a[i].seed, b[i].seed);
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
  }
  EXPECT_EQ(lesions, 5);
  EXPECT_EQ(make_dataset(1, 7, 0.3, cfg).size(), 7u);
  int l2 = 0;
  for (const auto& s : make_dataset(1, 7, 0.3, cfg)) l2 += s.label;
  EXPECT_EQ(l2, 2);  // round(2.1)
}

TEST(Dataset, DisjointSeedsShareNoSamples) {
  const PatchConfig cfg;
  std::set<std::uint64_t> seeds;
  for (const auto& s : make_dataset(0, 50, 0.5, cfg)) seeds.insert(s.seed);
  for (const auto& s : make_dataset(1, 50, 0.5, cfg)) EXPECT_EQ(seeds.count(s.seed), 0u);
}

TEST(Pgm, RoundTripQuantisation) {
  ImageGray img;
  img.side = 2;
  img.pixels = {0.0f, 85.0f / 255.0f, 170.0f / 255.0f, 1.0f};
  const auto back = decode_pgm(encode_pgm(img));
  EXPECT_EQ(back.pixels, img.pixels);

  const auto ph = synth_phantom(1, PatchConfig{}, true).image;
  const auto bytes = encode_pgm(ph);
  const auto loaded = decode_pgm(bytes);
  for (std::size_t i = 0; i < ph.pixels.size(); ++i) {
    ASSERT_LE(std::abs(loaded.pixels[i] - ph.pixels[i]), 1.0f / 255.0f);
  }
  EXPECT_EQ(encode_pgm(loaded), bytes);
}

TEST(Pgm, FileRoundTrip) {
  const auto path = fs::temp_directory_path() / "hdmae_pgm_test.pgm";
  const auto img = synth_phantom(2, PatchConfig{}, false).image;
  save_pgm(img, path);
  EXPECT_EQ(encode_pgm(load_pgm(path)), encode_pgm(img));
  fs::remove(path);
  EXPECT_THROW(load_pgm(path), FormatError);
}

TEST(Pgm, MalformedInputNamesTheField) {
  EXPECT_NE(error_of("P2\n2 2\n255\n" + std::string(4, '\0')).find("magic"), std::string::npos);
  EXPECT_NE(error_of("P5\n2 2\n65535\n" + std::string(8, '\0')).find("maxval"), std::string::npos);
  EXPECT_NE(error_of("P5\n2 2\n255\n" + std::string(3, '\0')).find("truncated"), std::string::npos);
  EXPECT_NE(error_of("P5\nx 2\n255\n").find("width"), std::string::npos);
  EXPECT_NE(error_of("P5\n2 y\n255\n").find("height"), std::string::npos);
  EXPECT_NE(error_of("P5\n2 3\n255\n" + std::string(6, '\0')).find("height"), std::string::npos);
  EXPECT_NE(error_of("").find("magic"), std::string::npos);
  // Comments in the header are accepted.
  EXPECT_NO_THROW(decode_pgm("P5\n# made by hand\n1 1\n255\n\x80"));
}

TEST(Resize, ConstantAndIdentity) {
  ImageGray c;
  c.side = 5;
  c.pixels.assign(25, 0.3f);
  const auto up = resize_bilinear(c, 12);
  EXPECT_EQ(up.side, 12);
  for (float v : up.pixels) EXPECT_FLOAT_EQ(v, 0.3f);
  const auto img = synth_phantom(3, PatchConfig{}, false).image;
  EXPECT_EQ(resize_bilinear(img, 64).pixels, img.pixels);
}

TEST(Resize, TwoToFourMatchesHandValues) {
  // f(y, x) = (2y + x) / 3 on a 2x2 grid; half-pixel centres put the output
  // taps at source coordinates -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
  ImageGray img;
  img.side = 2;
  img.pixels = {0.0f, 1.0f / 3.0f, 2.0f / 3.0f, 1.0f};
  const auto out = resize_bilinear(img, 4);
  const double tap[4] = {0.0, 0.25, 0.75, 1.0};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(out.at(i, j), (2 * tap[i] + tap[j]) / 3.0, 1e-6);
}

TEST(Manifest, RoundTripAndDatasetLoad) {
  const auto dir = fs::temp_directory_path() / "hdmae_manifest_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const PatchConfig big{128, 16, 64};
  const auto data = make_dataset(4, 3, 0.34, big);
  std::vector<ManifestRow> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::string name = "img" + std::to_string(i) + ".pgm";
    save_pgm(data[i].image, dir / name);
    rows.push_back({data[i].seed, data[i].label, name, i == 0 ? "r0.region" : ""});
  }
  save_region(data[0].region, dir / "r0.region");
  write_manifest(rows, dir / "manifest.csv");
  const auto back = read_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.size(), 3u);
  EXPECT_EQ(back[1].seed, rows[1].seed);
  EXPECT_EQ(back[1].region_path, "");

  const auto loaded = load_manifest_dataset(dir / "manifest.csv", big);
  EXPECT_EQ(loaded[0].region.inside, data[0].region.inside);
  EXPECT_EQ(loaded[1].region.inside, default_contour(8, 0.5).inside);
  // A different working resolution resamples the images; a stored region
  // must still match the patch grid.
  const auto small = load_manifest_dataset(dir / "manifest.csv", PatchConfig{64, 8, 64});
  EXPECT_EQ(small[2].image.side, 64);
  EXPECT_THROW(load_manifest_dataset(dir / "manifest.csv", PatchConfig{64, 4, 64}), FormatError);
  EXPECT_THROW(read_manifest(dir / "missing.csv"), FormatError);
  fs::remove_all(dir);
}
