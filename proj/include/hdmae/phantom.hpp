#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hdmae/masking.hpp"
#include "hdmae/patch.hpp"

namespace hdmae {

// Geometry and intensity of the synthetic chest phantom. Lengths are
// fractions of the image side unless noted.
struct PhantomConfig {
  double background = 0.05;
  double chest_lift = 0.35;     // added inside the ellipse
  double ellipse_ax = 0.35;     // horizontal semi-axis
  double ellipse_ay = 0.45;     // vertical semi-axis
  double axis_jitter = 0.05;    // relative, uniform +-
  double centre_jitter = 0.03;  // uniform +-
  double rib_period = 8.0 / 64.0;
  double rib_amplitude = 0.08;
  double noise_std = 0.02;
  double lesion_sigma = 1.0 / 16.0;
  double lesion_amplitude = 0.3;
  double lesion_max_radius = 0.6;  // in normalised ellipse radius
};

struct PhantomSample {
  ImageGray image;
  RegionMask region;
  int label = 0;  // 1 = lesion present
  std::uint64_t seed = 0;
  // Pixel coordinates (x = column, y = row) of the lesion centre.
  std::optional<std::pair<double, double>> lesion_center;
};

// Deterministic per (seed, cfg, lesion). The region marks patches whose
// centre lies inside the chest ellipse; a lesion centre always falls in a
// marked patch.
PhantomSample synth_phantom(std::uint64_t seed, const PatchConfig& cfg,
                            bool lesion, const PhantomConfig& phantom = {});

// Exactly round(count * lesion_fraction) lesion samples in a shuffled order.
// Sample k gets seed `seed * kDatasetSeedStride + k`, so datasets built from
// different seeds never share sample seeds.
inline constexpr std::uint64_t kDatasetSeedStride = 1u << 20;
std::vector<PhantomSample> make_dataset(std::uint64_t seed, int count,
                                        double lesion_fraction,
                                        const PatchConfig& cfg,
                                        const PhantomConfig& phantom = {});

// Binary PGM (P5, maxval 255). Loading maps bytes to [0, 1] by /255,
// saving writes round(v * 255).
std::string encode_pgm(const ImageGray& img);
ImageGray decode_pgm(const std::string& bytes);
void save_pgm(const ImageGray& img, const std::filesystem::path& path);
ImageGray load_pgm(const std::filesystem::path& path);

// Bilinear resampling with half-pixel centres (align_corners off): output
// pixel i samples source coordinate (i + 0.5) * in / out - 0.5, clamped to
// [0, in - 1], and blends the two neighbouring source pixels on each axis.
ImageGray resize_bilinear(const ImageGray& img, int target_side);

struct ManifestRow {
  std::uint64_t seed = 0;
  int label = 0;
  std::string path;
  std::string region_path;  // may be empty
};

// CSV with header `seed,label,path,region_path`. Relative paths are stored
// as written.
void write_manifest(const std::vector<ManifestRow>& rows,
                    const std::filesystem::path& path);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& path);

// Loads every manifest row, resizing images to cfg.image_side. Rows without
// a region file fall back to default_contour(grid_side, 0.5).
std::vector<PhantomSample> load_manifest_dataset(
    const std::filesystem::path& manifest, const PatchConfig& cfg);

}  // namespace hdmae
