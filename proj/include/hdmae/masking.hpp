#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hdmae/rng.hpp"

namespace hdmae {

// Per-patch chest-interior flags on the patch grid, row-major.
struct RegionMask {
  int grid_side = 0;
  std::vector<std::uint8_t> inside;

  int token_count() const { return grid_side * grid_side; }
  int inside_count() const;
  bool is_inside(int token) const {
    return inside[static_cast<std::size_t>(token)] != 0;
  }
  void validate() const;  // ContractError

  // "REGION <g>\n" followed by g rows of '0'/'1' characters.
  std::string to_text() const;
  static RegionMask from_text(const std::string& text);  // FormatError
};

void save_region(const RegionMask& region, const std::filesystem::path& path);
RegionMask load_region(const std::filesystem::path& path);

struct MaskPlan {
  int n_tokens = 0;
  std::vector<std::int64_t> masked;   // sorted
  std::vector<std::int64_t> visible;  // sorted
  double mask_ratio = 0.0;

  // Builds the partition from an explicit masked set without applying the
  // count clamp. Throws ContractError on out-of-range or duplicate indices.
  static MaskPlan from_masked(int n_tokens, std::vector<std::int64_t> masked,
                              double mask_ratio);

  bool operator==(const MaskPlan&) const = default;
};

// clamp(round(ratio * n), 1, n - 1)
int mask_count(int n_tokens, double ratio);

// Weighted sampling of the masked set without replacement (Gumbel top-k).
// Token i gets key ln(w_i) + G_i with w_i = inside_weight inside the region
// and 1 outside; the G_i are drawn from `rng` in token order and the
// mask_count(N, ratio) largest keys are masked (ties go to the lower index).
//
// A region that is entirely inside or entirely outside makes every weight
// equal; if inside_weight > 1 this sets *degenerate (when given) and the
// draw is uniform.
MaskPlan context_aware_mask(const RegionMask& region, double ratio,
                            double inside_weight, Rng& rng,
                            bool* degenerate = nullptr);

// Uniform masking: context_aware_mask with every weight equal to 1.
MaskPlan random_mask(int n_tokens, double ratio, Rng& rng);

// Centered axis-aligned ellipse on a g x g grid. Patch centres are ranked by
// their normalised ellipse radius (semi-axis ratio 0.35 : 0.45, horizontal :
// vertical) and the smallest radius level whose cumulative count is closest
// to cover * g^2 is taken; equal-radius patches always enter together, so the
// mask is left-right and top-bottom symmetric.
RegionMask default_contour(int grid_side, double cover);

struct MaskStats {
  int plans = 0;
  int grid_side = 0;
  double inside_rate = 0.0;   // mean over plans of |masked & inside| / |inside|
  double outside_rate = 0.0;  // same for outside patches
  double inside_stderr = 0.0;
  double outside_stderr = 0.0;
  double mean_masked_fraction = 0.0;
  std::vector<double> frequency;  // per token, fraction of plans masking it
};

MaskStats mask_stats(std::span<const MaskPlan> plans, const RegionMask& region);

}  // namespace hdmae
