#include "hdmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hdmae/errors.hpp"

namespace hdmae {

int RegionMask::inside_count() const {
  return static_cast<int>(std::count_if(inside.begin(), inside.end(),
                                        [](std::uint8_t v) { return v != 0; }));
}

void RegionMask::validate() const {
  if (grid_side <= 0 ||
      inside.size() != static_cast<std::size_t>(grid_side) *
                           static_cast<std::size_t>(grid_side)) {
    throw ContractError("region mask: " + std::to_string(inside.size()) +
                        " flags for grid side " + std::to_string(grid_side));
  }
}

std::string RegionMask::to_text() const {
  validate();
  std::string out = "REGION " + std::to_string(grid_side) + "\n";
  for (int r = 0; r < grid_side; ++r) {
    for (int c = 0; c < grid_side; ++c) {
      out += is_inside(r * grid_side + c) ? '1' : '0';
    }
    out += '\n';
  }
  return out;
}

RegionMask RegionMask::from_text(const std::string& text) {
  std::istringstream in(text);
  std::string tag;
  long long g = 0;
  if (!(in >> tag) || tag != "REGION") {
    throw FormatError("region file: missing REGION header");
  }
  if (!(in >> g) || g <= 0 || g > 1 << 16) {
    throw FormatError("region file: invalid grid side");
  }
  RegionMask region;
  region.grid_side = static_cast<int>(g);
  region.inside.reserve(static_cast<std::size_t>(g * g));
  std::string line;
  std::getline(in, line);  // rest of header line
  for (long long r = 0; r < g; ++r) {
    if (!std::getline(in, line)) {
      throw FormatError("region file: expected " + std::to_string(g) +
                        " rows, got " + std::to_string(r));
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (static_cast<long long>(line.size()) != g) {
      throw FormatError("region file: row " + std::to_string(r) + " has " +
                        std::to_string(line.size()) + " characters");
    }
    for (char ch : line) {
      if (ch != '0' && ch != '1') {
        throw FormatError(std::string("region file: invalid character '") +
                          ch + "' in row " + std::to_string(r));
      }
      region.inside.push_back(ch == '1' ? 1 : 0);
    }
  }
  return region;
}

void save_region(const RegionMask& region, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << region.to_text();
}

RegionMask load_region(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open region file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return RegionMask::from_text(ss.str());
}

MaskPlan MaskPlan::from_masked(int n_tokens, std::vector<std::int64_t> masked,
                               double mask_ratio) {
  if (n_tokens <= 0) {
    throw ContractError("mask plan: n_tokens must be positive");
  }
  std::sort(masked.begin(), masked.end());
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(n_tokens), 0);
  for (auto i : masked) {
    if (i < 0 || i >= n_tokens) {
      throw ContractError("mask plan: index " + std::to_string(i) +
                          " out of range");
    }
    if (seen[static_cast<std::size_t>(i)]++) {
      throw ContractError("mask plan: duplicate index " + std::to_string(i));
    }
  }
  MaskPlan plan;
  plan.n_tokens = n_tokens;
  plan.mask_ratio = mask_ratio;
  plan.masked = std::move(masked);
  for (int i = 0; i < n_tokens; ++i) {
    if (!seen[static_cast<std::size_t>(i)]) plan.visible.push_back(i);
  }
  return plan;
}

int mask_count(int n_tokens, double ratio) {
  if (n_tokens < 2) {
    throw ConfigError("masking needs at least 2 tokens, got " +
                      std::to_string(n_tokens));
  }
  const long m = std::lround(ratio * n_tokens);
  return static_cast<int>(std::clamp<long>(m, 1, n_tokens - 1));
}

namespace {

void check_ratio(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in (0, 1), got " +
                      std::to_string(ratio));
  }
}

MaskPlan sample_weighted(std::span<const double> log_weights, double ratio,
                         Rng& rng) {
  const int n = static_cast<int>(log_weights.size());
  const int m = mask_count(n, ratio);
  std::vector<double> keys(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    keys[static_cast<std::size_t>(i)] =
        log_weights[static_cast<std::size_t>(i)] + rng.gumbel();
  }
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + m, order.end(),
                    [&](std::int64_t a, std::int64_t b) {
                      const double ka = keys[static_cast<std::size_t>(a)];
                      const double kb = keys[static_cast<std::size_t>(b)];
                      return ka > kb || (ka == kb && a < b);
                    });
  order.resize(static_cast<std::size_t>(m));
  return MaskPlan::from_masked(n, std::move(order), ratio);
}

}  // namespace

MaskPlan context_aware_mask(const RegionMask& region, double ratio,
                            double inside_weight, Rng& rng, bool* degenerate) {
  check_ratio(ratio);
  if (!(inside_weight >= 1.0) || !std::isfinite(inside_weight)) {
    throw ConfigError("inside_weight must be a finite value >= 1, got " +
                      std::to_string(inside_weight));
  }
  region.validate();
  const int inside = region.inside_count();
  const bool flat = inside == 0 || inside == region.token_count();
  if (degenerate) *degenerate = flat && inside_weight > 1.0;
  const double lw = std::log(inside_weight);
  std::vector<double> log_weights(region.inside.size());
  for (std::size_t i = 0; i < log_weights.size(); ++i) {
    log_weights[i] = region.inside[i] ? lw : 0.0;
  }
  return sample_weighted(log_weights, ratio, rng);
}

MaskPlan random_mask(int n_tokens, double ratio, Rng& rng) {
  check_ratio(ratio);
  if (n_tokens < 2) {
    throw ConfigError("masking needs at least 2 tokens");
  }
  const std::vector<double> log_weights(static_cast<std::size_t>(n_tokens), 0.0);
  return sample_weighted(log_weights, ratio, rng);
}

RegionMask default_contour(int grid_side, double cover) {
  if (grid_side <= 0) {
    throw ConfigError("default_contour: grid_side must be positive");
  }
  if (!(cover > 0.0 && cover < 1.0)) {
    throw ConfigError("default_contour: cover must lie in (0, 1)");
  }
  constexpr double kAx = 0.35;
  constexpr double kAy = 0.45;
  const int n = grid_side * grid_side;
  const double centre = grid_side / 2.0;
  std::vector<double> radius(static_cast<std::size_t>(n));
  for (int r = 0; r < grid_side; ++r) {
    for (int c = 0; c < grid_side; ++c) {
      const double dx = (c + 0.5 - centre) / kAx;
      const double dy = (r + 0.5 - centre) / kAy;
      radius[static_cast<std::size_t>(r * grid_side + c)] = dx * dx + dy * dy;
    }
  }
  std::vector<double> levels = radius;
  std::sort(levels.begin(), levels.end());
  // Cumulative counts only change at distinct radius levels.
  const double target = cover * n;
  double best_level = levels.front();
  double best_gap = INFINITY;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (i + 1 < levels.size() && levels[i + 1] == levels[i]) continue;
    const double gap = std::abs(static_cast<double>(i + 1) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best_level = levels[i];
    }
  }
  RegionMask region;
  region.grid_side = grid_side;
  region.inside.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    region.inside[static_cast<std::size_t>(i)] =
        radius[static_cast<std::size_t>(i)] <= best_level ? 1 : 0;
  }
  return region;
}

MaskStats mask_stats(std::span<const MaskPlan> plans, const RegionMask& region) {
  region.validate();
  MaskStats stats;
  stats.plans = static_cast<int>(plans.size());
  stats.grid_side = region.grid_side;
  const int n = region.token_count();
  stats.frequency.assign(static_cast<std::size_t>(n), 0.0);
  if (plans.empty()) return stats;

  const int inside = region.inside_count();
  const int outside = n - inside;
  double s_in = 0, ss_in = 0, s_out = 0, ss_out = 0, s_frac = 0;
  for (const auto& plan : plans) {
    if (plan.n_tokens != n) {
      throw ContractError("mask_stats: plan over " +
                          std::to_string(plan.n_tokens) +
                          " tokens vs region of " + std::to_string(n));
    }
    int hit_in = 0;
    for (auto i : plan.masked) {
      stats.frequency[static_cast<std::size_t>(i)] += 1.0;
      if (region.is_inside(static_cast<int>(i))) ++hit_in;
    }
    const int hit_out = static_cast<int>(plan.masked.size()) - hit_in;
    const double rin = inside ? static_cast<double>(hit_in) / inside : 0.0;
    const double rout = outside ? static_cast<double>(hit_out) / outside : 0.0;
    s_in += rin;
    ss_in += rin * rin;
    s_out += rout;
    ss_out += rout * rout;
    s_frac += static_cast<double>(plan.masked.size()) / n;
  }
  const double k = static_cast<double>(plans.size());
  for (auto& f : stats.frequency) f /= k;
  stats.inside_rate = s_in / k;
  stats.outside_rate = s_out / k;
  stats.mean_masked_fraction = s_frac / k;
  if (plans.size() > 1) {
    const double var_in = std::max(0.0, (ss_in - k * stats.inside_rate * stats.inside_rate) / (k - 1));
    const double var_out = std::max(0.0, (ss_out - k * stats.outside_rate * stats.outside_rate) / (k - 1));
    stats.inside_stderr = std::sqrt(var_in / k);
    stats.outside_stderr = std::sqrt(var_out / k);
  }
  return stats;
}

}  // namespace hdmae
