#include "hdmae/phantom.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "hdmae/errors.hpp"
#include "hdmae/rng.hpp"

namespace hdmae {

PhantomSample synth_phantom(std::uint64_t seed, const PatchConfig& cfg,
                            bool lesion, const PhantomConfig& ph) {
  cfg.validate();
  const int side = cfg.image_side;
  const double s = side;
  Rng rng = make_stream(seed, StreamPurpose::kData);
  auto jitter = [&](double amount) { return (2.0 * rng.uniform() - 1.0) * amount; };

  const double cx = s / 2.0 + jitter(ph.centre_jitter) * s;
  const double cy = s / 2.0 + jitter(ph.centre_jitter) * s;
  const double ax = ph.ellipse_ax * s * (1.0 + jitter(ph.axis_jitter));
  const double ay = ph.ellipse_ay * s * (1.0 + jitter(ph.axis_jitter));
  const double rib_phase = 2.0 * std::numbers::pi * rng.uniform();
  const double rib_period = ph.rib_period * s;

  auto ellipse_r2 = [&](double x, double y) {
    const double dx = (x - cx) / ax;
    const double dy = (y - cy) / ay;
    return dx * dx + dy * dy;
  };

  PhantomSample sample;
  sample.seed = seed;
  sample.label = lesion ? 1 : 0;
  const int g = cfg.grid_side();
  const int p = cfg.patch_side;
  sample.region.grid_side = g;
  sample.region.inside.resize(static_cast<std::size_t>(g) * static_cast<std::size_t>(g));
  for (int r = 0; r < g; ++r) {
    for (int c = 0; c < g; ++c) {
      const double x = (c + 0.5) * p;
      const double y = (r + 0.5) * p;
      sample.region.inside[static_cast<std::size_t>(r * g + c)] =
          ellipse_r2(x, y) <= 1.0 ? 1 : 0;
    }
  }

  double lx = cx, ly = cy;
  if (lesion) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double rho = ph.lesion_max_radius * std::sqrt(rng.uniform());
      const double theta = 2.0 * std::numbers::pi * rng.uniform();
      const double x = cx + rho * ax * std::cos(theta);
      const double y = cy + rho * ay * std::sin(theta);
      const int pr = std::clamp(static_cast<int>(y / p), 0, g - 1);
      const int pc = std::clamp(static_cast<int>(x / p), 0, g - 1);
      if (sample.region.is_inside(pr * g + pc)) {
        lx = x;
        ly = y;
        break;
      }
    }
    sample.lesion_center = std::make_pair(lx, ly);
  }
  const double sigma = ph.lesion_sigma * s;

  sample.image.side = side;
  sample.image.pixels.resize(static_cast<std::size_t>(side) * static_cast<std::size_t>(side));
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      const double x = c + 0.5;
      const double y = r + 0.5;
      double v = ph.background;
      if (ellipse_r2(x, y) <= 1.0) {
        v += ph.chest_lift +
             ph.rib_amplitude *
                 std::sin(2.0 * std::numbers::pi * y / rib_period + rib_phase);
      }
      if (lesion) {
        const double d2 = (x - lx) * (x - lx) + (y - ly) * (y - ly);
        v += ph.lesion_amplitude * std::exp(-d2 / (2.0 * sigma * sigma));
      }
      v += ph.noise_std * rng.normal();
      sample.image.pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(side) +
                          static_cast<std::size_t>(c)] =
          static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return sample;
}

std::vector<PhantomSample> make_dataset(std::uint64_t seed, int count,
                                        double lesion_fraction,
                                        const PatchConfig& cfg,
                                        const PhantomConfig& phantom) {
  if (count < 0 || static_cast<std::uint64_t>(count) > kDatasetSeedStride) {
    throw ConfigError("dataset count must lie in [0, 2^20]");
  }
  if (!(lesion_fraction >= 0.0 && lesion_fraction <= 1.0)) {
    throw ConfigError("lesion_fraction must lie in [0, 1]");
  }
  const auto lesions = static_cast<int>(std::lround(count * lesion_fraction));
  std::vector<int> labels(static_cast<std::size_t>(count), 0);
  std::fill_n(labels.begin(), lesions, 1);
  Rng rng = make_stream(seed, StreamPurpose::kData);
  for (int i = count - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
    std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
  }
  std::vector<PhantomSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    out.push_back(synth_phantom(seed * kDatasetSeedStride + static_cast<std::uint64_t>(k),
                                cfg, labels[static_cast<std::size_t>(k)] == 1,
                                phantom));
  }
  return out;
}

// ---- PGM ---------------------------------------------------------------------

std::string encode_pgm(const ImageGray& img) {
  img.validate();
  std::string out = "P5\n" + std::to_string(img.side) + " " +
                    std::to_string(img.side) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const long q = std::lround(static_cast<double>(img.pixels[i]) * 255.0);
    out[header + i] = static_cast<char>(static_cast<unsigned char>(std::clamp(q, 0L, 255L)));
  }
  return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::string& bytes, std::size_t& pos) {
  while (pos < bytes.size()) {
    const char ch = bytes[pos];
    if (ch == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      ++pos;
    } else {
      break;
    }
  }
  std::string tok;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])) &&
         bytes[pos] != '#') {
    tok += bytes[pos++];
  }
  return tok;
}

long parse_header_int(const std::string& tok, const char* field) {
  if (tok.empty() || tok.size() > 9 ||
      !std::all_of(tok.begin(), tok.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw FormatError(std::string("PGM: invalid ") + field + " '" + tok + "'");
  }
  return std::stol(tok);
}

}  // namespace

ImageGray decode_pgm(const std::string& bytes) {
  std::size_t pos = 0;
  const std::string magic = next_token(bytes, pos);
  if (magic != "P5") {
    throw FormatError("PGM: magic must be 'P5', got '" + magic + "'");
  }
  const long width = parse_header_int(next_token(bytes, pos), "width");
  const long height = parse_header_int(next_token(bytes, pos), "height");
  const long maxval = parse_header_int(next_token(bytes, pos), "maxval");
  if (width <= 0 || height <= 0) {
    throw FormatError("PGM: width and height must be positive");
  }
  if (width != height) {
    throw FormatError("PGM: width " + std::to_string(width) + " != height " +
                      std::to_string(height) + " (square images only)");
  }
  if (maxval != 255) {
    throw FormatError("PGM: maxval must be 255, got " + std::to_string(maxval));
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw FormatError("PGM: missing whitespace after maxval");
  }
  ++pos;
  const auto n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (bytes.size() - pos < n) {
    throw FormatError("PGM: payload truncated, expected " + std::to_string(n) +
                      " bytes, got " + std::to_string(bytes.size() - pos));
  }
  ImageGray img;
  img.side = static_cast<int>(width);
  img.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i])) / 255.0f;
  }
  return img;
}

void save_pgm(const ImageGray& img, const std::filesystem::path& path) {
  const std::string bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing " + path.string());
}

ImageGray load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open PGM file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_pgm(ss.str());
}

// ---- resize ------------------------------------------------------------------

ImageGray resize_bilinear(const ImageGray& img, int target_side) {
  img.validate();
  if (target_side <= 0) {
    throw ConfigError("resize_bilinear: target side must be positive");
  }
  const int in = img.side;
  const double ratio = static_cast<double>(in) / target_side;
  struct Tap {
    int lo, hi;
    double frac;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(target_side));
  for (int i = 0; i < target_side; ++i) {
    double src = (i + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
  }
  ImageGray out;
  out.side = target_side;
  out.pixels.resize(static_cast<std::size_t>(target_side) * static_cast<std::size_t>(target_side));
  for (int r = 0; r < target_side; ++r) {
    const Tap& ty = taps[static_cast<std::size_t>(r)];
    for (int c = 0; c < target_side; ++c) {
      const Tap& tx = taps[static_cast<std::size_t>(c)];
      const double top = img.at(ty.lo, tx.lo) * (1.0 - tx.frac) + img.at(ty.lo, tx.hi) * tx.frac;
      const double bottom = img.at(ty.hi, tx.lo) * (1.0 - tx.frac) + img.at(ty.hi, tx.hi) * tx.frac;
      out.pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(target_side) +
                 static_cast<std::size_t>(c)] =
          static_cast<float>(top * (1.0 - ty.frac) + bottom * ty.frac);
    }
  }
  return out;
}

// ---- manifest ----------------------------------------------------------------

void write_manifest(const std::vector<ManifestRow>& rows,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << "seed,label,path,region_path\n";
  for (const auto& row : rows) {
    out << row.seed << ',' << row.label << ',' << row.path << ','
        << row.region_path << '\n';
  }
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "seed,label,path,region_path") {
    throw FormatError("manifest: header must be 'seed,label,path,region_path'");
  }
  std::vector<ManifestRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 4) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 4 fields");
    }
    ManifestRow row;
    try {
      row.seed = std::stoull(cells[0]);
      row.label = std::stoi(cells[1]);
    } catch (const std::exception&) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": bad seed or label");
    }
    if (row.label != 0 && row.label != 1) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": label must be 0 or 1");
    }
    row.path = cells[2];
    row.region_path = cells[3];
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<PhantomSample> load_manifest_dataset(
    const std::filesystem::path& manifest, const PatchConfig& cfg) {
  cfg.validate();
  const auto base = manifest.parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  std::vector<PhantomSample> out;
  for (const auto& row : read_manifest(manifest)) {
    PhantomSample s;
    s.seed = row.seed;
    s.label = row.label;
    s.image = load_pgm(resolve(row.path));
    if (s.image.side != cfg.image_side) {
      s.image = resize_bilinear(s.image, cfg.image_side);
    }
    if (row.region_path.empty()) {
      s.region = default_contour(cfg.grid_side(), 0.5);
    } else {
      s.region = load_region(resolve(row.region_path));
      if (s.region.grid_side != cfg.grid_side()) {
        throw FormatError("region " + row.region_path + " has grid side " +
                          std::to_string(s.region.grid_side) + ", expected " +
                          std::to_string(cfg.grid_side()));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace hdmae
