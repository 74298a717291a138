// SPDX-License-Identifier: Apache-2.0

#include "fgmoe/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <sstream>

#include "fgmoe/rng.hpp"

namespace fgmoe {

namespace fs = std::filesystem;

// --- netpbm -------------------------------------------------------------------

namespace {

void skip_space_and_comments(const std::string& buf, std::size_t& pos) {
  while (pos < buf.size()) {
    if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
      ++pos;
    } else if (buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
}

std::size_t read_header_int(const std::string& buf, std::size_t& pos, const fs::path& path,
                            const char* field) {
  skip_space_and_comments(buf, pos);
  std::size_t value = 0;
  const std::size_t start = pos;
  while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
    value = value * 10 + static_cast<std::size_t>(buf[pos] - '0');
    if (value > (1u << 24)) throw DataError(path.string() + ": " + field + " too large");
    ++pos;
  }
  if (pos == start) throw DataError(path.string() + ": malformed header, missing " + field);
  return value;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

Netpbm read_netpbm(const fs::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw DataError(path.string() + ": bad magic number (expected P5 or P6)");
  }
  Netpbm img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  img.width = read_header_int(buf, pos, path, "width");
  img.height = read_header_int(buf, pos, path, "height");
  const std::size_t maxval = read_header_int(buf, pos, path, "maxval");
  if (maxval != 255) throw DataError(path.string() + ": maxval " + std::to_string(maxval) + " (only 255 supported)");
  if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos]))) {
    throw DataError(path.string() + ": missing whitespace after header");
  }
  ++pos;
  const std::size_t expected = img.channels * img.width * img.height;
  if (buf.size() - pos < expected) {
    throw DataError(path.string() + ": truncated payload (" + std::to_string(buf.size() - pos) +
                    " of " + std::to_string(expected) + " bytes)");
  }
  img.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(pos + expected));
  return img;
}

void write_netpbm(const fs::path& path, const Netpbm& image) {
  if (image.channels != 1 && image.channels != 3) throw DataError("write_netpbm: channels must be 1 or 3");
  if (image.pixels.size() != image.channels * image.width * image.height) {
    throw DataError("write_netpbm: pixel count does not match geometry");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << (image.channels == 3 ? "P6" : "P5") << '\n' << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw DataError("short write to " + path.string());
}

Image load_image(const fs::path& path) {
  const Netpbm raw = read_netpbm(path);
  Image img{raw.channels, raw.height, raw.width, std::vector<float>(raw.pixels.size())};
  const std::size_t plane = raw.height * raw.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < raw.channels; ++c) {
      img.pixels[c * plane + i] = static_cast<float>(raw.pixels[i * raw.channels + c]) / 255.0f;
    }
  }
  return img;
}

BinaryMask load_mask(const fs::path& path) {
  const Netpbm raw = read_netpbm(path);
  if (raw.channels != 1) throw DataError(path.string() + ": masks must be PGM (P5)");
  BinaryMask mask = BinaryMask::zeros(raw.height, raw.width);
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) mask.bits[i] = raw.pixels[i] != 0 ? 1 : 0;
  return mask;
}

// --- manifests ----------------------------------------------------------------

Manifest read_manifest(const fs::path& path, std::string split) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest manifest;
  manifest.split = std::move(split);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 3) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields");
    }
    ManifestEntry e;
    e.image_path = fields[0];
    if (fields[1] != "-") e.mask_path = fields[1];
    try {
      std::size_t used = 0;
      e.label = std::stoi(fields[2], &used);
      if (used != fields[2].size()) throw std::invalid_argument(fields[2]);
    } catch (const std::exception&) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad label '" + fields[2] + "'");
    }
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : manifest.entries) {
    out << e.image_path << '\t' << e.mask_path.value_or("-") << '\t' << e.label << '\n';
  }
  if (!out) throw DataError("short write to " + path.string());
}

std::vector<Sample> load_split(const fs::path& dir, const std::string& split, std::size_t image_side,
                               std::size_t channels, std::size_t classes) {
  const Manifest manifest = read_manifest(dir / (split + ".tsv"), split);
  auto resolve = [&dir](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : dir / path;
  };
  std::vector<Sample> samples;
  samples.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    Sample s;
    s.image = load_image(resolve(e.image_path));
    if (s.image.height != image_side || s.image.width != image_side || s.image.channels != channels) {
      throw DataError(e.image_path + ": image is " + std::to_string(s.image.channels) + "x" +
                      std::to_string(s.image.height) + "x" + std::to_string(s.image.width) +
                      ", model expects " + std::to_string(channels) + "x" + std::to_string(image_side) +
                      "x" + std::to_string(image_side));
    }
    if (e.mask_path) {
      s.mask = load_mask(resolve(*e.mask_path));
      if (s.mask.height != s.image.height || s.mask.width != s.image.width) {
        throw DataError(*e.mask_path + ": mask size does not match image " + e.image_path);
      }
    } else {
      s.mask = BinaryMask::zeros(s.image.height, s.image.width);
    }
    if (e.label < 0 || static_cast<std::size_t>(e.label) >= classes) {
      throw DataError(e.image_path + ": label " + std::to_string(e.label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    s.label = e.label;
    samples.push_back(std::move(s));
  }
  return samples;
}

// --- synthetic shapes ---------------------------------------------------------

std::string_view family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::square: return "square";
    case ShapeFamily::circle: return "circle";
    case ShapeFamily::triangle: return "triangle";
    case ShapeFamily::cross: return "cross";
    case ShapeFamily::ring: return "ring";
    case ShapeFamily::diamond: return "diamond";
    case ShapeFamily::bar_h: return "bar_h";
    case ShapeFamily::bar_v: return "bar_v";
  }
  return "?";
}

namespace {

constexpr double kMinCoverage = 0.10;
constexpr double kMaxCoverage = 0.40;

// Membership of pixel center (px, py) in a shape of half-extent r centered at
// (cx, cy).
bool inside(ShapeFamily f, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  switch (f) {
    case ShapeFamily::circle: return dx * dx + dy * dy <= r * r;
    case ShapeFamily::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 > 0.3 * r * r;
    }
    case ShapeFamily::diamond: return std::abs(dx) + std::abs(dy) <= r;
    case ShapeFamily::triangle: {
      // Apex at the top, base at the bottom of the [cy - r, cy + r] band.
      if (dy < -r || dy > r) return false;
      const double t = (dy + r) / (2.0 * r);
      return std::abs(dx) <= t * r;
    }
    case ShapeFamily::cross: {
      const double arm = 0.3 * r;
      return (std::abs(dx) <= r && std::abs(dy) <= arm) || (std::abs(dy) <= r && std::abs(dx) <= arm);
    }
    case ShapeFamily::bar_h: return std::abs(dx) <= r && std::abs(dy) <= 0.4 * r;
    case ShapeFamily::bar_v: return std::abs(dy) <= r && std::abs(dx) <= 0.4 * r;
    case ShapeFamily::square: return std::abs(dx) <= r && std::abs(dy) <= r;
  }
  return false;
}

}  // namespace

SyntheticSample synth_sample(std::uint64_t seed, std::size_t index, std::size_t classes, std::size_t side) {
  if (classes == 0 || classes > kShapeFamilies) {
    throw std::invalid_argument("classes must be in [1, " + std::to_string(kShapeFamilies) + "]");
  }
  if (side < 8) throw std::invalid_argument("image side must be >= 8");
  Rng rng(mix_seed(seed, index));
  SyntheticSample s;
  s.label = static_cast<int>(index % classes);
  const auto family = static_cast<ShapeFamily>(s.label);
  const double total = static_cast<double>(side * side);

  s.mask = BinaryMask::zeros(side, side);
  if (family == ShapeFamily::square) {
    const auto lo = static_cast<std::size_t>(std::ceil(std::sqrt(kMinCoverage * total)));
    const auto hi = static_cast<std::size_t>(std::floor(std::sqrt(kMaxCoverage * total)));
    s.size = lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
    s.top = static_cast<std::size_t>(rng.below(side - s.size + 1));
    s.left = static_cast<std::size_t>(rng.below(side - s.size + 1));
    for (std::size_t y = s.top; y < s.top + s.size; ++y) {
      for (std::size_t x = s.left; x < s.left + s.size; ++x) s.mask.bits[y * side + x] = 1;
    }
  } else {
    const double fside = static_cast<double>(side);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw std::runtime_error("synth_sample: could not place shape");
      const double r = rng.uniform(0.15 * fside, 0.5 * fside);
      const double cx = rng.uniform(r, fside - r);
      const double cy = rng.uniform(r, fside - r);
      std::size_t count = 0;
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const bool in = inside(family, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, cx, cy, r);
          s.mask.bits[y * side + x] = in ? 1 : 0;
          count += in ? 1 : 0;
        }
      }
      const double coverage = static_cast<double>(count) / total;
      if (coverage >= kMinCoverage && coverage <= kMaxCoverage) break;
    }
  }

  // Uniform noise background in [0, 112); the shape is a flat color in
  // [144, 248) with mild jitter, so every shape pixel is brighter than every
  // background pixel.
  std::uint8_t color[3];
  for (auto& c : color) c = static_cast<std::uint8_t>(152 + rng.below(89));
  s.image.channels = 3;
  s.image.height = side;
  s.image.width = side;
  s.image.pixels.resize(3 * side * side);
  for (std::size_t i = 0; i < side * side; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      std::uint8_t v;
      if (s.mask.bits[i]) {
        const int jitter = static_cast<int>(rng.below(17)) - 8;
        v = static_cast<std::uint8_t>(std::clamp(static_cast<int>(color[c]) + jitter, 0, 255));
      } else {
        v = static_cast<std::uint8_t>(rng.below(112));
      }
      s.image.pixels[i * 3 + c] = v;
    }
  }
  return s;
}

Sample to_sample(const SyntheticSample& s) {
  Sample out;
  const Netpbm& raw = s.image;
  out.image = Image{raw.channels, raw.height, raw.width, std::vector<float>(raw.pixels.size())};
  const std::size_t plane = raw.height * raw.width;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < raw.channels; ++c) {
      out.image.pixels[c * plane + i] = static_cast<float>(raw.pixels[i * raw.channels + c]) / 255.0f;
    }
  }
  out.mask = s.mask;
  out.label = s.label;
  return out;
}

std::vector<std::size_t> generate_synthetic(const GenerateOptions& options) {
  if (options.classes == 0 || options.classes > kShapeFamilies) {
    throw std::invalid_argument("classes must be in [1, " + std::to_string(kShapeFamilies) + "]");
  }
  std::error_code ec;
  fs::create_directories(options.out / "images", ec);
  fs::create_directories(options.out / "masks", ec);
  if (ec || !fs::is_directory(options.out / "images") || !fs::is_directory(options.out / "masks")) {
    throw DataError("cannot create output directory " + options.out.string());
  }
  std::vector<std::size_t> counts(options.classes, 0);
  auto write_split = [&](const std::string& split, std::size_t begin, std::size_t n) {
    Manifest manifest{split, {}};
    for (std::size_t i = begin; i < begin + n; ++i) {
      const SyntheticSample s = synth_sample(options.seed, i, options.classes, options.side);
      char stem[32];
      std::snprintf(stem, sizeof(stem), "%06zu", i);
      const std::string image_rel = std::string("images/") + stem + ".ppm";
      const std::string mask_rel = std::string("masks/") + stem + ".pgm";
      write_netpbm(options.out / image_rel, s.image);
      Netpbm mask{1, s.mask.height, s.mask.width, std::vector<std::uint8_t>(s.mask.bits.size())};
      for (std::size_t k = 0; k < mask.pixels.size(); ++k) mask.pixels[k] = s.mask.bits[k] ? 255 : 0;
      write_netpbm(options.out / mask_rel, mask);
      manifest.entries.push_back({image_rel, mask_rel, s.label});
      ++counts[static_cast<std::size_t>(s.label)];
    }
    write_manifest(options.out / (split + ".tsv"), manifest);
  };
  write_split("train", 0, options.train);
  write_split("val", options.train, options.val);
  return counts;
}

std::vector<std::size_t> shuffled_order(std::size_t n, std::uint64_t epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0x5f3759dfULL + epoch));
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

}  // namespace fgmoe
