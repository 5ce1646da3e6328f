#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchcad/error.hpp"
#include "patchcad/random.hpp"
#include "patchcad/render.hpp"

namespace patchcad {

enum class Domain : std::uint8_t { image, shape };

struct PatchSource {
  std::uint32_t shape_id = 0;
  std::uint32_t view_id = 0;
  Domain domain = Domain::shape;

  bool operator==(const PatchSource&) const = default;
};

struct PatchRect {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  std::uint32_t w = 0;
  std::uint32_t h = 0;
  PatchSource source;
  double coverage = 0.0;  // masked fraction of the rect
  bool empty = true;

  std::uint32_t area() const { return w * h; }
  bool operator==(const PatchRect&) const = default;
};

template <typename R>
concept MaskedRaster = requires(const R& r) {
  { r.width } -> std::convertible_to<std::uint32_t>;
  { r.height } -> std::convertible_to<std::uint32_t>;
  { r.mask[0] } -> std::convertible_to<std::uint8_t>;
};

// Side length of a square patch covering `fraction` of the raster side.
inline std::uint32_t patch_side(double fraction, std::uint32_t resolution) {
  return static_cast<std::uint32_t>(std::lround(fraction * resolution));
}

template <MaskedRaster R>
std::size_t masked_count(const R& raster, const PatchRect& rect) {
  std::size_t n = 0;
  for (std::uint32_t y = rect.y; y < rect.y + rect.h; ++y) {
    for (std::uint32_t x = rect.x; x < rect.x + rect.w; ++x) n += raster.mask[std::size_t{y} * raster.width + x] != 0;
  }
  return n;
}

inline std::size_t masked_count(std::span<const std::uint8_t> mask, std::uint32_t width, const PatchRect& rect) {
  std::size_t n = 0;
  for (std::uint32_t y = rect.y; y < rect.y + rect.h; ++y) {
    for (std::uint32_t x = rect.x; x < rect.x + rect.w; ++x) n += mask[std::size_t{y} * width + x] != 0;
  }
  return n;
}

// `count` square rects with top-left positions drawn uniformly over every
// valid placement; each is flagged empty when its mask coverage falls below
// `min_coverage`.
template <MaskedRaster R>
std::vector<PatchRect> sample_patches(const R& raster, double fraction, std::size_t count, std::uint64_t seed,
                                      double min_coverage = 0.10, PatchSource source = {}) {
  const std::uint32_t side = patch_side(fraction, std::min(raster.width, raster.height));
  if (side < 2) throw Error("invalid_argument", "patch side must be at least 2 pixels");
  if (side > raster.width || side > raster.height) throw Error("invalid_argument", "patch larger than raster");
  const std::uint32_t span_x = raster.width - side + 1;
  const std::uint32_t span_y = raster.height - side + 1;
  Rng rng = make_rng(seed, 0x7061746368ull);
  std::vector<PatchRect> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    PatchRect r;
    r.x = static_cast<std::uint32_t>(uniform_index(rng, span_x));
    r.y = static_cast<std::uint32_t>(uniform_index(rng, span_y));
    r.w = side;
    r.h = side;
    r.source = source;
    r.coverage = static_cast<double>(masked_count(raster, r)) / r.area();
    r.empty = r.coverage < min_coverage;
    out.push_back(r);
  }
  return out;
}

struct PatchDescriptor {
  std::vector<double> hist;
  std::size_t sample_count = 0;
  bool empty = true;

  std::size_t bins() const { return hist.size(); }
};

inline std::size_t angle_bin(double angle, std::size_t bins) {
  const auto b = static_cast<std::size_t>(std::floor(angle * static_cast<double>(bins) / std::numbers::pi));
  return std::min(b, bins - 1);
}

// Histogram of all pairwise angles between the given unit normals, uniform
// bins over [0, pi], normalized to sum 1. Fewer than two normals give an
// empty descriptor.
inline PatchDescriptor histogram_from_normals(std::span<const Vec3> normals, std::size_t bins) {
  if (bins < 2) throw Error("invalid_argument", "histogram needs at least 2 bins");
  PatchDescriptor d;
  d.hist.assign(bins, 0.0);
  d.sample_count = normals.size();
  if (normals.size() < 2) return d;
  std::vector<std::size_t> counts(bins, 0);
  for (std::size_t i = 0; i < normals.size(); ++i) {
    for (std::size_t j = i + 1; j < normals.size(); ++j) {
      const double angle = std::acos(std::clamp(normals[i].dot(normals[j]), -1.0, 1.0));
      ++counts[angle_bin(angle, bins)];
    }
  }
  const double pairs = static_cast<double>(normals.size() * (normals.size() - 1) / 2);
  for (std::size_t b = 0; b < bins; ++b) d.hist[b] = static_cast<double>(counts[b]) / pairs;
  d.empty = false;
  return d;
}

// Masked normals of the rect in raster order, stride-subsampled to at most
// `max_samples` (index floor(i * n / max_samples)).
inline std::vector<Vec3> collect_patch_normals(const NormalMap& nmap, const PatchRect& rect,
                                               std::size_t max_samples) {
  std::vector<Vec3> all;
  for (std::uint32_t y = rect.y; y < rect.y + rect.h; ++y) {
    for (std::uint32_t x = rect.x; x < rect.x + rect.w; ++x) {
      if (!nmap.covered(x, y)) continue;
      const auto& n = nmap.normal(x, y);
      all.emplace_back(n[0], n[1], n[2]);
    }
  }
  if (max_samples == 0 || all.size() <= max_samples) return all;
  std::vector<Vec3> picked;
  picked.reserve(max_samples);
  for (std::size_t i = 0; i < max_samples; ++i) picked.push_back(all[i * all.size() / max_samples]);
  return picked;
}

inline PatchDescriptor self_similarity_histogram(const NormalMap& nmap, const PatchRect& rect, std::size_t bins = 16,
                                                 std::size_t max_samples = 64, double min_coverage = 0.10) {
  if (rect.w == 0 || rect.h == 0 || rect.x + rect.w > nmap.width || rect.y + rect.h > nmap.height) {
    throw Error("invalid_argument", "patch rect outside the normal map");
  }
  const std::size_t masked = masked_count(nmap, rect);
  PatchDescriptor d = histogram_from_normals(collect_patch_normals(nmap, rect, max_samples), bins);
  if (static_cast<double>(masked) < min_coverage * rect.area()) {
    std::fill(d.hist.begin(), d.hist.end(), 0.0);
    d.empty = true;
  }
  return d;
}

// sum(min) / sum(max): 1 for identical histograms, 0 for disjoint support.
inline double histogram_iou(const PatchDescriptor& a, const PatchDescriptor& b) {
  if (a.empty || b.empty) throw Error("empty_descriptor", "IoU is undefined for empty descriptors");
  if (a.hist.size() != b.hist.size()) throw Error("invalid_argument", "descriptor bin counts differ");
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < a.hist.size(); ++i) {
    lo += std::min(a.hist[i], b.hist[i]);
    hi += std::max(a.hist[i], b.hist[i]);
  }
  return hi > 0.0 ? lo / hi : 0.0;
}

enum class MatchLabel : std::uint8_t { positive, negative, excluded };

inline const char* to_string(MatchLabel l) {
  switch (l) {
    case MatchLabel::positive: return "positive";
    case MatchLabel::negative: return "negative";
    case MatchLabel::excluded: return "excluded";
  }
  return "?";
}

// Double threshold: ground-truth patches must be similar enough to count as
// positives, other shapes' patches dissimilar enough to count as negatives;
// everything in between is left out of the loss.
inline MatchLabel label_from_iou(double iou, bool candidate_is_gt_shape, double theta_p, double theta_n) {
  if (candidate_is_gt_shape) return iou > theta_p ? MatchLabel::positive : MatchLabel::excluded;
  return iou < theta_n ? MatchLabel::negative : MatchLabel::excluded;
}

inline MatchLabel label_match(const PatchDescriptor& query, const PatchDescriptor& candidate,
                              bool candidate_is_gt_shape, double theta_p = 0.4, double theta_n = 0.6) {
  return label_from_iou(histogram_iou(query, candidate), candidate_is_gt_shape, theta_p, theta_n);
}

inline nlohmann::json descriptor_to_json(const PatchDescriptor& d) {
  return {{"hist", d.hist}, {"sample_count", d.sample_count}, {"empty", d.empty}};
}

}  // namespace patchcad
