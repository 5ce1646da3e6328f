#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "patchcad/config.hpp"
#include "patchcad/error.hpp"
#include "patchcad/index.hpp"
#include "patchcad/mesh.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

inline constexpr std::size_t kMaxRecallK = 24;

// 1-based rank of `gt` in the ranking, 0 when absent.
inline std::size_t rank_of(const RetrievalResult& r, std::uint32_t gt) {
  for (std::size_t i = 0; i < r.ranking.size(); ++i) {
    if (r.ranking[i].shape_id == gt) return i + 1;
  }
  return 0;
}

inline double recall_at_k(std::span<const RetrievalResult> results, std::span<const std::uint32_t> gts, std::size_t k) {
  if (results.size() != gts.size()) throw Error("invalid_argument", "results and ground truths differ in length");
  if (k < 1) throw Error("invalid_argument", "k must be >= 1");
  if (results.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const std::size_t r = rank_of(results[i], gts[i]);
    hits += r != 0 && r <= k;
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

// Same metric from precomputed ranks (0 = absent).
inline double recall_from_ranks(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) return 0.0;
  const auto hits = std::count_if(ranks.begin(), ranks.end(), [&](std::size_t r) { return r != 0 && r <= k; });
  return static_cast<double>(hits) / static_cast<double>(ranks.size());
}

inline double rotation_error(const Rotation& pred, const Rotation& gt) {
  return quat_geodesic(pred, gt) * 180.0 / std::numbers::pi;
}

namespace detail {

// Uniform hash grid with cell size = radius; answers "any point within radius".
class RadiusGrid {
 public:
  RadiusGrid(std::span<const SurfaceSample> points, double radius) : radius_(radius), points_(points) {
    for (std::uint32_t i = 0; i < points.size(); ++i) cells_[key(cell(points[i].position))].push_back(i);
  }

  bool any_within(const Vec3& p) const {
    const auto c = cell(p);
    const double r2 = radius_ * radius_;
    for (long dx = -1; dx <= 1; ++dx) {
      for (long dy = -1; dy <= 1; ++dy) {
        for (long dz = -1; dz <= 1; ++dz) {
          auto it = cells_.find(key({c[0] + dx, c[1] + dy, c[2] + dz}));
          if (it == cells_.end()) continue;
          for (std::uint32_t i : it->second) {
            if ((points_[i].position - p).squaredNorm() <= r2) return true;
          }
        }
      }
    }
    return false;
  }

 private:
  std::array<long, 3> cell(const Vec3& p) const {
    return {static_cast<long>(std::floor(p.x() / radius_)), static_cast<long>(std::floor(p.y() / radius_)),
            static_cast<long>(std::floor(p.z() / radius_))};
  }
  static std::uint64_t key(const std::array<long, 3>& c) {
    auto u = [](long v) { return static_cast<std::uint64_t>(v + (1l << 20)) & 0x1FFFFFull; };
    return u(c[0]) | (u(c[1]) << 21) | (u(c[2]) << 42);
  }

  double radius_;
  std::span<const SurfaceSample> points_;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

inline double fraction_within(std::span<const SurfaceSample> from, const RadiusGrid& to) {
  std::size_t n = 0;
  for (const auto& s : from) n += to.any_within(s.position);
  return static_cast<double>(n) / static_cast<double>(from.size());
}

}  // namespace detail

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double f = 0.0;
};

// Point-sampled F-score: precision is the fraction of predicted samples
// within `threshold` of some ground-truth sample, recall the converse.
inline FScore mesh_fscore_detail(const TriMesh& pred, const TriMesh& gt, double threshold, std::size_t samples,
                                 std::uint64_t seed) {
  if (!(threshold > 0.0)) throw Error("invalid_argument", "F-score threshold must be > 0");
  const auto ps = sample_surface_points(pred, samples, seed);
  const auto gs = sample_surface_points(gt, samples, seed);
  const detail::RadiusGrid pg(ps, threshold), gg(gs, threshold);
  FScore s;
  s.precision = detail::fraction_within(ps, gg);
  s.recall = detail::fraction_within(gs, pg);
  s.f = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline double mesh_fscore(const TriMesh& pred, const TriMesh& gt, double threshold, std::size_t samples,
                          std::uint64_t seed) {
  return mesh_fscore_detail(pred, gt, threshold, samples, seed).f;
}

// ---------------------------------------------------------------------------
// Reports

struct QueryRow {
  std::uint32_t query_id = 0;
  std::uint32_t gt_shape = 0;
  std::vector<std::uint32_t> ranked;  // at most kMaxRecallK
  std::size_t gt_rank = 0;            // 1-based, 0 = absent
  double fscore = -1.0;               // top-1 vs the query shape; < 0 if not computed
  double rotation_error = -1.0;       // degrees; < 0 if not computed
};

struct MetricsReport {
  std::vector<QueryRow> rows;
  std::array<double, kMaxRecallK> recall{};  // recall[k-1]
  double mean_fscore = -1.0;
  double median_rotation_error = -1.0;
  nlohmann::json config_echo;

  void finalize() {
    std::vector<std::size_t> ranks;
    for (const auto& r : rows) ranks.push_back(r.gt_rank);
    for (std::size_t k = 1; k <= kMaxRecallK; ++k) recall[k - 1] = recall_from_ranks(ranks, k);
    std::vector<double> f, rot;
    for (const auto& r : rows) {
      if (r.fscore >= 0.0) f.push_back(r.fscore);
      if (r.rotation_error >= 0.0) rot.push_back(r.rotation_error);
    }
    if (!f.empty()) {
      double sum = 0.0;
      for (double v : f) sum += v;
      mean_fscore = sum / static_cast<double>(f.size());
    }
    if (!rot.empty()) median_rotation_error = median(rot);
  }

  bool recall_monotone() const {
    for (std::size_t k = 1; k < kMaxRecallK; ++k) {
      if (recall[k] < recall[k - 1]) return false;
    }
    return std::all_of(recall.begin(), recall.end(), [](double r) { return r >= 0.0 && r <= 1.0; });
  }

  static double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  }
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string report_rows_csv(const MetricsReport& r) {
  std::string out = "query_id,gt_shape,gt_rank,fscore,rotation_error,ranked\n";
  for (const auto& row : r.rows) {
    out += std::to_string(row.query_id) + "," + std::to_string(row.gt_shape) + "," + std::to_string(row.gt_rank) + "," +
           format_double(row.fscore) + "," + format_double(row.rotation_error) + ",";
    for (std::size_t i = 0; i < row.ranked.size(); ++i) out += (i ? " " : "") + std::to_string(row.ranked[i]);
    out += "\n";
  }
  return out;
}

inline std::string report_recall_csv(const MetricsReport& r) {
  std::string out = "k,recall\n";
  for (std::size_t k = 1; k <= kMaxRecallK; ++k) out += std::to_string(k) + "," + format_double(r.recall[k - 1]) + "\n";
  return out;
}

inline nlohmann::json report_to_json(const MetricsReport& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (std::size_t k = 1; k <= kMaxRecallK; ++k) recall[std::to_string(k)] = r.recall[k - 1];
  nlohmann::json j = {{"queries", r.rows.size()}, {"recall_at_k", recall}, {"config", r.config_echo}};
  if (r.mean_fscore >= 0.0) j["mean_fscore"] = r.mean_fscore;
  if (r.median_rotation_error >= 0.0) j["median_rotation_error_deg"] = r.median_rotation_error;
  return j;
}

}  // namespace patchcad
