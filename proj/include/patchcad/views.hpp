#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "json.hpp"
#include "patchcad/error.hpp"
#include "patchcad/random.hpp"

namespace patchcad {

using Vec3 = Eigen::Vector3d;

// Unit quaternion (w, x, y, z). Rotations built through the factories below
// are normalized and sign-canonical; raw construction is allowed so that
// callers can detect and reject non-unit input.
struct Rotation {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static Rotation identity() { return {}; }

  static Rotation from_wxyz(double w, double x, double y, double z) {
    return Rotation{w, x, y, z}.normalized().canonical();
  }

  static Rotation from_axis_angle(const Vec3& axis, double angle) {
    const Vec3 a = axis.normalized();
    const double s = std::sin(angle / 2.0);
    return from_wxyz(std::cos(angle / 2.0), a.x() * s, a.y() * s, a.z() * s);
  }

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  bool is_unit(double tol = 1e-6) const { return std::abs(norm() - 1.0) <= tol; }

  Rotation normalized() const {
    const double n = norm();
    if (!(n > 0.0) || !std::isfinite(n)) throw Error("degenerate_rotation", "zero or non-finite quaternion");
    return {w / n, x / n, y / n, z / n};
  }

  // w >= 0; when w == 0 the first nonzero component is positive.
  Rotation canonical() const {
    const std::array<double, 4> c{w, x, y, z};
    for (double v : c) {
      if (v > 0.0) return *this;
      if (v < 0.0) return {-w, -x, -y, -z};
    }
    return *this;
  }

  Rotation conjugate() const { return {w, -x, -y, -z}; }
  Rotation negated() const { return {-w, -x, -y, -z}; }

  std::array<double, 4> wxyz() const { return {w, x, y, z}; }

  Eigen::Matrix3d matrix() const {
    return Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix();
  }

  Vec3 rotate(const Vec3& v) const { return matrix() * v; }

  bool operator==(const Rotation&) const = default;
};

// Hamilton product; (a * b) applies b first, then a.
inline Rotation operator*(const Rotation& a, const Rotation& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

inline double quat_dot(const Rotation& a, const Rotation& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

// Normalized, canonical product.
inline Rotation compose(const Rotation& a, const Rotation& b) { return (a * b).normalized().canonical(); }

// 2 acos |<a, b>|, in [0, pi]; q and -q are the same rotation.
inline double quat_geodesic(const Rotation& a, const Rotation& b) {
  return 2.0 * std::acos(std::min(1.0, std::abs(quat_dot(a, b))));
}

// Uniform over SO(3) (Shoemake's subgroup algorithm).
inline Rotation random_rotation(Rng& rng) {
  const double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  const double u3 = uniform01(rng);
  const double a = std::sqrt(1.0 - u1);
  const double b = std::sqrt(u1);
  const double t2 = 2.0 * std::numbers::pi * u2;
  const double t3 = 2.0 * std::numbers::pi * u3;
  return Rotation::from_wxyz(a * std::sin(t2), a * std::cos(t2), b * std::sin(t3), b * std::cos(t3));
}

inline std::vector<Rotation> random_rotations(std::size_t count, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x7669657773ull);
  std::vector<Rotation> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_rotation(rng));
  return out;
}

struct ViewSet {
  std::vector<Rotation> medoids;
  std::size_t source_size = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return medoids.size(); }
  const Rotation& operator[](std::size_t i) const { return medoids[i]; }
};

struct KMedoidsResult {
  ViewSet views;
  std::vector<std::size_t> medoid_indices;   // into the input points
  std::vector<std::size_t> assignment;       // point -> medoid slot
  std::vector<double> cost_history;          // cost after each assignment pass
  std::vector<std::vector<std::size_t>> medoid_history;
  std::size_t iterations = 0;
  bool converged = false;

  double cost() const { return cost_history.empty() ? 0.0 : cost_history.back(); }
};

namespace detail {

inline double assign_to_medoids(const std::vector<double>& dist, std::size_t n,
                                const std::vector<std::size_t>& medoids,
                                std::vector<std::size_t>& assignment) {
  double cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < medoids.size(); ++m) {
      const double d = dist[i * n + medoids[m]];
      if (d < best_d) {
        best_d = d;
        best = m;
      }
    }
    assignment[i] = best;
    cost += best_d;
  }
  return cost;
}

}  // namespace detail

// Voronoi-iteration K-medoids under the quaternion geodesic. Initialization
// picks a seeded random first medoid, then greedy farthest points (ties to the
// lowest index). Each iteration moves every medoid to the cluster member with
// the smallest intra-cluster distance sum (the current medoid is kept when it
// is among the minimizers), then reassigns; stops when no medoid moves.
inline KMedoidsResult kmedoids(std::span<const Rotation> points, std::size_t k, std::uint64_t seed,
                               std::size_t max_iters) {
  const std::size_t n = points.size();
  if (k < 1) throw Error("invalid_argument", "kmedoids: k must be >= 1");
  if (k > n) {
    throw Error("invalid_argument", "kmedoids: k = " + std::to_string(k) + " exceeds point count " +
                                        std::to_string(n));
  }

  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double d = quat_geodesic(points[i], points[j]);
      dist[i * n + j] = d;
      dist[j * n + i] = d;
    }
  }

  KMedoidsResult result;
  std::vector<std::size_t> medoids;
  Rng rng = make_rng(seed, 0x6b6d6564ull);
  medoids.push_back(uniform_index(rng, n));
  std::vector<double> nearest(n);
  for (std::size_t i = 0; i < n; ++i) nearest[i] = dist[i * n + medoids[0]];
  while (medoids.size() < k) {
    std::size_t far = 0;
    double far_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(medoids.begin(), medoids.end(), i) != medoids.end()) continue;
      if (nearest[i] > far_d) {
        far_d = nearest[i];
        far = i;
      }
    }
    medoids.push_back(far);
    for (std::size_t i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], dist[i * n + far]);
  }

  std::vector<std::size_t> assignment(n, 0);
  result.cost_history.push_back(detail::assign_to_medoids(dist, n, medoids, assignment));
  result.medoid_history.push_back(medoids);

  while (result.iterations < max_iters) {
    bool moved = false;
    for (std::size_t m = 0; m < k; ++m) {
      double best_sum = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (assignment[j] == m) best_sum += dist[medoids[m] * n + j];
      }
      std::size_t best = medoids[m];
      for (std::size_t i = 0; i < n; ++i) {
        if (assignment[i] != m || i == medoids[m]) continue;
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (assignment[j] == m) sum += dist[i * n + j];
        }
        if (sum < best_sum) {
          best_sum = sum;
          best = i;
        }
      }
      if (best != medoids[m]) {
        medoids[m] = best;
        moved = true;
      }
    }
    ++result.iterations;
    if (!moved) {
      result.converged = true;
      break;
    }
    result.cost_history.push_back(detail::assign_to_medoids(dist, n, medoids, assignment));
    result.medoid_history.push_back(medoids);
  }

  result.medoid_indices = medoids;
  result.assignment = std::move(assignment);
  result.views.source_size = n;
  result.views.seed = seed;
  for (std::size_t m : medoids) result.views.medoids.push_back(points[m]);
  return result;
}

// Canonical views: K-medoids over `candidates` uniform rotations.
inline ViewSet canonical_views(std::size_t n, std::size_t candidates, std::uint64_t seed,
                               std::size_t max_iters) {
  const auto points = random_rotations(candidates, seed);
  return kmedoids(points, n, seed, max_iters).views;
}

inline nlohmann::json rotation_to_json(const Rotation& r) { return {r.w, r.x, r.y, r.z}; }

inline Rotation rotation_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw Error("bad_rotation", "rotation must be [w, x, y, z]");
  return Rotation{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline nlohmann::json viewset_to_json(const ViewSet& v) {
  nlohmann::json medoids = nlohmann::json::array();
  for (const auto& r : v.medoids) medoids.push_back(rotation_to_json(r));
  return {{"n", v.medoids.size()}, {"medoids", medoids}, {"seed", v.seed}, {"source_size", v.source_size}};
}

inline ViewSet viewset_from_json(const nlohmann::json& j) {
  try {
    ViewSet v;
    for (const auto& m : j.at("medoids")) {
      Rotation r = rotation_from_json(m);
      if (!r.is_unit()) throw Error("bad_viewset", "view medoid is not a unit quaternion");
      v.medoids.push_back(r);
    }
    if (j.at("n").get<std::size_t>() != v.medoids.size()) {
      throw Error("bad_viewset", "view set 'n' does not match the medoid count");
    }
    v.seed = j.at("seed").get<std::uint64_t>();
    v.source_size = j.value("source_size", v.medoids.size());
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_viewset", std::string("malformed view set: ") + e.what());
  }
}

}  // namespace patchcad
