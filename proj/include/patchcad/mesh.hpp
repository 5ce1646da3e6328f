#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "patchcad/error.hpp"
#include "patchcad/random.hpp"

namespace patchcad {

using Vec3 = Eigen::Vector3d;
using Triangle = std::array<std::uint32_t, 3>;

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<Triangle> triangles;
  std::string category;
};

struct SurfaceSample {
  Vec3 position;
  Vec3 normal;
  std::uint32_t triangle_id = 0;
};

struct BoundingBox {
  Vec3 min;
  Vec3 max;

  Vec3 extent() const { return max - min; }
  Vec3 center() const { return 0.5 * (min + max); }
};

inline BoundingBox bounding_box(const TriMesh& mesh) {
  if (mesh.vertices.empty()) throw Error("empty_mesh", "mesh has no vertices");
  BoundingBox box{mesh.vertices.front(), mesh.vertices.front()};
  for (const auto& v : mesh.vertices) {
    box.min = box.min.cwiseMin(v);
    box.max = box.max.cwiseMax(v);
  }
  return box;
}

inline Vec3 triangle_cross(const TriMesh& mesh, std::size_t t) {
  const auto& tri = mesh.triangles[t];
  const Vec3& a = mesh.vertices[tri[0]];
  return (mesh.vertices[tri[1]] - a).cross(mesh.vertices[tri[2]] - a);
}

inline double triangle_area(const TriMesh& mesh, std::size_t t) { return 0.5 * triangle_cross(mesh, t).norm(); }

// Unit normal following the winding; zero for degenerate triangles.
inline Vec3 face_normal(const TriMesh& mesh, std::size_t t) {
  const Vec3 c = triangle_cross(mesh, t);
  const double n = c.norm();
  return n > 0.0 ? Vec3(c / n) : Vec3::Zero();
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

[[noreturn]] inline void obj_error(std::size_t line, const std::string& what) {
  throw Error("obj_parse", "line " + std::to_string(line) + ": " + what);
}

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    obj_error(line, "malformed number '" + std::string(tok) + "'");
  }
  return v;
}

// Resolves one face corner "v", "v/vt", "v//vn" or "v/vt/vn" to a 0-based
// vertex index. Negative indices count back from the latest vertex.
inline std::uint32_t parse_face_index(std::string_view tok, std::size_t vertex_count, std::size_t line) {
  const std::string_view head = tok.substr(0, tok.find('/'));
  long long idx = 0;
  const auto [ptr, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
  if (ec != std::errc() || ptr != head.data() + head.size()) {
    obj_error(line, "malformed face index '" + std::string(tok) + "'");
  }
  long long resolved = idx > 0 ? idx - 1 : static_cast<long long>(vertex_count) + idx;
  if (idx == 0 || resolved < 0 || resolved >= static_cast<long long>(vertex_count)) {
    obj_error(line, "face index " + std::to_string(idx) + " out of range (" + std::to_string(vertex_count) +
                        " vertices defined)");
  }
  return static_cast<std::uint32_t>(resolved);
}

}  // namespace detail

// Wavefront OBJ subset: v, f, vn, comments. Polygons are fan-triangulated
// from their first corner (convex faces assumed). Texture/normal references in
// face corners are accepted and ignored, as are groups and materials.
inline TriMesh parse_obj(std::istream& in) {
  TriMesh mesh;
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto toks = detail::split_ws(line);
    const std::string_view kw = toks.front();
    if (kw == "v") {
      if (toks.size() < 4 || toks.size() > 5) detail::obj_error(line_no, "vertex needs 3 coordinates");
      mesh.vertices.emplace_back(detail::parse_double(toks[1], line_no), detail::parse_double(toks[2], line_no),
                                 detail::parse_double(toks[3], line_no));
    } else if (kw == "vn") {
      if (toks.size() != 4) detail::obj_error(line_no, "normal needs 3 components");
      for (std::size_t i = 1; i < 4; ++i) detail::parse_double(toks[i], line_no);
    } else if (kw == "f") {
      if (toks.size() < 4) detail::obj_error(line_no, "face needs at least 3 vertices");
      std::vector<std::uint32_t> idx;
      idx.reserve(toks.size() - 1);
      for (std::size_t i = 1; i < toks.size(); ++i) {
        idx.push_back(detail::parse_face_index(toks[i], mesh.vertices.size(), line_no));
      }
      for (std::size_t i = 1; i + 1 < idx.size(); ++i) mesh.triangles.push_back({idx[0], idx[i], idx[i + 1]});
    }
  }
  if (mesh.triangles.empty()) detail::obj_error(line_no, "file contains no faces");
  return mesh;
}

inline TriMesh parse_obj_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_obj(in);
}

inline TriMesh load_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("mesh_unreadable", "cannot open mesh " + path);
  try {
    return parse_obj(in);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

inline void write_obj(std::ostream& out, const TriMesh& mesh) {
  if (!mesh.category.empty()) out << "# category " << mesh.category << "\n";
  char buf[128];
  for (const auto& v : mesh.vertices) {
    std::snprintf(buf, sizeof(buf), "v %.17g %.17g %.17g\n", v.x(), v.y(), v.z());
    out << buf;
  }
  for (const auto& t : mesh.triangles) out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << "\n";
}

inline void save_obj(const TriMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("io_error", "cannot write mesh " + path);
  write_obj(out, mesh);
}

// Recenters the bounding box at the origin and scales uniformly so the
// longest extent is 1.
inline TriMesh normalize_mesh(TriMesh mesh) {
  if (mesh.triangles.empty()) throw Error("empty_mesh", "mesh has no triangles");
  const BoundingBox box = bounding_box(mesh);
  const double longest = box.extent().maxCoeff();
  if (!(longest > 0.0)) throw Error("degenerate_mesh", "mesh has zero extent on every axis");
  const Vec3 center = box.center();
  const double scale = 1.0 / longest;
  for (auto& v : mesh.vertices) v = (v - center) * scale;
  return mesh;
}

// Area-weighted triangle choice, uniform barycentric point inside it.
inline std::vector<SurfaceSample> sample_surface_points(const TriMesh& mesh, std::size_t count,
                                                        std::uint64_t seed) {
  if (count < 1) throw Error("invalid_argument", "sample count must be >= 1");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    total += triangle_area(mesh, t);
    cumulative[t] = total;
  }
  if (!(total > 0.0)) throw Error("degenerate_mesh", "mesh has zero surface area");

  Rng rng = make_rng(seed, 0x73616d70ull);
  std::vector<SurfaceSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double target = uniform01(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), target);
    if (it == cumulative.end()) {
      // target rounded up to total: take the last triangle with nonzero area
      it = std::lower_bound(cumulative.begin(), cumulative.end(), total);
    }
    const auto t = static_cast<std::size_t>(it - cumulative.begin());
    const double r1 = std::sqrt(uniform01(rng));
    const double r2 = uniform01(rng);
    const auto& tri = mesh.triangles[t];
    const Vec3& a = mesh.vertices[tri[0]];
    const Vec3& b = mesh.vertices[tri[1]];
    const Vec3& c = mesh.vertices[tri[2]];
    out.push_back({(1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c, face_normal(mesh, t),
                   static_cast<std::uint32_t>(t)});
  }
  return out;
}

}  // namespace patchcad
