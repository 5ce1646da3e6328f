#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "patchcad/binary_io.hpp"
#include "patchcad/error.hpp"
#include "patchcad/mesh.hpp"
#include "patchcad/random.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

using Normal3f = std::array<float, 3>;

// Canonical-space normals plus coverage. Row-major, row 0 at the top.
struct NormalMap {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<Normal3f> normals;
  std::vector<std::uint8_t> mask;

  NormalMap() = default;
  NormalMap(std::uint32_t w, std::uint32_t h)
      : width(w), height(h), normals(std::size_t{w} * h, Normal3f{0.f, 0.f, 0.f}), mask(std::size_t{w} * h, 0) {}

  std::size_t index(std::uint32_t x, std::uint32_t y) const { return std::size_t{y} * width + x; }
  bool covered(std::uint32_t x, std::uint32_t y) const { return mask[index(x, y)] != 0; }
  const Normal3f& normal(std::uint32_t x, std::uint32_t y) const { return normals[index(x, y)]; }

  bool operator==(const NormalMap&) const = default;
};

// Single-channel image-domain proxy.
struct ShadedRender {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<float> intensity;
  std::vector<std::uint8_t> mask;

  ShadedRender() = default;
  ShadedRender(std::uint32_t w, std::uint32_t h)
      : width(w), height(h), intensity(std::size_t{w} * h, 0.f), mask(std::size_t{w} * h, 0) {}

  std::size_t index(std::uint32_t x, std::uint32_t y) const { return std::size_t{y} * width + x; }
  bool covered(std::uint32_t x, std::uint32_t y) const { return mask[index(x, y)] != 0; }

  bool operator==(const ShadedRender&) const = default;
};

// Orthographic camera looking down -z of view space, with view space obtained
// from object space by the inverse of the view rotation (the view rotation is
// the camera's orientation in the object frame). The projected bounding box
// of the mesh is fitted into the image with a 5% margin on each side.
struct ViewProjection {
  Eigen::Matrix3d to_view;  // object -> view
  double scale = 1.0;       // view units -> pixels
  double center_x = 0.0;    // view-space point mapped to the image center
  double center_y = 0.0;
  std::uint32_t resolution = 0;

  static constexpr double kMargin = 0.05;

  Vec3 view_point(const Vec3& p) const { return to_view * p; }

  // (column, row, depth); depth grows away from the camera.
  Vec3 project(const Vec3& p) const {
    const Vec3 v = to_view * p;
    const double half = 0.5 * resolution;
    return {(v.x() - center_x) * scale + half, half - (v.y() - center_y) * scale, -v.z()};
  }
};

inline ViewProjection make_projection(const TriMesh& mesh, const Rotation& view, std::uint32_t resolution) {
  if (!view.is_unit()) throw Error("degenerate_view", "view rotation is not a unit quaternion");
  if (resolution < 8) throw Error("invalid_argument", "render resolution must be >= 8");
  if (mesh.vertices.empty()) throw Error("empty_projection", "mesh has no vertices");
  ViewProjection proj;
  proj.to_view = view.matrix().transpose();
  proj.resolution = resolution;
  double min_x = std::numeric_limits<double>::infinity(), max_x = -min_x;
  double min_y = min_x, max_y = -min_x;
  for (const auto& p : mesh.vertices) {
    const Vec3 v = proj.to_view * p;
    min_x = std::min(min_x, v.x());
    max_x = std::max(max_x, v.x());
    min_y = std::min(min_y, v.y());
    max_y = std::max(max_y, v.y());
  }
  const double extent = std::max(max_x - min_x, max_y - min_y);
  if (!(extent > 1e-12)) throw Error("empty_projection", "mesh projects to a point");
  proj.scale = (1.0 - 2.0 * ViewProjection::kMargin) * resolution / extent;
  proj.center_x = 0.5 * (min_x + max_x);
  proj.center_y = 0.5 * (min_y + max_y);
  return proj;
}

// Z-buffered rasterization at pixel centers. Each covered pixel stores the
// canonical-frame normal of the nearest face; back faces are not culled and
// depth ties go to the lower triangle index.
inline NormalMap rasterize(const TriMesh& mesh, const Rotation& view, std::uint32_t resolution) {
  const ViewProjection proj = make_projection(mesh, view, resolution);
  NormalMap out(resolution, resolution);
  std::vector<double> depth(std::size_t{resolution} * resolution, std::numeric_limits<double>::infinity());

  std::vector<Vec3> screen;
  screen.reserve(mesh.vertices.size());
  for (const auto& p : mesh.vertices) screen.push_back(proj.project(p));

  bool any = false;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const Vec3 n = face_normal(mesh, t);
    if (n.isZero()) continue;
    const auto& tri = mesh.triangles[t];
    const Vec3& a = screen[tri[0]];
    const Vec3& b = screen[tri[1]];
    const Vec3& c = screen[tri[2]];
    const double area = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
    if (std::abs(area) < 1e-12) continue;  // edge-on

    const double lo_x = std::min({a.x(), b.x(), c.x()});
    const double hi_x = std::max({a.x(), b.x(), c.x()});
    const double lo_y = std::min({a.y(), b.y(), c.y()});
    const double hi_y = std::max({a.y(), b.y(), c.y()});
    const auto x0 = static_cast<long>(std::max(0.0, std::ceil(lo_x - 0.5)));
    const auto x1 = static_cast<long>(std::min<double>(resolution - 1, std::floor(hi_x - 0.5)));
    const auto y0 = static_cast<long>(std::max(0.0, std::ceil(lo_y - 0.5)));
    const auto y1 = static_cast<long>(std::min<double>(resolution - 1, std::floor(hi_y - 0.5)));
    const Normal3f stored{static_cast<float>(n.x()), static_cast<float>(n.y()), static_cast<float>(n.z())};

    for (long py = y0; py <= y1; ++py) {
      for (long px = x0; px <= x1; ++px) {
        const double sx = px + 0.5;
        const double sy = py + 0.5;
        // barycentric weights via edge functions, normalized by the signed area
        const double wa = ((b.x() - sx) * (c.y() - sy) - (b.y() - sy) * (c.x() - sx)) / area;
        const double wb = ((c.x() - sx) * (a.y() - sy) - (c.y() - sy) * (a.x() - sx)) / area;
        const double wc = 1.0 - wa - wb;
        // centers on a shared edge belong to both triangles so rounding cannot open cracks
        constexpr double kEdgeTolerance = 1e-9;
        if (wa < -kEdgeTolerance || wb < -kEdgeTolerance || wc < -kEdgeTolerance) continue;
        const double z = wa * a.z() + wb * b.z() + wc * c.z();
        const std::size_t idx = out.index(static_cast<std::uint32_t>(px), static_cast<std::uint32_t>(py));
        if (z < depth[idx]) {
          depth[idx] = z;
          out.normals[idx] = stored;
          out.mask[idx] = 1;
          any = true;
        }
      }
    }
  }
  if (!any) throw Error("empty_projection", "no pixel centers covered by the mesh");
  return out;
}

// Lambert shading of the view-space normal plus Gaussian noise, clamped to
// [0, 1]. Unmasked pixels stay 0.
inline ShadedRender shade(const NormalMap& nmap, const Rotation& view, const Vec3& light_dir,
                          double noise_sigma, std::uint64_t seed) {
  if (std::abs(light_dir.norm() - 1.0) > 1e-6) throw Error("invalid_argument", "light direction must be unit");
  if (noise_sigma < 0.0) throw Error("invalid_argument", "noise sigma must be >= 0");
  const Eigen::Matrix3d to_view = view.matrix().transpose();
  ShadedRender out(nmap.width, nmap.height);
  out.mask = nmap.mask;
  Rng rng = make_rng(seed, 0x7368616465ull);
  for (std::size_t i = 0; i < nmap.normals.size(); ++i) {
    if (!nmap.mask[i]) continue;
    const auto& n = nmap.normals[i];
    const Vec3 nv = to_view * Vec3(n[0], n[1], n[2]);
    double v = std::max(0.0, nv.dot(light_dir));
    if (noise_sigma > 0.0) v += noise_sigma * gaussian(rng);
    out.intensity[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

// Identity-view shading: the stored normals are treated as view-space.
inline ShadedRender shade(const NormalMap& nmap, const Vec3& light_dir, double noise_sigma, std::uint64_t seed) {
  return shade(nmap, Rotation::identity(), light_dir, noise_sigma, seed);
}

// NMAP: "NMAP", u32 width, u32 height, then (nx, ny, nz, mask) f32 per pixel.
inline void write_nmap(std::ostream& os, const NormalMap& m) {
  io::write_magic(os, "NMAP");
  io::write_u32(os, m.width);
  io::write_u32(os, m.height);
  for (std::size_t i = 0; i < m.normals.size(); ++i) {
    for (float c : m.normals[i]) io::write_f32(os, c);
    io::write_f32(os, m.mask[i] ? 1.0f : 0.0f);
  }
}

inline NormalMap read_nmap(std::istream& is) {
  io::expect_magic(is, "NMAP");
  const std::uint32_t w = io::read_u32(is);
  const std::uint32_t h = io::read_u32(is);
  if (std::uint64_t{w} * h > (1ull << 28)) throw Error("bad_raster", "normal map dimensions too large");
  NormalMap m(w, h);
  for (std::size_t i = 0; i < m.normals.size(); ++i) {
    for (float& c : m.normals[i]) c = io::read_f32(is);
    const float mask = io::read_f32(is);
    if (mask != 0.0f && mask != 1.0f) throw Error("bad_raster", "mask value must be 0.0 or 1.0");
    m.mask[i] = mask == 1.0f;
  }
  return m;
}

// SHAD: "SHAD", u32 width, u32 height, then (intensity, mask) f32 per pixel.
inline void write_shad(std::ostream& os, const ShadedRender& r) {
  io::write_magic(os, "SHAD");
  io::write_u32(os, r.width);
  io::write_u32(os, r.height);
  for (std::size_t i = 0; i < r.intensity.size(); ++i) {
    io::write_f32(os, r.intensity[i]);
    io::write_f32(os, r.mask[i] ? 1.0f : 0.0f);
  }
}

inline ShadedRender read_shad(std::istream& is) {
  io::expect_magic(is, "SHAD");
  const std::uint32_t w = io::read_u32(is);
  const std::uint32_t h = io::read_u32(is);
  if (std::uint64_t{w} * h > (1ull << 28)) throw Error("bad_raster", "shaded render dimensions too large");
  ShadedRender r(w, h);
  for (std::size_t i = 0; i < r.intensity.size(); ++i) {
    r.intensity[i] = io::read_f32(is);
    const float mask = io::read_f32(is);
    if (mask != 0.0f && mask != 1.0f) throw Error("bad_raster", "mask value must be 0.0 or 1.0");
    r.mask[i] = mask == 1.0f;
  }
  return r;
}

template <typename Raster, typename Writer>
void save_raster(const Raster& raster, const std::string& path, Writer&& writer) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write " + path);
  writer(out, raster);
}

inline void save_nmap(const NormalMap& m, const std::string& path) { save_raster(m, path, write_nmap); }
inline void save_shad(const ShadedRender& r, const std::string& path) { save_raster(r, path, write_shad); }

inline NormalMap load_nmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path);
  return read_nmap(in);
}

inline ShadedRender load_shad(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open " + path);
  return read_shad(in);
}

}  // namespace patchcad
