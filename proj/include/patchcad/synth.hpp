#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchcad/error.hpp"
#include "patchcad/mesh.hpp"
#include "patchcad/random.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

enum class Category : std::uint8_t { chair, table, cabinet };

inline const char* to_string(Category c) {
  switch (c) {
    case Category::chair: return "chair";
    case Category::table: return "table";
    case Category::cabinet: return "cabinet";
  }
  return "?";
}

inline Category category_from_string(const std::string& s) {
  if (s == "chair") return Category::chair;
  if (s == "table") return Category::table;
  if (s == "cabinet") return Category::cabinet;
  throw Error("invalid_argument", "unknown category '" + s + "'");
}

// Part parameters in model units before normalization. Chairs and tables
// read legs/seat(top)/back; cabinets read seat_* as the body footprint,
// leg_height + back_height as the body height and drawer_count.
struct SynthParams {
  double leg_height = 0.5;      // [0.2, 1.0]
  double leg_thickness = 0.08;  // [0.03, 0.15]
  double seat_width = 0.8;      // [0.4, 1.2]
  double seat_depth = 0.8;      // [0.4, 1.2]
  double seat_thickness = 0.1;  // [0.03, 0.2]
  bool has_back = true;
  double back_height = 0.6;        // [0.2, 1.0]
  std::uint32_t drawer_count = 2;  // [0, 4]

  bool operator==(const SynthParams&) const = default;
};

struct ParamRange {
  const char* name;
  double lo;
  double hi;
};

inline constexpr std::array<ParamRange, 6> kParamRanges{{{"leg_height", 0.2, 1.0},
                                                         {"leg_thickness", 0.03, 0.15},
                                                         {"seat_width", 0.4, 1.2},
                                                         {"seat_depth", 0.4, 1.2},
                                                         {"seat_thickness", 0.03, 0.2},
                                                         {"back_height", 0.2, 1.0}}};
inline constexpr std::uint32_t kMaxDrawers = 4;

inline std::array<double, 6> continuous_params(const SynthParams& p) {
  return {p.leg_height, p.leg_thickness, p.seat_width, p.seat_depth, p.seat_thickness, p.back_height};
}

inline void set_continuous_param(SynthParams& p, std::size_t i, double v) {
  double* slots[] = {&p.leg_height, &p.leg_thickness, &p.seat_width, &p.seat_depth, &p.seat_thickness,
                     &p.back_height};
  *slots[i] = v;
}

struct SynthSpec {
  Category category = Category::chair;
  SynthParams params;
  std::uint64_t seed = 0;
};

inline void validate_spec(const SynthSpec& spec) {
  const auto values = continuous_params(spec.params);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] >= kParamRanges[i].lo && values[i] <= kParamRanges[i].hi)) {
      throw Error("param_out_of_range", std::string(kParamRanges[i].name) + " = " + std::to_string(values[i]) +
                                            " outside [" + std::to_string(kParamRanges[i].lo) + ", " +
                                            std::to_string(kParamRanges[i].hi) + "]");
    }
  }
  if (spec.params.drawer_count > kMaxDrawers) throw Error("param_out_of_range", "drawer_count above 4");
  if (2.0 * spec.params.leg_thickness >= std::min(spec.params.seat_width, spec.params.seat_depth)) {
    throw Error("param_out_of_range", "legs wider than the seat");
  }
}

// Appends an axis-aligned box with outward-facing triangles
// (8 vertices, 12 triangles).
inline void append_box(TriMesh& mesh, const Vec3& lo, const Vec3& hi) {
  const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
  for (int i = 0; i < 8; ++i) {
    mesh.vertices.emplace_back(i & 1 ? hi.x() : lo.x(), i & 2 ? hi.y() : lo.y(), i & 4 ? hi.z() : lo.z());
  }
  // corner index = ix + 2 iy + 4 iz; each quad is counter-clockwise seen from outside
  static constexpr std::array<std::array<std::uint32_t, 4>, 6> quads{{{1, 3, 7, 5},
                                                                      {0, 4, 6, 2},
                                                                      {2, 6, 7, 3},
                                                                      {0, 1, 5, 4},
                                                                      {4, 5, 7, 6},
                                                                      {0, 2, 3, 1}}};
  for (const auto& q : quads) {
    mesh.triangles.push_back({base + q[0], base + q[1], base + q[2]});
    mesh.triangles.push_back({base + q[0], base + q[2], base + q[3]});
  }
}

// Box-assembled shape for the category template, normalized.
inline TriMesh generate_shape(const SynthSpec& spec) {
  validate_spec(spec);
  const SynthParams& p = spec.params;
  TriMesh mesh;
  mesh.category = to_string(spec.category);
  const double hw = p.seat_width / 2.0;
  const double hd = p.seat_depth / 2.0;
  const double lt = p.leg_thickness;

  auto legs = [&]() {
    for (int sx : {-1, 1}) {
      for (int sz : {-1, 1}) {
        const double x0 = sx < 0 ? -hw : hw - lt;
        const double z0 = sz < 0 ? -hd : hd - lt;
        append_box(mesh, {x0, 0.0, z0}, {x0 + lt, p.leg_height, z0 + lt});
      }
    }
  };

  switch (spec.category) {
    case Category::chair: {
      const double top = p.leg_height + p.seat_thickness;
      append_box(mesh, {-hw, p.leg_height, -hd}, {hw, top, hd});
      legs();
      if (p.has_back) append_box(mesh, {-hw, top, -hd}, {hw, top + p.back_height, -hd + lt});
      break;
    }
    case Category::table: {
      append_box(mesh, {-hw, p.leg_height, -hd}, {hw, p.leg_height + p.seat_thickness, hd});
      legs();
      break;
    }
    case Category::cabinet: {
      const double height = p.leg_height + p.back_height;
      append_box(mesh, {-hw, 0.0, -hd}, {hw, height, hd});
      const std::uint32_t n = p.drawer_count;
      if (n > 0) {
        const double band = height / n;
        const double margin = 0.08 * std::min(band, p.seat_width);
        const double depth = 0.5 * p.seat_thickness;
        for (std::uint32_t i = 0; i < n; ++i) {
          append_box(mesh, {-hw + margin, i * band + margin, hd}, {hw - margin, (i + 1) * band - margin, hd + depth});
        }
      }
      break;
    }
  }
  return normalize_mesh(std::move(mesh));
}

inline nlohmann::json params_to_json(const SynthParams& p) {
  return {{"leg_height", p.leg_height},       {"leg_thickness", p.leg_thickness},
          {"seat_width", p.seat_width},       {"seat_depth", p.seat_depth},
          {"seat_thickness", p.seat_thickness}, {"has_back", p.has_back},
          {"back_height", p.back_height},     {"drawer_count", p.drawer_count}};
}

inline SynthParams params_from_json(const nlohmann::json& j) {
  SynthParams p;
  p.leg_height = j.at("leg_height").get<double>();
  p.leg_thickness = j.at("leg_thickness").get<double>();
  p.seat_width = j.at("seat_width").get<double>();
  p.seat_depth = j.at("seat_depth").get<double>();
  p.seat_thickness = j.at("seat_thickness").get<double>();
  p.has_back = j.at("has_back").get<bool>();
  p.back_height = j.at("back_height").get<double>();
  p.drawer_count = j.at("drawer_count").get<std::uint32_t>();
  return p;
}

// ---------------------------------------------------------------------------
// Benchmarks

struct BenchmarkShape {
  std::uint32_t id = 0;
  std::string name;
  std::string category;
  std::string path;                 // OBJ file, relative to the manifest
  std::optional<SynthSpec> spec;    // set for generated shapes
  bool held_out = false;
};

struct BenchmarkQuery {
  std::uint32_t id = 0;
  std::uint32_t shape = 0;
  Rotation view;
  std::uint64_t seed = 0;
  bool leave_out = false;
};

struct Benchmark {
  std::vector<BenchmarkShape> shapes;  // indexed by id
  std::vector<BenchmarkQuery> queries;
  double leave_out_fraction = 0.0;
  std::uint64_t seed = 0;

  std::vector<std::uint32_t> database_ids() const {
    std::vector<std::uint32_t> ids;
    for (const auto& s : shapes) {
      if (!s.held_out) ids.push_back(s.id);
    }
    return ids;
  }
};

// Each continuous part parameter takes one of kLevels evenly spaced values,
// so instances of a category share exact part dimensions by construction.
inline constexpr int kParamLevels = 4;

inline double param_level(std::size_t param, int level) {
  const auto& r = kParamRanges[param];
  return r.lo + (r.hi - r.lo) * (0.5 + level) / kParamLevels;
}

inline SynthParams random_params(Category c, Rng& rng) {
  SynthParams p;
  for (std::size_t i = 0; i < kParamRanges.size(); ++i) {
    set_continuous_param(p, i, param_level(i, static_cast<int>(uniform_index(rng, kParamLevels))));
  }
  p.has_back = c == Category::chair ? uniform01(rng) < 0.75 : false;
  p.drawer_count = c == Category::cabinet ? static_cast<std::uint32_t>(uniform_index(rng, kMaxDrawers + 1)) : 0;
  return p;
}

inline std::size_t shared_part_count(const SynthParams& a, const SynthParams& b) {
  const auto va = continuous_params(a);
  const auto vb = continuous_params(b);
  std::size_t n = 0;
  for (std::size_t i = 0; i < va.size(); ++i) n += va[i] == vb[i];
  return n;
}

// Shapes cycle chair, table, cabinet. Held-out shapes are removed from the
// database while keeping at least one database shape per category; every
// shape gets `views_per_query` uniformly drawn query views.
inline Benchmark generate_benchmark(std::size_t num_shapes, double leave_out_fraction, std::size_t views_per_query,
                                    std::uint64_t seed) {
  if (num_shapes < 4) throw Error("invalid_argument", "benchmark needs at least 4 shapes");
  if (!(leave_out_fraction >= 0.0 && leave_out_fraction < 1.0)) {
    throw Error("invalid_argument", "leave-out fraction must be in [0, 1)");
  }
  Benchmark b;
  b.leave_out_fraction = leave_out_fraction;
  b.seed = seed;
  Rng rng = make_rng(seed, 0x73796e7468ull);
  static constexpr std::array<Category, 3> cycle{Category::chair, Category::table, Category::cabinet};
  std::map<std::string, std::size_t> per_category;
  for (std::size_t i = 0; i < num_shapes; ++i) {
    const Category c = cycle[i % 3];
    SynthSpec spec{c, {}, derive_seed(seed, i)};
    for (int attempt = 0;; ++attempt) {
      spec.params = random_params(c, rng);
      const bool duplicate = std::any_of(b.shapes.begin(), b.shapes.end(), [&](const BenchmarkShape& s) {
        return s.spec->category == c && s.spec->params == spec.params;
      });
      if (!duplicate || attempt > 100) break;
    }
    BenchmarkShape s;
    s.id = static_cast<std::uint32_t>(i);
    s.category = to_string(c);
    char name[32];
    std::snprintf(name, sizeof(name), "%s_%03zu", s.category.c_str(), per_category[s.category]);
    s.name = name;
    ++per_category[s.category];
    s.path = "shapes/" + s.name + ".obj";
    s.spec = spec;
    b.shapes.push_back(std::move(s));
  }

  const auto target = static_cast<std::size_t>(std::llround(leave_out_fraction * static_cast<double>(num_shapes)));
  std::vector<std::uint32_t> order(num_shapes);
  for (std::uint32_t i = 0; i < num_shapes; ++i) order[i] = i;
  Rng hold_rng = make_rng(seed, 0x686f6c64ull);
  shuffle(order, hold_rng);
  std::map<std::string, std::size_t> remaining = per_category;
  std::size_t held = 0;
  for (std::uint32_t id : order) {
    if (held == target) break;
    auto& left = remaining[b.shapes[id].category];
    if (left < 2) continue;
    --left;
    b.shapes[id].held_out = true;
    ++held;
  }
  if (held < target) throw Error("empty_database", "leave-out fraction leaves a category without database shapes");

  // every held-out shape must share a part dimension with a database shape
  for (auto& s : b.shapes) {
    if (!s.held_out) continue;
    std::vector<std::uint32_t> same;
    bool shares = false;
    for (const auto& d : b.shapes) {
      if (d.held_out || d.category != s.category) continue;
      same.push_back(d.id);
      shares |= shared_part_count(s.spec->params, d.spec->params) > 0;
    }
    if (!shares) {
      const auto& donor = b.shapes[same[uniform_index(hold_rng, same.size())]];
      set_continuous_param(s.spec->params, 0, donor.spec->params.leg_height);
    }
  }

  Rng view_rng = make_rng(seed, 0x71756572ull);
  for (const auto& s : b.shapes) {
    for (std::size_t v = 0; v < views_per_query; ++v) {
      BenchmarkQuery q;
      q.id = static_cast<std::uint32_t>(b.queries.size());
      q.shape = s.id;
      q.view = random_rotation(view_rng);
      q.seed = derive_seed(seed, 0x71ull, q.id);
      q.leave_out = s.held_out;
      b.queries.push_back(q);
    }
  }
  return b;
}

inline nlohmann::json benchmark_to_json(const Benchmark& b) {
  auto entry = [](const BenchmarkShape& s) {
    nlohmann::json e = {{"id", s.id}, {"name", s.name}, {"category", s.category}, {"path", s.path}};
    if (s.spec) e["params"] = params_to_json(s.spec->params);
    return e;
  };
  nlohmann::json db = nlohmann::json::array(), held = nlohmann::json::array(), queries = nlohmann::json::array();
  for (const auto& s : b.shapes) (s.held_out ? held : db).push_back(entry(s));
  for (const auto& q : b.queries) {
    queries.push_back({{"id", q.id},
                       {"shape", q.shape},
                       {"view_quat", rotation_to_json(q.view)},
                       {"seed", q.seed},
                       {"leave_out", q.leave_out}});
  }
  return {{"seed", b.seed},       {"leave_out_fraction", b.leave_out_fraction},
          {"database", db},       {"held_out", held},
          {"queries", queries}};
}

inline Benchmark benchmark_from_json(const nlohmann::json& j) {
  try {
    Benchmark b;
    b.seed = j.value("seed", std::uint64_t{0});
    b.leave_out_fraction = j.value("leave_out_fraction", 0.0);
    std::vector<BenchmarkShape> shapes;
    auto read_entries = [&](const nlohmann::json& arr, bool held_out) {
      for (const auto& e : arr) {
        BenchmarkShape s;
        s.id = e.at("id").get<std::uint32_t>();
        s.name = e.value("name", "shape_" + std::to_string(s.id));
        s.category = e.at("category").get<std::string>();
        s.path = e.at("path").get<std::string>();
        if (e.contains("params")) {
          s.spec = SynthSpec{category_from_string(s.category), params_from_json(e.at("params")), 0};
        }
        s.held_out = held_out;
        shapes.push_back(std::move(s));
      }
    };
    read_entries(j.at("database"), false);
    if (j.contains("held_out")) read_entries(j.at("held_out"), true);
    std::sort(shapes.begin(), shapes.end(), [](const auto& a, const auto& c) { return a.id < c.id; });
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (shapes[i].id != i) throw Error("bad_manifest", "shape ids must be 0..N-1 without gaps");
    }
    b.shapes = std::move(shapes);
    if (j.contains("queries")) {
      for (const auto& e : j.at("queries")) {
        BenchmarkQuery q;
        q.id = e.value("id", static_cast<std::uint32_t>(b.queries.size()));
        q.shape = e.at("shape").get<std::uint32_t>();
        if (q.shape >= b.shapes.size()) throw Error("bad_manifest", "query references unknown shape");
        q.view = rotation_from_json(e.at("view_quat"));
        q.seed = e.value("seed", std::uint64_t{0});
        q.leave_out = e.value("leave_out", b.shapes[q.shape].held_out);
        b.queries.push_back(q);
      }
    }
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_manifest", std::string("malformed benchmark manifest: ") + e.what());
  }
}

}  // namespace patchcad
