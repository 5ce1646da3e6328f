#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchcad/binary_io.hpp"
#include "patchcad/config.hpp"
#include "patchcad/descriptor.hpp"
#include "patchcad/embed.hpp"
#include "patchcad/error.hpp"
#include "patchcad/mesh.hpp"
#include "patchcad/render.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

struct ShapeEntry {
  std::uint32_t id = 0;
  std::string name;
  std::string category;
  std::string path;

  bool operator==(const ShapeEntry&) const = default;
};

struct PatchRecord {
  std::uint32_t shape_id = 0;
  std::uint32_t view_id = 0;
  PatchRect rect;
  std::vector<float> embedding;  // unit norm
};

struct Neighbor {
  std::uint32_t record = 0;
  double similarity = 0.0;
};

// Immutable patch database over canonical-view renders of a shape manifest.
class PatchIndex {
 public:
  PatchIndex() = default;
  PatchIndex(std::vector<ShapeEntry> shapes, ViewSet views, std::vector<PatchRecord> records, Config config)
      : shapes_(std::move(shapes)), views_(std::move(views)), records_(std::move(records)), config_(config) {
    for (const auto& r : records_) {
      if (!find_shape(r.shape_id)) {
        throw Error("bad_index", "record references shape id " + std::to_string(r.shape_id) + " missing from manifest");
      }
    }
    embed_dim_ = records_.empty() ? 0 : records_.front().embedding.size();
    for (const auto& r : records_) {
      if (r.embedding.size() != embed_dim_) throw Error("bad_index", "records disagree on embedding size");
    }
  }

  const std::vector<ShapeEntry>& shapes() const { return shapes_; }
  const ViewSet& views() const { return views_; }
  const std::vector<PatchRecord>& records() const { return records_; }
  const Config& config() const { return config_; }
  std::size_t size() const { return records_.size(); }
  std::size_t embed_dim() const { return embed_dim_; }

  const ShapeEntry* find_shape(std::uint32_t id) const {
    auto it = std::find_if(shapes_.begin(), shapes_.end(), [&](const ShapeEntry& s) { return s.id == id; });
    return it == shapes_.end() ? nullptr : &*it;
  }

  // Exact top-k by cosine similarity (ties to the lower record id). With a
  // category, only that category's records are searched.
  std::vector<Neighbor> knn_query(std::span<const double> query, std::size_t k,
                                  const std::optional<std::string>& category = std::nullopt) const {
    if (records_.empty()) throw Error("empty_index", "patch index has no records");
    if (k < 1) throw Error("invalid_argument", "k must be >= 1");
    if (query.size() != embed_dim_) throw Error("dimension_mismatch", "query embedding size mismatch");
    double qn = 0.0;
    for (double v : query) qn += v * v;
    qn = std::sqrt(qn);
    std::vector<Neighbor> all;
    all.reserve(records_.size());
    for (std::uint32_t i = 0; i < records_.size(); ++i) {
      const auto& r = records_[i];
      if (category && find_shape(r.shape_id)->category != *category) continue;
      double dot = 0.0, rn = 0.0;
      for (std::size_t d = 0; d < embed_dim_; ++d) {
        dot += query[d] * r.embedding[d];
        rn += static_cast<double>(r.embedding[d]) * r.embedding[d];
      }
      const double denom = qn * std::sqrt(rn);
      all.push_back({i, denom > 0.0 ? dot / denom : 0.0});
    }
    const std::size_t n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [](const Neighbor& a, const Neighbor& b) {
                        return a.similarity != b.similarity ? a.similarity > b.similarity : a.record < b.record;
                      });
    all.resize(n);
    return all;
  }

 private:
  std::vector<ShapeEntry> shapes_;
  ViewSet views_;
  std::vector<PatchRecord> records_;
  Config config_;
  std::size_t embed_dim_ = 0;
};

inline std::vector<Neighbor> knn_query(const PatchIndex& index, std::span<const double> query, std::size_t k) {
  return index.knn_query(query, k);
}

// Seed for the patches of (shape, view) in the database.
inline std::uint64_t database_patch_seed(std::uint64_t seed, std::uint32_t shape_id, std::uint32_t view_id) {
  return derive_seed(seed, 0x6462ull, shape_id, view_id);
}

// Rasterizes every shape at every view, samples patches, drops empty ones and
// embeds the rest with the shape tower.
inline PatchIndex build_index(const std::vector<ShapeEntry>& shapes, const std::vector<TriMesh>& meshes,
                              const ViewSet& views, const TowerParams& model, std::size_t patches_per_view,
                              const Config& cfg) {
  if (shapes.size() != meshes.size()) throw Error("invalid_argument", "manifest and meshes differ in count");
  std::vector<PatchRecord> records;
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    for (std::uint32_t v = 0; v < views.size(); ++v) {
      NormalMap nmap;
      try {
        nmap = rasterize(meshes[s], views[v], cfg.render_resolution);
      } catch (const Error& e) {
        if (e.code() == "empty_projection") continue;
        throw;
      }
      const auto rects = sample_patches(nmap, cfg.patch_fraction, patches_per_view,
                                        database_patch_seed(cfg.seed, shapes[s].id, v), cfg.min_coverage,
                                        PatchSource{shapes[s].id, v, Domain::shape});
      for (const auto& rect : rects) {
        if (rect.empty) continue;
        const auto features = shape_patch_features(nmap, rect, cfg.patch_resample);
        const EmbeddingVector e = embed_forward(model, TowerKind::shape, features);
        PatchRecord r{shapes[s].id, v, rect, std::vector<float>(static_cast<std::size_t>(e.size()))};
        for (Eigen::Index d = 0; d < e.size(); ++d) r.embedding[static_cast<std::size_t>(d)] = static_cast<float>(e(d));
        records.push_back(std::move(r));
      }
    }
  }
  if (records.empty()) throw Error("empty_index", "no non-empty patches to index");
  return PatchIndex(shapes, views, std::move(records), cfg);
}

// ---------------------------------------------------------------------------
// Retrieval

struct RankedShape {
  std::uint32_t shape_id = 0;
  std::size_t votes = 0;
  double aggregate_similarity = 0.0;
};

struct PatchVote {
  PatchRect rect;
  bool excluded = false;  // no overlap with the instance mask
  std::uint32_t winner = 0;
  double best_similarity = 0.0;
  std::vector<Neighbor> neighbors;
};

struct RetrievalResult {
  std::vector<RankedShape> ranking;
  std::vector<PatchVote> patches;

  std::size_t voting_patches() const {
    return static_cast<std::size_t>(std::count_if(patches.begin(), patches.end(), [](const auto& p) { return !p.excluded; }));
  }
};

namespace detail {

struct Tally {
  std::size_t votes = 0;
  double similarity = 0.0;
  double best = -2.0;
};

inline bool ranks_before(std::uint32_t a_id, const Tally& a, std::uint32_t b_id, const Tally& b) {
  if (a.votes != b.votes) return a.votes > b.votes;
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a_id < b_id;
}

}  // namespace detail

// Per-patch election: the modal shape among the patch's neighbors, ties broken
// by higher summed similarity, then lower shape id.
inline void elect_patch_winner(const PatchIndex& index, PatchVote& pv) {
  std::map<std::uint32_t, detail::Tally> tally;
  for (const auto& n : pv.neighbors) {
    auto& t = tally[index.records()[n.record].shape_id];
    ++t.votes;
    t.similarity += n.similarity;
    t.best = std::max(t.best, n.similarity);
  }
  if (tally.empty()) throw Error("invalid_argument", "patch has no neighbors");
  auto win = tally.begin();
  for (auto it = tally.begin(); it != tally.end(); ++it) {
    if (detail::ranks_before(it->first, it->second, win->first, win->second)) win = it;
  }
  pv.winner = win->first;
  pv.best_similarity = win->second.best;
}

// Object-level ranking from elected patches. Winners are ordered by votes,
// then by the sum of their winning patches' best-match similarities, then by
// id. Shapes that appeared among neighbors but won no patch follow, keyed by
// the sum of their per-patch best matches.
inline std::vector<RankedShape> rank_patch_votes(const PatchIndex& index, std::span<const PatchVote> patches) {
  std::map<std::uint32_t, detail::Tally> final_tally;
  std::map<std::uint32_t, double> evidence;
  for (const auto& pv : patches) {
    if (pv.excluded) continue;
    auto& ft = final_tally[pv.winner];
    ++ft.votes;
    ft.similarity += pv.best_similarity;
    std::map<std::uint32_t, double> best;
    for (const auto& n : pv.neighbors) {
      const std::uint32_t shape = index.records()[n.record].shape_id;
      auto [it, inserted] = best.try_emplace(shape, n.similarity);
      if (!inserted) it->second = std::max(it->second, n.similarity);
    }
    for (const auto& [shape, b] : best) {
      if (shape != pv.winner) evidence[shape] += b;
    }
  }
  std::vector<RankedShape> ranking, rest;
  for (const auto& [shape, t] : final_tally) ranking.push_back({shape, t.votes, t.similarity});
  for (const auto& [shape, sim] : evidence) {
    if (!final_tally.contains(shape)) rest.push_back({shape, 0, sim});
  }
  auto order = [](const RankedShape& a, const RankedShape& b) {
    return detail::ranks_before(a.shape_id, {a.votes, a.aggregate_similarity, 0.0}, b.shape_id,
                                {b.votes, b.aggregate_similarity, 0.0});
  };
  std::sort(ranking.begin(), ranking.end(), order);
  std::sort(rest.begin(), rest.end(), order);
  ranking.insert(ranking.end(), rest.begin(), rest.end());
  return ranking;
}

// Two-stage majority vote over Kq query patches with Kr neighbors each.
// Patches with no instance-mask overlap are kept in the result but excluded
// from voting.
inline RetrievalResult retrieve_shape(const PatchIndex& index, const ShadedRender& query,
                                      std::span<const std::uint8_t> instance_mask, const TowerParams& model,
                                      std::size_t kq, std::size_t kr, std::uint64_t seed,
                                      const std::optional<std::string>& category = std::nullopt) {
  if (kq < 1 || kr < 1) throw Error("invalid_argument", "Kq and Kr must be >= 1");
  if (index.size() == 0) throw Error("empty_index", "patch index has no records");
  if (instance_mask.size() != query.mask.size()) throw Error("invalid_argument", "instance mask size mismatch");
  const Config& cfg = index.config();
  const auto rects = sample_patches(query, cfg.patch_fraction, kq, seed, cfg.min_coverage,
                                    PatchSource{0, 0, Domain::image});
  RetrievalResult result;
  for (const auto& rect : rects) {
    PatchVote pv;
    pv.rect = rect;
    if (masked_count(instance_mask, query.width, rect) == 0) {
      pv.excluded = true;
      result.patches.push_back(std::move(pv));
      continue;
    }
    const auto features = image_patch_features(query, rect, cfg.patch_resample, instance_mask);
    const EmbeddingVector e = embed_forward(model, TowerKind::image, features);
    pv.neighbors = index.knn_query(std::span<const double>(e.data(), static_cast<std::size_t>(e.size())), kr, category);
    if (pv.neighbors.empty()) throw Error("no_retrieval", "no records in category " + category.value_or(""));
    elect_patch_winner(index, pv);
    result.patches.push_back(std::move(pv));
  }
  if (result.voting_patches() == 0) throw Error("no_retrieval", "every query patch lies outside the instance mask");
  result.ranking = rank_patch_votes(index, result.patches);
  return result;
}

inline nlohmann::json retrieval_to_json(const RetrievalResult& r, const PatchIndex& index) {
  nlohmann::json ranking = nlohmann::json::array();
  for (const auto& s : r.ranking) {
    const auto* entry = index.find_shape(s.shape_id);
    ranking.push_back({{"shape_id", s.shape_id},
                       {"name", entry ? entry->name : ""},
                       {"votes", s.votes},
                       {"aggregate_similarity", s.aggregate_similarity}});
  }
  nlohmann::json patches = nlohmann::json::array();
  for (const auto& p : r.patches) {
    nlohmann::json j = {{"rect", {p.rect.x, p.rect.y, p.rect.w, p.rect.h}}, {"excluded", p.excluded}};
    if (!p.excluded) {
      j["winner"] = p.winner;
      j["best_similarity"] = p.best_similarity;
    }
    patches.push_back(std::move(j));
  }
  return {{"ranking", ranking}, {"patches", patches}};
}

// ---------------------------------------------------------------------------
// P2CI file
//   "P2CI" u32 version u32 record_count u32 embed_dim
//   u32 manifest length + UTF-8 JSON {"shapes", "views", "config"}
//   per record: u32 shape_id u32 view_id u32 x u32 y u32 w u32 h, embed_dim f32

inline constexpr std::uint32_t kIndexVersion = 1;

inline nlohmann::json index_manifest(const PatchIndex& index) {
  nlohmann::json shapes = nlohmann::json::array();
  for (const auto& s : index.shapes()) {
    shapes.push_back({{"id", s.id}, {"name", s.name}, {"category", s.category}, {"path", s.path}});
  }
  return {{"shapes", shapes}, {"views", viewset_to_json(index.views())}, {"config", config_to_json(index.config())}};
}

inline void write_index(std::ostream& os, const PatchIndex& index) {
  io::write_magic(os, "P2CI");
  io::write_u32(os, kIndexVersion);
  io::write_u32(os, static_cast<std::uint32_t>(index.size()));
  io::write_u32(os, static_cast<std::uint32_t>(index.embed_dim()));
  io::write_blob(os, index_manifest(index).dump());
  for (const auto& r : index.records()) {
    for (std::uint32_t v : {r.shape_id, r.view_id, r.rect.x, r.rect.y, r.rect.w, r.rect.h}) io::write_u32(os, v);
    for (float f : r.embedding) io::write_f32(os, f);
  }
}

inline PatchIndex read_index(std::istream& is) {
  io::expect_magic(is, "P2CI");
  const std::uint32_t version = io::read_u32(is);
  if (version != kIndexVersion) throw Error("bad_version", "unsupported index version " + std::to_string(version));
  const std::uint32_t count = io::read_u32(is);
  const std::uint32_t dim = io::read_u32(is);
  if (dim == 0 || dim > 4096) throw Error("bad_index", "implausible embedding size");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_blob(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("bad_index", std::string("index manifest is not JSON: ") + e.what());
  }
  std::vector<ShapeEntry> shapes;
  Config cfg;
  ViewSet views;
  try {
    for (const auto& s : manifest.at("shapes")) {
      shapes.push_back({s.at("id").get<std::uint32_t>(), s.at("name").get<std::string>(),
                        s.at("category").get<std::string>(), s.at("path").get<std::string>()});
    }
    cfg = config_from_json(manifest.at("config"));
    views = viewset_from_json(manifest.at("views"));
  } catch (const nlohmann::json::exception& e) {
    throw Error("bad_index", std::string("malformed index manifest: ") + e.what());
  }
  std::vector<PatchRecord> records(count);
  for (auto& r : records) {
    r.shape_id = io::read_u32(is);
    r.view_id = io::read_u32(is);
    r.rect.x = io::read_u32(is);
    r.rect.y = io::read_u32(is);
    r.rect.w = io::read_u32(is);
    r.rect.h = io::read_u32(is);
    r.rect.source = {r.shape_id, r.view_id, Domain::shape};
    r.rect.empty = false;
    r.embedding.resize(dim);
    for (float& f : r.embedding) f = io::read_f32(is);
  }
  return PatchIndex(std::move(shapes), std::move(views), std::move(records), cfg);
}

inline void save_index(const PatchIndex& index, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write index " + path);
  write_index(out, index);
}

inline PatchIndex load_index(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("io_error", "cannot open index " + path);
  return read_index(in);
}

}  // namespace patchcad
