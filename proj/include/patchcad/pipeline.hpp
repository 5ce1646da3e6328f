#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "patchcad/config.hpp"
#include "patchcad/descriptor.hpp"
#include "patchcad/embed.hpp"
#include "patchcad/eval.hpp"
#include "patchcad/index.hpp"
#include "patchcad/model_io.hpp"
#include "patchcad/pose.hpp"
#include "patchcad/render.hpp"
#include "patchcad/synth.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

// A benchmark manifest with its meshes loaded, indexed by shape id.
struct Dataset {
  Benchmark bench;
  std::vector<TriMesh> meshes;

  std::vector<ShapeEntry> database_entries() const {
    std::vector<ShapeEntry> out;
    for (const auto& s : bench.shapes) {
      if (!s.held_out) out.push_back({s.id, s.name, s.category, s.path});
    }
    return out;
  }

  std::vector<TriMesh> database_meshes() const {
    std::vector<TriMesh> out;
    for (const auto& s : bench.shapes) {
      if (!s.held_out) out.push_back(meshes[s.id]);
    }
    return out;
  }
};

inline Dataset materialize(Benchmark bench) {
  Dataset d;
  for (const auto& s : bench.shapes) {
    if (!s.spec) throw Error("bad_manifest", "shape " + s.name + " has no generator parameters");
    d.meshes.push_back(generate_shape(*s.spec));
  }
  d.bench = std::move(bench);
  return d;
}

inline void write_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  for (const auto& s : d.bench.shapes) {
    const fs::path p = fs::path(dir) / s.path;
    fs::create_directories(p.parent_path());
    save_obj(d.meshes[s.id], p.string());
  }
  std::ofstream out(fs::path(dir) / "benchmark.json");
  if (!out) throw Error("io_error", "cannot write benchmark manifest in " + dir);
  out << benchmark_to_json(d.bench).dump(2) << "\n";
}

// Reads DIR/benchmark.json and every referenced OBJ (normalized on load).
inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::path(dir) / "benchmark.json";
  std::ifstream in(manifest);
  if (!in) throw Error("io_error", "cannot open " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("bad_manifest", std::string("benchmark manifest is not JSON: ") + e.what());
  }
  Dataset d;
  d.bench = benchmark_from_json(j);
  for (const auto& s : d.bench.shapes) {
    TriMesh m = normalize_mesh(load_obj((fs::path(dir) / s.path).string()));
    m.category = s.category;
    d.meshes.push_back(std::move(m));
  }
  return d;
}

inline ViewSet views_for(const Config& cfg) {
  return canonical_views(cfg.num_views, cfg.view_candidates, cfg.seed, cfg.kmedoids_max_iters);
}

// ---------------------------------------------------------------------------
// Observations

// What a query "photograph" looks like at desk scale: the shaded render of the
// shape plus its ground-truth normals (only used to label training patches).
struct Observation {
  NormalMap normals;
  ShadedRender image;
  ViewProjection projection;
};

inline Observation observe(const TriMesh& mesh, const Rotation& view, const Config& cfg, std::uint64_t seed) {
  Observation o;
  o.projection = make_projection(mesh, view, cfg.render_resolution);
  o.normals = rasterize(mesh, view, cfg.render_resolution);
  o.image = shade(o.normals, view, Vec3(cfg.light_dir[0], cfg.light_dir[1], cfg.light_dir[2]), cfg.noise_sigma, seed);
  return o;
}

// ---------------------------------------------------------------------------
// Training corpus

struct CandidatePatch {
  std::uint32_t shape_id = 0;
  std::uint32_t view_id = 0;
  PatchRect rect;
  PatchDescriptor descriptor;
};

struct AnchorInfo {
  std::uint32_t shape_id = 0;
  PatchRect rect;
  PatchDescriptor descriptor;
};

struct CorpusBuild {
  PatchCorpus corpus;
  std::vector<CandidatePatch> candidates;
  std::vector<AnchorInfo> anchors;
};

inline std::vector<Rotation> training_views(std::uint32_t shape_id, std::size_t count, std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x747261696eull, shape_id);
  std::vector<Rotation> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(random_rotation(rng));
  return out;
}

// Candidates are the database patches (same seeds as build_index). Anchors are
// image-domain patches of the database shapes seen from random training views,
// labeled against every same-category candidate with the descriptor oracle;
// negative pools above negatives_pool are subsampled with a seeded draw.
inline CorpusBuild build_training_corpus(const Dataset& data, const ViewSet& views, const Config& cfg) {
  CorpusBuild b;
  std::vector<std::vector<double>> cand_features;
  for (const auto& s : data.bench.shapes) {
    if (s.held_out) continue;
    for (std::uint32_t v = 0; v < views.size(); ++v) {
      NormalMap nmap;
      try {
        nmap = rasterize(data.meshes[s.id], views[v], cfg.render_resolution);
      } catch (const Error& e) {
        if (e.code() == "empty_projection") continue;
        throw;
      }
      const auto rects = sample_patches(nmap, cfg.patch_fraction, cfg.patches_per_view,
                                        database_patch_seed(cfg.seed, s.id, v), cfg.min_coverage,
                                        PatchSource{s.id, v, Domain::shape});
      for (const auto& rect : rects) {
        if (rect.empty) continue;
        PatchDescriptor d =
            self_similarity_histogram(nmap, rect, cfg.hist_bins, cfg.descriptor_max_samples, cfg.min_coverage);
        if (d.empty) continue;
        b.candidates.push_back({s.id, v, rect, std::move(d)});
        cand_features.push_back(shape_patch_features(nmap, rect, cfg.patch_resample));
      }
    }
  }
  if (b.candidates.empty()) throw Error("empty_corpus", "no non-empty database patches");

  std::vector<std::vector<double>> anchor_features;
  for (const auto& s : data.bench.shapes) {
    if (s.held_out) continue;
    const auto rotations = training_views(s.id, cfg.train_views_per_shape, cfg.seed);
    for (std::uint32_t t = 0; t < rotations.size(); ++t) {
      const std::uint64_t obs_seed = derive_seed(cfg.seed, 0x616e63ull, s.id, t);
      Observation o;
      try {
        o = observe(data.meshes[s.id], rotations[t], cfg, obs_seed);
      } catch (const Error& e) {
        if (e.code() == "empty_projection") continue;
        throw;
      }
      const auto rects = sample_patches(o.image, cfg.patch_fraction, cfg.anchors_per_view, obs_seed, cfg.min_coverage,
                                        PatchSource{s.id, t, Domain::image});
      for (const auto& rect : rects) {
        if (rect.empty) continue;
        PatchDescriptor d =
            self_similarity_histogram(o.normals, rect, cfg.hist_bins, cfg.descriptor_max_samples, cfg.min_coverage);
        if (d.empty) continue;
        AnchorPairs pairs;
        pairs.anchor = static_cast<std::uint32_t>(anchor_features.size());
        for (std::uint32_t c = 0; c < b.candidates.size(); ++c) {
          const auto& cand = b.candidates[c];
          if (data.bench.shapes[cand.shape_id].category != s.category) continue;
          const bool gt = cand.shape_id == s.id;
          switch (label_match(d, cand.descriptor, gt, cfg.theta_p, cfg.theta_n)) {
            case MatchLabel::positive: pairs.positives.push_back(c); break;
            case MatchLabel::negative: pairs.negatives.push_back(c); break;
            case MatchLabel::excluded: break;
          }
        }
        if (pairs.negatives.size() > cfg.negatives_pool) {
          Rng rng = make_rng(obs_seed, 0x706f6f6cull, pairs.anchor);
          shuffle(pairs.negatives, rng);
          pairs.negatives.resize(cfg.negatives_pool);
          std::sort(pairs.negatives.begin(), pairs.negatives.end());
        }
        b.corpus.anchors.push_back(std::move(pairs));
        b.anchors.push_back({s.id, rect, std::move(d)});
        anchor_features.push_back(image_patch_features(o.image, rect, cfg.patch_resample));
      }
    }
  }

  auto to_matrix = [](const std::vector<std::vector<double>>& cols) {
    MatrixXd m(static_cast<Eigen::Index>(cols.empty() ? 0 : cols.front().size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i) {
      m.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const VectorXd>(cols[i].data(), static_cast<Eigen::Index>(cols[i].size()));
    }
    return m;
  };
  b.corpus.anchor_features = to_matrix(anchor_features);
  b.corpus.candidate_features = to_matrix(cand_features);
  return b;
}

// ---------------------------------------------------------------------------
// Retrieval evaluation

// Ground truth per shape: itself when in the database; for held-out shapes the
// same-category database shape with the highest mesh F-score (lowest id on
// ties).
inline std::vector<std::uint32_t> proxy_ground_truth(const Dataset& data, const Config& cfg) {
  std::vector<std::uint32_t> gt(data.bench.shapes.size());
  for (const auto& s : data.bench.shapes) {
    if (!s.held_out) {
      gt[s.id] = s.id;
      continue;
    }
    double best = -1.0;
    for (const auto& d : data.bench.shapes) {
      if (d.held_out || d.category != s.category) continue;
      const double f = mesh_fscore(data.meshes[d.id], data.meshes[s.id], cfg.fscore_threshold, cfg.fscore_samples,
                                   derive_seed(cfg.seed, 0x66ull));
      if (f > best) {
        best = f;
        gt[s.id] = d.id;
      }
    }
    if (best < 0.0) throw Error("empty_database", "no database shape shares the category of " + s.name);
  }
  return gt;
}

struct RetrievalEvalOptions {
  std::size_t kq = 9;
  std::size_t kr = 24;
  std::uint64_t seed = 0;
  bool category_conditioned = true;
  bool compute_fscore = false;
};

inline MetricsReport evaluate_retrieval(const Dataset& data, const PatchIndex& index, const TowerParams& model,
                                        const Config& cfg, const std::vector<std::uint32_t>& gt,
                                        const RetrievalEvalOptions& opt) {
  MetricsReport report;
  report.config_echo = config_to_json(cfg);
  for (const auto& q : data.bench.queries) {
    const auto& shape = data.bench.shapes[q.shape];
    const Observation o = observe(data.meshes[q.shape], q.view, cfg, q.seed);
    // a query whose patches all miss its mask retrieves nothing and counts as a miss
    RetrievalResult result;
    try {
      result =
          retrieve_shape(index, o.image, o.image.mask, model, opt.kq, opt.kr, derive_seed(opt.seed, 0x7271ull, q.id),
                         opt.category_conditioned ? std::optional<std::string>(shape.category) : std::nullopt);
    } catch (const Error& e) {
      if (e.code() != "no_retrieval") throw;
    }
    QueryRow row;
    row.query_id = q.id;
    row.gt_shape = gt[q.shape];
    for (std::size_t i = 0; i < result.ranking.size() && i < kMaxRecallK; ++i) {
      row.ranked.push_back(result.ranking[i].shape_id);
    }
    row.gt_rank = rank_of(result, row.gt_shape);
    if (opt.compute_fscore && !result.ranking.empty()) {
      row.fscore = mesh_fscore(data.meshes[result.ranking.front().shape_id], data.meshes[q.shape],
                               cfg.fscore_threshold, cfg.fscore_samples, derive_seed(cfg.seed, 0x66ull));
    }
    report.rows.push_back(std::move(row));
  }
  report.finalize();
  return report;
}

// Trains the towers on the database shapes and indexes them.
struct RetrievalSystem {
  ViewSet views;
  TrainResult training;
  PatchIndex index;
};

inline RetrievalSystem build_retrieval_system(const Dataset& data, const Config& cfg) {
  RetrievalSystem sys;
  sys.views = views_for(cfg);
  const CorpusBuild corpus = build_training_corpus(data, sys.views, cfg);
  sys.training = train(corpus.corpus, EmbedConfig::from(cfg));
  sys.index = build_index(data.database_entries(), data.database_meshes(), sys.views, sys.training.params,
                          cfg.patches_per_view, cfg);
  return sys;
}

// ---------------------------------------------------------------------------
// Pose

struct PoseSamples {
  MatrixXd features;
  std::vector<Rotation> rotations;
  std::vector<std::array<double, 2>> translations;
};

// Box-relative offset of the projected object origin from the mask's bounding
// box center.
inline std::array<double, 2> box_relative_offset(const Observation& o) {
  std::uint32_t x0 = o.image.width, y0 = o.image.height, x1 = 0, y1 = 0;
  for (std::uint32_t y = 0; y < o.image.height; ++y) {
    for (std::uint32_t x = 0; x < o.image.width; ++x) {
      if (!o.image.covered(x, y)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x + 1);
      y1 = std::max(y1, y + 1);
    }
  }
  if (x1 <= x0 || y1 <= y0) return {0.0, 0.0};
  const Vec3 origin = o.projection.project(Vec3::Zero());
  return {(origin.x() - 0.5 * (x0 + x1)) / (x1 - x0), (origin.y() - 0.5 * (y0 + y1)) / (y1 - y0)};
}

// Whole-object features: the full shaded render average-pooled to P x P.
inline std::vector<double> object_features(const Observation& o, std::uint32_t p) {
  PatchRect full;
  full.w = o.image.width;
  full.h = o.image.height;
  return image_patch_features(o.image, full, p);
}

inline PoseSamples render_pose_samples(const Dataset& data, const std::vector<std::pair<std::uint32_t, Rotation>>& items,
                                       const Config& cfg, std::uint64_t seed) {
  PoseSamples s;
  const auto p = cfg.patch_resample;
  s.features.resize(static_cast<Eigen::Index>(p) * p, static_cast<Eigen::Index>(items.size()));
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Observation o = observe(data.meshes[items[i].first], items[i].second, cfg, derive_seed(seed, i));
    const auto f = object_features(o, p);
    s.features.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
    s.rotations.push_back(items[i].second);
    s.translations.push_back(box_relative_offset(o));
  }
  return s;
}

inline std::vector<PoseTarget> pose_targets(const PoseBins& bins, const PoseSamples& s) {
  std::vector<PoseTarget> t;
  for (std::size_t i = 0; i < s.rotations.size(); ++i) {
    const auto a = assign_rotation_bin(bins, s.rotations[i]);
    t.push_back({a.bin, a.residual, s.translations[i]});
  }
  return t;
}

inline std::vector<std::pair<std::uint32_t, Rotation>> pose_training_items(const Dataset& data, const Config& cfg) {
  std::vector<std::pair<std::uint32_t, Rotation>> items;
  for (const auto& s : data.bench.shapes) {
    if (s.held_out) continue;
    Rng rng = make_rng(cfg.seed, 0x706f7365ull, s.id);
    for (std::size_t i = 0; i < cfg.pose_views_per_shape; ++i) items.emplace_back(s.id, random_rotation(rng));
  }
  return items;
}

struct PoseTraining {
  PoseModel model;
  std::vector<double> history;
};

// Bins from K-medoids over the training rotations (stored at f32 precision,
// as in the model file); linear head trained with plain SGD.
inline PoseTraining train_pose_model(const Dataset& data, const Config& cfg) {
  const auto items = pose_training_items(data, cfg);
  const PoseSamples samples = render_pose_samples(data, items, cfg, derive_seed(cfg.seed, 0x7074ull));
  PoseTraining out;
  out.model.bins = make_pose_bins(samples.rotations, cfg.pose_bins, cfg.seed, cfg.kmedoids_max_iters);
  for (auto& m : out.model.bins.medoids) {
    m = {static_cast<float>(m.w), static_cast<float>(m.x), static_cast<float>(m.y), static_cast<float>(m.z)};
  }
  const auto targets = pose_targets(out.model.bins, samples);

  // Train on standardized features, then fold the affine map into the head so
  // prediction takes raw features.
  const Eigen::Index f = samples.features.rows();
  const VectorXd mean = samples.features.rowwise().mean();
  VectorXd inv_std(f);
  for (Eigen::Index r = 0; r < f; ++r) {
    const double var = (samples.features.row(r).array() - mean(r)).square().mean();
    inv_std(r) = var > 1e-12 ? 1.0 / std::sqrt(var) : 1.0;
  }
  const MatrixXd standardized = inv_std.asDiagonal() * (samples.features.colwise() - mean);
  PoseHeadParams head = PoseHeadParams::zeros(cfg.pose_bins, static_cast<std::size_t>(f));
  out.history = train_pose(head, standardized, targets,
                           {cfg.pose_learning_rate, cfg.pose_epochs, cfg.batch_size, cfg.huber_delta, cfg.seed});
  out.model.head.weight = head.weight * inv_std.asDiagonal();
  out.model.head.bias = head.bias - out.model.head.weight * mean;
  for (Eigen::Index i = 0; i < out.model.head.weight.size(); ++i) {
    out.model.head.weight.data()[i] = static_cast<float>(out.model.head.weight.data()[i]);
  }
  for (Eigen::Index i = 0; i < out.model.head.bias.size(); ++i) {
    out.model.head.bias(i) = static_cast<float>(out.model.head.bias(i));
  }
  return out;
}

struct PoseEvaluation {
  double bin_accuracy = 0.0;
  double median_error_deg = 0.0;
  double median_bin_radius_deg = 0.0;  // median distance of training rotations to their medoid
  std::vector<double> errors_deg;
};

inline PoseEvaluation evaluate_pose(const Dataset& data, const PoseModel& pose, const Config& cfg) {
  std::vector<std::pair<std::uint32_t, Rotation>> items;
  for (const auto& q : data.bench.queries) items.emplace_back(q.shape, q.view);
  const PoseSamples samples = render_pose_samples(data, items, cfg, derive_seed(cfg.seed, 0x7065ull));
  PoseEvaluation ev;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto col = samples.features.col(static_cast<Eigen::Index>(i));
    const PoseEstimate est = predict_pose(pose.head, pose.bins, std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    correct += est.bin == assign_rotation_bin(pose.bins, items[i].second).bin;
    ev.errors_deg.push_back(rotation_error(est.rotation, items[i].second));
  }
  ev.bin_accuracy = items.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(items.size());
  ev.median_error_deg = MetricsReport::median(ev.errors_deg);

  std::vector<double> radii;
  for (const auto& [shape, rot] : pose_training_items(data, cfg)) {
    const auto a = assign_rotation_bin(pose.bins, rot);
    radii.push_back(rotation_error(pose.bins.medoids[a.bin], rot));
  }
  ev.median_bin_radius_deg = MetricsReport::median(radii);
  return ev;
}

// ---------------------------------------------------------------------------
// Ablations

enum class AblationParam { patch_size, kq, kr };

inline AblationParam ablation_param_from_string(const std::string& s) {
  if (s == "patch-size") return AblationParam::patch_size;
  if (s == "kq") return AblationParam::kq;
  if (s == "kr") return AblationParam::kr;
  throw Error("invalid_argument", "unknown ablation parameter '" + s + "' (expected patch-size, kq or kr)");
}

struct AblationRow {
  double value = 0.0;
  std::vector<MetricsReport> runs;  // one per seed

  double mean_recall(std::size_t k) const {
    double sum = 0.0;
    for (const auto& r : runs) sum += r.recall[k - 1];
    return runs.empty() ? 0.0 : sum / static_cast<double>(runs.size());
  }
};

// Each seed replaces cfg.seed. Kq and Kr sweeps share one trained system per
// seed; a patch-size sweep retrains for every value.
inline std::vector<AblationRow> run_ablation(const Dataset& data, const Config& base, AblationParam param,
                                             const std::vector<double>& values, const std::vector<std::uint64_t>& seeds) {
  std::vector<AblationRow> rows(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) rows[i].value = values[i];
  for (std::uint64_t seed : seeds) {
    Config cfg = base;
    cfg.seed = seed;
    const auto gt = proxy_ground_truth(data, cfg);
    std::optional<RetrievalSystem> shared;
    if (param != AblationParam::patch_size) shared = build_retrieval_system(data, cfg);
    for (std::size_t i = 0; i < values.size(); ++i) {
      Config run = cfg;
      RetrievalEvalOptions opt{run.kq, run.kr, seed, true, false};
      if (param == AblationParam::patch_size) {
        run.patch_fraction = values[i];
        const auto problems = validate(run);
        if (!problems.empty()) throw Error("config_invalid", problems.front());
        const RetrievalSystem sys = build_retrieval_system(data, run);
        rows[i].runs.push_back(evaluate_retrieval(data, sys.index, sys.training.params, run, gt, opt));
        continue;
      }
      if (!(values[i] >= 1.0) || values[i] != std::floor(values[i])) {
        throw Error("invalid_argument", "Kq and Kr values must be positive integers");
      }
      (param == AblationParam::kq ? opt.kq : opt.kr) = static_cast<std::size_t>(values[i]);
      (param == AblationParam::kq ? run.kq : run.kr) = static_cast<std::uint32_t>(values[i]);
      rows[i].runs.push_back(evaluate_retrieval(data, shared->index, shared->training.params, run, gt, opt));
    }
  }
  return rows;
}

inline std::string ablation_csv(const std::string& param, const std::vector<AblationRow>& rows) {
  std::string out = param + ",runs,recall_at_1,recall_at_5,recall_at_10\n";
  for (const auto& r : rows) {
    out += format_double(r.value) + "," + std::to_string(r.runs.size()) + "," + format_double(r.mean_recall(1)) + "," +
           format_double(r.mean_recall(5)) + "," + format_double(r.mean_recall(10)) + "\n";
  }
  return out;
}

}  // namespace patchcad
