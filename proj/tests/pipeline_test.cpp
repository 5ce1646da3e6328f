#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "patchcad/pipeline.hpp"
#include "test_util.hpp"

using namespace patchcad;
using testutil::error_code;

namespace {

Config tiny_config() {
  Config c;
  c.render_resolution = 32;
  c.patch_resample = 4;
  c.hidden_dim = 8;
  c.embed_dim = 4;
  c.num_views = 4;
  c.view_candidates = 32;
  c.train_views_per_shape = 2;
  c.anchors_per_view = 3;
  c.epochs = 5;
  c.batch_size = 32;
  c.patches_per_view = 4;
  c.fscore_samples = 400;
  c.pose_views_per_shape = 6;
  c.pose_epochs = 10;
  c.pose_bins = 4;
  c.kq = 3;
  c.kr = 6;
  return c;
}

const Dataset& shared_dataset() {
  static const Dataset data = materialize(generate_benchmark(9, 0.4, 1, 11));
  return data;
}

}  // namespace

TEST(Dataset, WriteLoadRoundTrip) {
  const Dataset& data = shared_dataset();
  const std::string dir = testutil::temp_path("pipeline_dataset");
  std::filesystem::remove_all(dir);
  write_dataset(data, dir);
  const Dataset back = load_dataset(dir);
  ASSERT_EQ(back.meshes.size(), data.meshes.size());
  EXPECT_EQ(benchmark_to_json(back.bench).dump(), benchmark_to_json(data.bench).dump());
  for (std::size_t i = 0; i < data.meshes.size(); ++i) {
    ASSERT_EQ(back.meshes[i].vertices.size(), data.meshes[i].vertices.size());
    EXPECT_EQ(back.meshes[i].triangles, data.meshes[i].triangles);
    for (std::size_t v = 0; v < data.meshes[i].vertices.size(); ++v) {
      EXPECT_LT((back.meshes[i].vertices[v] - data.meshes[i].vertices[v]).norm(), 1e-6);
    }
    EXPECT_EQ(back.meshes[i].category, data.bench.shapes[i].category);
  }
  EXPECT_EQ(error_code([] { load_dataset("/nonexistent/dataset"); }), "io_error");
}

TEST(Dataset, DatabaseViewsExcludeHeldOutShapes) {
  const Dataset& data = shared_dataset();
  const auto entries = data.database_entries();
  EXPECT_EQ(entries.size(), data.bench.database_ids().size());
  EXPECT_EQ(data.database_meshes().size(), entries.size());
  for (const auto& e : entries) EXPECT_FALSE(data.bench.shapes[e.id].held_out);
}

TEST(Observe, ImageAndNormalsShareTheMask) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const Observation o = observe(data.meshes[0], random_rotations(1, 4)[0], cfg, 9);
  EXPECT_EQ(o.image.width, cfg.render_resolution);
  EXPECT_EQ(o.image.mask, o.normals.mask);
  const Observation again = observe(data.meshes[0], random_rotations(1, 4)[0], cfg, 9);
  EXPECT_EQ(again.image.intensity, o.image.intensity);
}

TEST(Observe, CenteredShapeHasNearZeroBoxOffset) {
  const Config cfg = tiny_config();
  const Observation o = observe(testutil::unit_cube(), Rotation::identity(), cfg, 0);
  const auto t = box_relative_offset(o);
  EXPECT_LT(std::abs(t[0]), 1.0 / cfg.render_resolution);
  EXPECT_LT(std::abs(t[1]), 1.0 / cfg.render_resolution);
}

TEST(TrainingCorpus, LabelsFollowTheDescriptorOracle) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const CorpusBuild b = build_training_corpus(data, views_for(cfg), cfg);
  ASSERT_FALSE(b.corpus.anchors.empty());
  EXPECT_EQ(static_cast<std::size_t>(b.corpus.anchor_features.cols()), b.anchors.size());
  EXPECT_EQ(static_cast<std::size_t>(b.corpus.candidate_features.cols()), b.candidates.size());
  EXPECT_EQ(b.corpus.anchor_features.rows(), 16);
  EXPECT_EQ(b.corpus.candidate_features.rows(), 48);
  for (std::size_t a = 0; a < b.corpus.anchors.size(); ++a) {
    const auto& pairs = b.corpus.anchors[a];
    const auto& anchor = b.anchors[a];
    EXPECT_EQ(pairs.anchor, a);
    for (auto c : pairs.positives) {
      EXPECT_EQ(b.candidates[c].shape_id, anchor.shape_id);
      EXPECT_GT(histogram_iou(anchor.descriptor, b.candidates[c].descriptor), cfg.theta_p);
    }
    for (auto c : pairs.negatives) {
      const auto& cand = b.candidates[c];
      EXPECT_NE(cand.shape_id, anchor.shape_id);
      EXPECT_EQ(data.bench.shapes[cand.shape_id].category, data.bench.shapes[anchor.shape_id].category);
      EXPECT_LT(histogram_iou(anchor.descriptor, cand.descriptor), cfg.theta_n);
    }
    EXPECT_LE(pairs.negatives.size(), cfg.negatives_pool);
  }
  for (const auto& c : b.candidates) EXPECT_FALSE(data.bench.shapes[c.shape_id].held_out);
}

TEST(TrainingCorpus, NegativePoolIsCapped) {
  Config cfg = tiny_config();
  cfg.negatives_pool = 2;
  cfg.negatives_keep = 1;
  const CorpusBuild b = build_training_corpus(shared_dataset(), views_for(cfg), cfg);
  for (const auto& p : b.corpus.anchors) {
    EXPECT_LE(p.negatives.size(), 2u);
    EXPECT_TRUE(std::is_sorted(p.negatives.begin(), p.negatives.end()));
  }
}

TEST(ProxyGroundTruth, DatabaseShapesMapToThemselves) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const auto gt = proxy_ground_truth(data, cfg);
  for (const auto& s : data.bench.shapes) {
    if (!s.held_out) {
      EXPECT_EQ(gt[s.id], s.id);
      continue;
    }
    const auto& pick = data.bench.shapes[gt[s.id]];
    EXPECT_FALSE(pick.held_out);
    EXPECT_EQ(pick.category, s.category);
    const std::uint64_t seed = derive_seed(cfg.seed, 0x66ull);
    const double chosen = mesh_fscore(data.meshes[pick.id], data.meshes[s.id], cfg.fscore_threshold,
                                      cfg.fscore_samples, seed);
    for (const auto& d : data.bench.shapes) {
      if (d.held_out || d.category != s.category) continue;
      const double f = mesh_fscore(data.meshes[d.id], data.meshes[s.id], cfg.fscore_threshold, cfg.fscore_samples, seed);
      EXPECT_TRUE(f < chosen || (f == chosen && d.id >= pick.id)) << "shape " << s.id << " candidate " << d.id;
    }
  }
}

TEST(EndToEnd, RetrievalReportIsWellFormed) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const RetrievalSystem sys = build_retrieval_system(data, cfg);
  const auto gt = proxy_ground_truth(data, cfg);
  RetrievalEvalOptions opt{cfg.kq, cfg.kr, 0, true, true};
  const MetricsReport r = evaluate_retrieval(data, sys.index, sys.training.params, cfg, gt, opt);
  ASSERT_EQ(r.rows.size(), data.bench.queries.size());
  EXPECT_TRUE(r.recall_monotone());
  std::set<std::uint32_t> db;
  for (auto id : data.bench.database_ids()) db.insert(id);
  for (const auto& row : r.rows) {
    EXPECT_TRUE(db.count(row.gt_shape));
    for (auto id : row.ranked) {
      EXPECT_TRUE(db.count(id));
      EXPECT_EQ(data.bench.shapes[id].category, data.bench.shapes[row.gt_shape].category);
    }
    EXPECT_GE(row.fscore, 0.0);
    EXPECT_LE(row.fscore, 1.0);
  }
  EXPECT_GE(r.mean_fscore, 0.0);
  const MetricsReport again = evaluate_retrieval(data, sys.index, sys.training.params, cfg, gt, opt);
  EXPECT_EQ(report_rows_csv(again), report_rows_csv(r));

  // single-patch queries can miss the mask entirely; those rows are misses, not errors
  const MetricsReport single =
      evaluate_retrieval(data, sys.index, sys.training.params, cfg, gt, {1, 1, 0, true, false});
  ASSERT_EQ(single.rows.size(), data.bench.queries.size());
  for (const auto& row : single.rows) {
    if (row.ranked.empty()) EXPECT_EQ(row.gt_rank, 0u);
  }
}

TEST(Pose, TrainingItemsCoverDatabaseShapes) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const auto items = pose_training_items(data, cfg);
  EXPECT_EQ(items.size(), data.bench.database_ids().size() * cfg.pose_views_per_shape);
  for (const auto& [shape, rot] : items) EXPECT_FALSE(data.bench.shapes[shape].held_out);
  const auto again = pose_training_items(data, cfg);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(items[i].second, again[i].second);
}

TEST(Pose, TrainedModelEvaluates) {
  const Config cfg = tiny_config();
  const Dataset& data = shared_dataset();
  const PoseTraining t = train_pose_model(data, cfg);
  EXPECT_EQ(t.model.bins.size(), cfg.pose_bins);
  EXPECT_EQ(t.history.size(), cfg.pose_epochs);
  const PoseEvaluation ev = evaluate_pose(data, t.model, cfg);
  EXPECT_EQ(ev.errors_deg.size(), data.bench.queries.size());
  EXPECT_GE(ev.bin_accuracy, 0.0);
  EXPECT_LE(ev.bin_accuracy, 1.0);
  for (double e : ev.errors_deg) {
    EXPECT_GE(e, 0.0);
    EXPECT_LE(e, 180.0 + 1e-9);
  }
}

TEST(Ablation, ParameterNamesAndCsv) {
  EXPECT_EQ(ablation_param_from_string("patch-size"), AblationParam::patch_size);
  EXPECT_EQ(ablation_param_from_string("kq"), AblationParam::kq);
  EXPECT_EQ(ablation_param_from_string("kr"), AblationParam::kr);
  EXPECT_EQ(error_code([] { ablation_param_from_string("k"); }), "invalid_argument");
  AblationRow row;
  row.value = 3;
  row.runs.resize(2);
  row.runs[0].recall.fill(0.5);
  row.runs[1].recall.fill(1.0);
  EXPECT_EQ(ablation_csv("kq", {row}), "kq,runs,recall_at_1,recall_at_5,recall_at_10\n3,2,0.75,0.75,0.75\n");
}
