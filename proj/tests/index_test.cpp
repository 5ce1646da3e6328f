#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

#include "patchcad/index.hpp"
#include "test_util.hpp"

using namespace patchcad;
using testutil::error_code;

namespace {

Config small_config() {
  Config cfg;
  cfg.render_resolution = 32;
  cfg.patch_resample = 4;
  cfg.hidden_dim = 8;
  cfg.embed_dim = 4;
  return cfg;
}

TowerParams small_towers(const Config& cfg, std::uint64_t seed = 1) {
  const std::size_t p2 = std::size_t{cfg.patch_resample} * cfg.patch_resample;
  return init_towers(p2, 3 * p2, cfg.hidden_dim, cfg.embed_dim, seed);
}

std::vector<ShapeEntry> entries(std::size_t n, std::size_t per_category = 0) {
  std::vector<ShapeEntry> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string cat = per_category == 0 ? "box" : "cat" + std::to_string(i / per_category);
    out.push_back({i, "shape" + std::to_string(i), cat, "shape" + std::to_string(i) + ".obj"});
  }
  return out;
}

std::vector<TriMesh> boxes(std::size_t n) {
  std::vector<TriMesh> out;
  for (std::size_t i = 0; i < n; ++i) {
    const double k = static_cast<double>(i);
    out.push_back(normalize_mesh(testutil::box({0, 0, 0}, {1.0, 0.3 + 0.03 * k, 0.5 + 0.02 * k})));
  }
  return out;
}

// Micro-index over 2D embeddings; record i belongs to shape shape_of[i].
PatchIndex micro_index(const std::vector<std::uint32_t>& shape_of, const std::vector<std::array<float, 2>>& emb,
                       std::size_t shapes = 3) {
  std::vector<PatchRecord> records;
  for (std::size_t i = 0; i < shape_of.size(); ++i) {
    records.push_back({shape_of[i], 0, testutil::rect(0, 0, 2, 2), {emb[i][0], emb[i][1]}});
  }
  return PatchIndex(entries(shapes), ViewSet{}, std::move(records), Config{});
}

Neighbor nb(std::uint32_t record, double sim) { return {record, sim}; }

PatchVote vote(const PatchIndex& index, std::vector<Neighbor> neighbors) {
  PatchVote pv;
  pv.neighbors = std::move(neighbors);
  elect_patch_winner(index, pv);
  return pv;
}

ShadedRender query_render(const TriMesh& mesh, const Rotation& view, const Config& cfg) {
  const NormalMap m = rasterize(mesh, view, cfg.render_resolution);
  return shade(m, view, Vec3(cfg.light_dir[0], cfg.light_dir[1], cfg.light_dir[2]), cfg.noise_sigma, 5);
}

}  // namespace

TEST(BuildIndex, FullGridOfRecordsWhenNothingIsEmpty) {
  Config cfg = small_config();
  cfg.patch_fraction = 1.0;  // the whole render always clears the coverage floor
  const ViewSet views = canonical_views(16, 64, 0, 20);
  const PatchIndex index = build_index(entries(20), boxes(20), views, small_towers(cfg), 8, cfg);
  EXPECT_EQ(index.size(), 20u * 16u * 8u);
  for (const auto& r : index.records()) {
    double n = 0;
    for (float v : r.embedding) n += static_cast<double>(v) * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    EXPECT_FALSE(r.rect.empty);
    EXPECT_NE(index.find_shape(r.shape_id), nullptr);
  }
}

TEST(BuildIndex, EmptyViewIsSkipped) {
  // a flat triangle seen edge-on covers no pixel centers
  TriMesh flat;
  flat.vertices = {Vec3(-0.5, -0.5, 0), Vec3(0.5, -0.5, 0), Vec3(0, 0.5, 0)};
  flat.triangles = {{0, 1, 2}};
  Config cfg = small_config();
  cfg.patch_fraction = 1.0;
  ViewSet views;
  views.medoids = {Rotation::identity(), Rotation::from_axis_angle(Vec3::UnitY(), std::numbers::pi / 2)};
  const PatchIndex index = build_index(entries(1), {flat}, views, small_towers(cfg), 3, cfg);
  EXPECT_EQ(index.size(), 3u);
  for (const auto& r : index.records()) EXPECT_EQ(r.view_id, 0u);
}

TEST(BuildIndex, DeterministicAndFileRoundTripIsBitExact) {
  const Config cfg = small_config();
  const ViewSet views = canonical_views(4, 32, 1, 20);
  const auto towers = small_towers(cfg);
  std::ostringstream a, b;
  write_index(a, build_index(entries(3), boxes(3), views, towers, 5, cfg));
  write_index(b, build_index(entries(3), boxes(3), views, towers, 5, cfg));
  ASSERT_EQ(a.str(), b.str());
  EXPECT_EQ(a.str().substr(0, 4), "P2CI");
  std::istringstream in(a.str());
  const PatchIndex back = read_index(in);
  std::ostringstream again;
  write_index(again, back);
  EXPECT_EQ(again.str(), a.str());
  EXPECT_EQ(back.config(), cfg);
}

TEST(BuildIndex, RejectsCorruptFiles) {
  std::istringstream bad("P2CX");
  EXPECT_EQ(error_code([&] { read_index(bad); }), "bad_magic");
  const PatchIndex index = micro_index({0, 1}, {{{1, 0}}, {{0, 1}}});
  std::ostringstream os;
  write_index(os, index);
  std::istringstream cut(os.str().substr(0, os.str().size() - 2));
  EXPECT_EQ(error_code([&] { read_index(cut); }), "truncated_file");
}

TEST(BuildIndex, RecordWithUnknownShapeIsRejected) {
  EXPECT_EQ(error_code([] { micro_index({0, 7}, {{{1, 0}}, {{0, 1}}}); }), "bad_index");
}

TEST(KnnQuery, ExactMatchRanksFirst) {
  const PatchIndex index = micro_index({0, 1, 2}, {{{1, 0}}, {{0.6f, 0.8f}}, {{0, 1}}});
  const std::vector<double> q = {0.6f, 0.8f};
  const auto nn = index.knn_query(q, 1);
  ASSERT_EQ(nn.size(), 1u);
  EXPECT_EQ(nn[0].record, 1u);
  EXPECT_NEAR(nn[0].similarity, 1.0, 1e-12);
}

TEST(KnnQuery, LargeKReturnsAllSorted) {
  const PatchIndex index = micro_index({0, 1, 2}, {{{1, 0}}, {{0.6f, 0.8f}}, {{0, 1}}});
  const std::vector<double> q = {1, 0};
  const auto nn = index.knn_query(q, 10);
  ASSERT_EQ(nn.size(), 3u);
  EXPECT_EQ(nn[0].record, 0u);
  EXPECT_EQ(nn[1].record, 1u);
  EXPECT_EQ(nn[2].record, 2u);
}

TEST(KnnQuery, IdenticalEmbeddingsTieToLowerRecord) {
  const PatchIndex index = micro_index({2, 0, 1}, {{{0, 1}}, {{0.6f, 0.8f}}, {{0.6f, 0.8f}}});
  const std::vector<double> q = {0.6, 0.8};
  const auto nn = index.knn_query(q, 2);
  EXPECT_EQ(nn[0].record, 1u);
  EXPECT_EQ(nn[1].record, 2u);
}

TEST(KnnQuery, CategoryRestrictsSearch) {
  std::vector<PatchRecord> recs = {{0, 0, testutil::rect(0, 0, 0, 0), {1, 0}}, {3, 0, testutil::rect(0, 0, 0, 0), {0, 1}}};
  const PatchIndex index(entries(6, 3), ViewSet{}, recs, Config{});
  const std::vector<double> q = {1, 0};
  const auto nn = index.knn_query(q, 5, std::string("cat1"));
  ASSERT_EQ(nn.size(), 1u);
  EXPECT_EQ(nn[0].record, 1u);
}

TEST(KnnQuery, RejectsBadArguments) {
  const PatchIndex index = micro_index({0}, {{{1, 0}}});
  const std::vector<double> q2 = {1, 0}, q3 = {1, 0, 0};
  EXPECT_EQ(error_code([&] { index.knn_query(q2, 0); }), "invalid_argument");
  EXPECT_EQ(error_code([&] { index.knn_query(q3, 1); }), "dimension_mismatch");
  const PatchIndex empty;
  EXPECT_EQ(error_code([&] { empty.knn_query(q2, 1); }), "empty_index");
}

TEST(Voting, MajorityOfPatchWinners) {
  // records 0..2 belong to shapes 0 (A), 1 (B), 2 (C)
  const PatchIndex index = micro_index({0, 1, 2}, {{{1, 0}}, {{0, 1}}, {{1, 1}}});
  const std::vector<PatchVote> votes = {vote(index, {nb(0, 0.9)}), vote(index, {nb(0, 0.8)}),
                                        vote(index, {nb(1, 0.95)})};
  const auto ranking = rank_patch_votes(index, votes);
  ASSERT_GE(ranking.size(), 2u);
  EXPECT_EQ(ranking[0].shape_id, 0u);
  EXPECT_EQ(ranking[0].votes, 2u);
  EXPECT_NEAR(ranking[0].aggregate_similarity, 1.7, 1e-12);
  EXPECT_EQ(ranking[1].shape_id, 1u);
  EXPECT_EQ(ranking[1].votes, 1u);
}

TEST(Voting, VoteTieBrokenBySummedSimilarity) {
  // two winning patches each; A aggregates 0.9 + 0.9 = 1.8, B 0.6 + 0.6 = 1.2
  const PatchIndex index = micro_index({0, 0, 1, 1}, {{{1, 0}}, {{1, 0}}, {{0, 1}}, {{0, 1}}});
  const std::vector<PatchVote> votes = {vote(index, {nb(2, 0.6), nb(3, 0.5)}), vote(index, {nb(0, 0.9), nb(1, 0.2)}),
                                        vote(index, {nb(3, 0.6), nb(2, 0.1)}), vote(index, {nb(1, 0.9), nb(0, 0.8)})};
  const auto ranking = rank_patch_votes(index, votes);
  ASSERT_EQ(ranking.size(), 2u);
  EXPECT_EQ(ranking[0].shape_id, 0u);
  EXPECT_NEAR(ranking[0].aggregate_similarity, 1.8, 1e-12);
  EXPECT_EQ(ranking[1].shape_id, 1u);
  EXPECT_NEAR(ranking[1].aggregate_similarity, 1.2, 1e-12);
  EXPECT_EQ(ranking[0].votes, ranking[1].votes);
}

TEST(Voting, PatchElectionTieRules) {
  const PatchIndex index = micro_index({0, 1, 2, 2}, {{{1, 0}}, {{0, 1}}, {{1, 1}}, {{1, 1}}});
  // one neighbor each for shapes 0 and 1: higher summed similarity wins
  EXPECT_EQ(vote(index, {nb(0, 0.5), nb(1, 0.7)}).winner, 1u);
  // identical similarity: lower shape id wins
  EXPECT_EQ(vote(index, {nb(1, 0.5), nb(0, 0.5)}).winner, 0u);
  // modal shape wins despite lower similarities
  const PatchVote m = vote(index, {nb(0, 0.99), nb(2, 0.3), nb(3, 0.2)});
  EXPECT_EQ(m.winner, 2u);
  EXPECT_DOUBLE_EQ(m.best_similarity, 0.3);
}

TEST(Voting, NonWinnersFollowByEvidenceAndExcludedPatchesDoNotVote) {
  const PatchIndex index = micro_index({0, 1, 2}, {{{1, 0}}, {{0, 1}}, {{1, 1}}});
  PatchVote excluded;
  excluded.excluded = true;
  excluded.winner = 2;
  const std::vector<PatchVote> votes = {vote(index, {nb(0, 0.9), nb(1, 0.4), nb(0, 0.8)}),
                                        vote(index, {nb(0, 0.7), nb(2, 0.6), nb(0, 0.5)}), excluded};
  const auto ranking = rank_patch_votes(index, votes);
  ASSERT_EQ(ranking.size(), 3u);
  EXPECT_EQ(ranking[0].shape_id, 0u);
  EXPECT_EQ(ranking[0].votes, 2u);
  EXPECT_EQ(ranking[1].shape_id, 2u);  // evidence 0.6
  EXPECT_EQ(ranking[1].votes, 0u);
  EXPECT_EQ(ranking[2].shape_id, 1u);  // evidence 0.4
}

class RetrieveTest : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = small_config();
    towers_ = small_towers(cfg_, 3);
    meshes_ = boxes(4);
    index_ = build_index(entries(4, 2), meshes_, canonical_views(4, 32, 2, 20), towers_, 6, cfg_);
    query_ = query_render(meshes_[1], random_rotations(1, 77)[0], cfg_);
  }

  Config cfg_;
  TowerParams towers_;
  std::vector<TriMesh> meshes_;
  PatchIndex index_;
  ShadedRender query_;
};

TEST_F(RetrieveTest, SinglePatchSingleNeighborEqualsNearestRecord) {
  const RetrievalResult r = retrieve_shape(index_, query_, query_.mask, towers_, 1, 1, 4);
  ASSERT_EQ(r.voting_patches(), 1u);
  const PatchVote& pv = r.patches[0];
  const auto features = image_patch_features(query_, pv.rect, cfg_.patch_resample, query_.mask);
  const VectorXd e = embed_forward(towers_, TowerKind::image, features);
  std::uint32_t best = 0;
  double best_sim = -2;
  for (std::uint32_t i = 0; i < index_.size(); ++i) {
    double s = 0;
    for (Eigen::Index d = 0; d < e.size(); ++d) s += e(d) * index_.records()[i].embedding[static_cast<std::size_t>(d)];
    if (s > best_sim + 1e-12) {
      best_sim = s;
      best = i;
    }
  }
  EXPECT_EQ(r.ranking[0].shape_id, index_.records()[best].shape_id);
}

TEST_F(RetrieveTest, VotesAreConservedAndRankingIsSorted) {
  const RetrievalResult r = retrieve_shape(index_, query_, query_.mask, towers_, 9, 5, 8);
  std::size_t total = 0;
  for (const auto& s : r.ranking) total += s.votes;
  EXPECT_EQ(total, r.voting_patches());
  EXPECT_LE(total, 9u);
  for (std::size_t i = 1; i < r.ranking.size(); ++i) {
    const auto& a = r.ranking[i - 1];
    const auto& b = r.ranking[i];
    EXPECT_TRUE(a.votes > b.votes || (a.votes == b.votes && a.aggregate_similarity >= b.aggregate_similarity));
  }
}

TEST_F(RetrieveTest, IsDeterministic) {
  const auto a = retrieval_to_json(retrieve_shape(index_, query_, query_.mask, towers_, 9, 5, 8), index_);
  const auto b = retrieval_to_json(retrieve_shape(index_, query_, query_.mask, towers_, 9, 5, 8), index_);
  EXPECT_EQ(a.dump(), b.dump());
}

TEST_F(RetrieveTest, CategoryConditionedRankingStaysInCategory) {
  const RetrievalResult r = retrieve_shape(index_, query_, query_.mask, towers_, 9, 24, 8, std::string("cat1"));
  for (const auto& s : r.ranking) EXPECT_EQ(index_.find_shape(s.shape_id)->category, "cat1");
}

TEST_F(RetrieveTest, EmptyInstanceMaskMeansNoRetrieval) {
  const std::vector<std::uint8_t> none(query_.mask.size(), 0);
  EXPECT_EQ(error_code([&] { retrieve_shape(index_, query_, none, towers_, 9, 5, 8); }), "no_retrieval");
  EXPECT_EQ(error_code([&] { retrieve_shape(index_, query_, query_.mask, towers_, 0, 5, 8); }), "invalid_argument");
}

TEST(Voting, DuplicatingTrueShapeRecordsNeverLowersItsRank) {
  Rng rng = make_rng(12, 0);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<std::uint32_t> shape_of;
    std::vector<std::array<float, 2>> emb;
    for (std::uint32_t i = 0; i < 12; ++i) {
      shape_of.push_back(i % 4);
      const double a = 2 * std::numbers::pi * uniform01(rng);
      emb.push_back({static_cast<float>(std::cos(a)), static_cast<float>(std::sin(a))});
    }
    const std::uint32_t truth = static_cast<std::uint32_t>(uniform_index(rng, 4));
    auto rank_of_truth = [&](const PatchIndex& index, const std::vector<std::vector<double>>& queries) {
      std::vector<PatchVote> votes;
      for (const auto& q : queries) votes.push_back(vote(index, index.knn_query(q, 3)));
      const auto ranking = rank_patch_votes(index, votes);
      for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (ranking[i].shape_id == truth) return i;
      }
      return ranking.size();
    };
    std::vector<std::vector<double>> queries;
    for (int q = 0; q < 5; ++q) {
      const double a = 2 * std::numbers::pi * uniform01(rng);
      queries.push_back({std::cos(a), std::sin(a)});
    }
    const std::size_t before = rank_of_truth(micro_index(shape_of, emb, 4), queries);
    auto more_shape = shape_of;
    auto more_emb = emb;
    for (std::size_t i = 0; i < shape_of.size(); ++i) {
      if (shape_of[i] != truth) continue;
      more_shape.push_back(truth);
      more_emb.push_back(emb[i]);
    }
    const std::size_t after = rank_of_truth(micro_index(more_shape, more_emb, 4), queries);
    EXPECT_LE(after, before) << "trial " << trial;
  }
}
