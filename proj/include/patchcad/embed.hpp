#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "patchcad/config.hpp"
#include "patchcad/descriptor.hpp"
#include "patchcad/error.hpp"
#include "patchcad/random.hpp"
#include "patchcad/render.hpp"

namespace patchcad {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using EmbeddingVector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Patch features

namespace detail {

// Source pixel range [lo, hi) averaged into output cell `cell` of `out`.
inline std::pair<std::uint32_t, std::uint32_t> pool_range(std::uint32_t cell, std::uint32_t out, std::uint32_t in) {
  const auto lo = static_cast<std::uint32_t>(std::uint64_t{cell} * in / out);
  auto hi = static_cast<std::uint32_t>(std::uint64_t{cell + 1} * in / out);
  if (hi <= lo) hi = lo + 1;
  return {lo, hi};
}

template <typename PixelFn>
std::vector<double> pool_patch(const PatchRect& rect, std::uint32_t p, std::size_t channels, PixelFn&& pixel) {
  std::vector<double> out(std::size_t{p} * p * channels, 0.0);
  std::vector<double> acc(channels);
  for (std::uint32_t cy = 0; cy < p; ++cy) {
    const auto [y0, y1] = pool_range(cy, p, rect.h);
    for (std::uint32_t cx = 0; cx < p; ++cx) {
      const auto [x0, x1] = pool_range(cx, p, rect.w);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::uint32_t y = y0; y < y1; ++y) {
        for (std::uint32_t x = x0; x < x1; ++x) pixel(rect.x + x, rect.y + y, acc);
      }
      const double inv = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
      for (std::size_t c = 0; c < channels; ++c) out[(std::size_t{cy} * p + cx) * channels + c] = acc[c] * inv;
    }
  }
  return out;
}

}  // namespace detail

// P x P average-pooled intensities; pixels outside `instance_mask` (or the
// render mask when none is given) contribute zero.
inline std::vector<double> image_patch_features(const ShadedRender& r, const PatchRect& rect, std::uint32_t p,
                                                std::span<const std::uint8_t> instance_mask = {}) {
  const auto& mask = instance_mask.empty() ? std::span<const std::uint8_t>(r.mask) : instance_mask;
  return detail::pool_patch(rect, p, 1, [&](std::uint32_t x, std::uint32_t y, std::vector<double>& acc) {
    const std::size_t i = r.index(x, y);
    if (mask[i]) acc[0] += r.intensity[i];
  });
}

// P x P average-pooled canonical normals, interleaved (nx, ny, nz) per cell.
inline std::vector<double> shape_patch_features(const NormalMap& m, const PatchRect& rect, std::uint32_t p) {
  return detail::pool_patch(rect, p, 3, [&](std::uint32_t x, std::uint32_t y, std::vector<double>& acc) {
    const std::size_t i = m.index(x, y);
    if (!m.mask[i]) return;
    for (std::size_t c = 0; c < 3; ++c) acc[c] += m.normals[i][c];
  });
}

// ---------------------------------------------------------------------------
// Towers

enum class TowerKind : std::uint8_t { image, shape };

// y = normalize(W2 relu(W1 x + b1) + b2)
struct Tower {
  MatrixXd w1;  // hidden x input
  VectorXd b1;
  MatrixXd w2;  // embed x hidden
  VectorXd b2;

  Eigen::Index input_dim() const { return w1.cols(); }
  Eigen::Index hidden_dim() const { return w1.rows(); }
  Eigen::Index embed_dim() const { return w2.rows(); }

  static Tower zeros(Eigen::Index in, Eigen::Index hidden, Eigen::Index out) {
    return {MatrixXd::Zero(hidden, in), VectorXd::Zero(hidden), MatrixXd::Zero(out, hidden), VectorXd::Zero(out)};
  }
};

// Separate parameters per domain; no sharing.
struct TowerParams {
  Tower image;
  Tower shape;

  Tower& tower(TowerKind k) { return k == TowerKind::image ? image : shape; }
  const Tower& tower(TowerKind k) const { return k == TowerKind::image ? image : shape; }

  static TowerParams zeros_like(const TowerParams& p) {
    return {Tower::zeros(p.image.input_dim(), p.image.hidden_dim(), p.image.embed_dim()),
            Tower::zeros(p.shape.input_dim(), p.shape.hidden_dim(), p.shape.embed_dim())};
  }

  // Visits every parameter block in model-file order: image W1, b1, W2, b2,
  // then the shape tower.
  template <typename Fn>
  void for_each_block(Fn&& fn) {
    for (Tower* t : {&image, &shape}) {
      fn(t->w1.data(), t->w1.size());
      fn(t->b1.data(), t->b1.size());
      fn(t->w2.data(), t->w2.size());
      fn(t->b2.data(), t->b2.size());
    }
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tower* t : {&image, &shape}) n += t->w1.size() + t->b1.size() + t->w2.size() + t->b2.size();
    return n;
  }

  bool all_finite() const {
    for (const Tower* t : {&image, &shape}) {
      if (!t->w1.allFinite() || !t->b1.allFinite() || !t->w2.allFinite() || !t->b2.allFinite()) return false;
    }
    return true;
  }

  bool operator==(const TowerParams& o) const {
    auto same = [](const Tower& a, const Tower& b) {
      return a.w1.rows() == b.w1.rows() && a.w1.cols() == b.w1.cols() && a.w2.rows() == b.w2.rows() &&
             a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2;
    };
    return same(image, o.image) && same(shape, o.shape);
  }
};

// Rounds every parameter to the nearest float so the in-memory model equals
// what the f32 model file stores.
inline void snap_to_float(TowerParams& p) {
  p.for_each_block([](double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = static_cast<double>(static_cast<float>(data[i]));
  });
}

// He-style init: N(0, 2 / fan_in) weights, zero biases.
inline TowerParams init_towers(std::size_t image_in, std::size_t shape_in, std::size_t hidden, std::size_t embed,
                               std::uint64_t seed) {
  Rng rng = make_rng(seed, 0x696e6974ull);
  auto make = [&](std::size_t in) {
    Tower t = Tower::zeros(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(hidden),
                           static_cast<Eigen::Index>(embed));
    const double s1 = std::sqrt(2.0 / static_cast<double>(in));
    const double s2 = std::sqrt(2.0 / static_cast<double>(hidden));
    for (Eigen::Index i = 0; i < t.w1.size(); ++i) t.w1.data()[i] = s1 * gaussian(rng);
    for (Eigen::Index i = 0; i < t.w2.size(); ++i) t.w2.data()[i] = s2 * gaussian(rng);
    return t;
  };
  TowerParams p{make(image_in), make(shape_in)};
  snap_to_float(p);
  return p;
}

struct TowerActivations {
  MatrixXd z1;
  MatrixXd z2;     // after the tiny-norm epsilon shift
  MatrixXd y;      // unit columns
  VectorXd norms;  // norms of z2 columns
};

inline constexpr double kTinyNorm = 1e-8;

// Forward pass for a batch of inputs (one column each).
inline TowerActivations forward_batch(const Tower& t, const MatrixXd& x) {
  if (x.rows() != t.input_dim()) {
    throw Error("dimension_mismatch", "tower expects " + std::to_string(t.input_dim()) + " inputs, got " +
                                          std::to_string(x.rows()));
  }
  TowerActivations a;
  a.z1 = (t.w1 * x).colwise() + t.b1;
  a.z2 = (t.w2 * a.z1.cwiseMax(0.0)).colwise() + t.b2;
  a.norms.resize(x.cols());
  a.y.resize(a.z2.rows(), a.z2.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    double n = a.z2.col(c).norm();
    if (n < kTinyNorm) {
      a.z2(0, c) += kTinyNorm;
      n = a.z2.col(c).norm();
    }
    a.norms(c) = n;
    a.y.col(c) = a.z2.col(c) / n;
  }
  return a;
}

// Accumulates parameter gradients into `grad` given dL/dy.
inline void backward_batch(const Tower& t, const MatrixXd& x, const TowerActivations& a, const MatrixXd& grad_y,
                           Tower& grad) {
  MatrixXd gz2(grad_y.rows(), grad_y.cols());
  for (Eigen::Index c = 0; c < grad_y.cols(); ++c) {
    const double proj = a.y.col(c).dot(grad_y.col(c));
    gz2.col(c) = (grad_y.col(c) - a.y.col(c) * proj) / a.norms(c);
  }
  const MatrixXd h = a.z1.cwiseMax(0.0);
  grad.w2.noalias() += gz2 * h.transpose();
  grad.b2 += gz2.rowwise().sum();
  MatrixXd gz1 = t.w2.transpose() * gz2;
  gz1 = gz1.cwiseProduct((a.z1.array() > 0.0).cast<double>().matrix());
  grad.w1.noalias() += gz1 * x.transpose();
  grad.b1 += gz1.rowwise().sum();
}

inline EmbeddingVector embed_forward(const TowerParams& params, TowerKind kind, std::span<const double> features) {
  const Tower& t = params.tower(kind);
  if (static_cast<Eigen::Index>(features.size()) != t.input_dim()) {
    throw Error("dimension_mismatch", "tower expects " + std::to_string(t.input_dim()) + " inputs, got " +
                                          std::to_string(features.size()));
  }
  const MatrixXd x = Eigen::Map<const MatrixXd>(features.data(), static_cast<Eigen::Index>(features.size()), 1);
  return forward_batch(t, x).y.col(0);
}

inline MatrixXd embed_batch(const TowerParams& params, TowerKind kind, const MatrixXd& inputs) {
  return forward_batch(params.tower(kind), inputs).y;
}

// ---------------------------------------------------------------------------
// Loss

struct EmbedConfig {
  double tau = 0.15;
  double c = 24.0;
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t patch_resample = 16;
  std::size_t negatives_keep = 1024;
  std::size_t negatives_pool = 4096;
  double learning_rate = 0.5;
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;

  static EmbedConfig from(const Config& c) {
    return {c.tau,          c.c,         c.embed_dim, c.hidden_dim, c.patch_resample, c.negatives_keep,
            c.negatives_pool, c.learning_rate, c.epochs, c.batch_size, c.seed};
  }
};

// One anchor (a column of the anchor feature matrix) with its positive and
// negative candidate columns.
struct AnchorPairs {
  std::uint32_t anchor = 0;
  std::vector<std::uint32_t> positives;
  std::vector<std::uint32_t> negatives;
};

struct TrainingBatch {
  MatrixXd anchor_features;     // image-domain inputs, one column per anchor
  MatrixXd candidate_features;  // shape-domain inputs
  std::vector<AnchorPairs> anchors;
};

struct LossAndGrad {
  double loss = 0.0;
  TowerParams grad;
};

namespace detail {

struct Gathered {
  std::vector<std::uint32_t> ids;    // sorted unique source columns
  std::vector<std::int32_t> local;   // source column -> local column, -1 if absent
  MatrixXd x;
};

inline Gathered gather_columns(const MatrixXd& source, std::vector<std::uint32_t> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Gathered g;
  g.local.assign(static_cast<std::size_t>(source.cols()), -1);
  g.x.resize(source.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= source.cols()) throw Error("invalid_argument", "batch references a missing feature column");
    g.local[ids[i]] = static_cast<std::int32_t>(i);
    g.x.col(static_cast<Eigen::Index>(i)) = source.col(ids[i]);
  }
  g.ids = std::move(ids);
  return g;
}

}  // namespace detail

// L = -sum_a log(Dp(a) / (Dp(a) + C Dn(a))), where Dp and Dn are the means of
// exp(cos / tau) over the anchor's positives and negatives. Gradients are
// propagated analytically through the normalization and both towers.
inline LossAndGrad nce_loss_and_grad(const TowerParams& params, const MatrixXd& anchor_features,
                                     const MatrixXd& candidate_features, std::span<const AnchorPairs> anchors,
                                     double tau, double c) {
  if (!(tau > 0.0) || !(c > 0.0)) throw Error("invalid_argument", "tau and C must be positive");
  std::vector<std::uint32_t> anchor_ids, cand_ids;
  for (const auto& a : anchors) {
    if (a.positives.empty() || a.negatives.empty()) {
      throw Error("invalid_batch", "every anchor needs at least one positive and one negative");
    }
    anchor_ids.push_back(a.anchor);
    cand_ids.insert(cand_ids.end(), a.positives.begin(), a.positives.end());
    cand_ids.insert(cand_ids.end(), a.negatives.begin(), a.negatives.end());
  }
  const auto ga = detail::gather_columns(anchor_features, std::move(anchor_ids));
  const auto gc = detail::gather_columns(candidate_features, std::move(cand_ids));
  const auto act_a = forward_batch(params.image, ga.x);
  const auto act_c = forward_batch(params.shape, gc.x);

  LossAndGrad out{0.0, TowerParams::zeros_like(params)};
  MatrixXd grad_ya = MatrixXd::Zero(act_a.y.rows(), act_a.y.cols());
  MatrixXd grad_yc = MatrixXd::Zero(act_c.y.rows(), act_c.y.cols());
  const double inv_tau = 1.0 / tau;

  std::vector<double> ep, en;
  for (const auto& a : anchors) {
    const auto ia = static_cast<Eigen::Index>(ga.local[a.anchor]);
    const auto ya = act_a.y.col(ia);
    auto exp_sims = [&](const std::vector<std::uint32_t>& ids, std::vector<double>& e) {
      e.resize(ids.size());
      double mean = 0.0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        e[i] = std::exp(ya.dot(act_c.y.col(gc.local[ids[i]])) * inv_tau);
        mean += e[i];
      }
      return mean / static_cast<double>(ids.size());
    };
    const double dp = exp_sims(a.positives, ep);
    const double dn = exp_sims(a.negatives, en);
    const double denom = dp + c * dn;
    out.loss += std::log(denom) - std::log(dp);

    // dL/ds for each similarity s = cos / tau
    const double wp = (1.0 / denom - 1.0 / dp) / static_cast<double>(a.positives.size());
    const double wn = c / denom / static_cast<double>(a.negatives.size());
    auto scatter = [&](const std::vector<std::uint32_t>& ids, const std::vector<double>& e, double w) {
      for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto ic = static_cast<Eigen::Index>(gc.local[ids[i]]);
        const double g = w * e[i] * inv_tau;
        grad_ya.col(ia) += g * act_c.y.col(ic);
        grad_yc.col(ic) += g * ya;
      }
    };
    scatter(a.positives, ep, wp);
    scatter(a.negatives, en, wn);
  }

  backward_batch(params.image, ga.x, act_a, grad_ya, out.grad.image);
  backward_batch(params.shape, gc.x, act_c, grad_yc, out.grad.shape);
  return out;
}

inline LossAndGrad nce_loss_and_grad(const TowerParams& params, const TrainingBatch& batch, const EmbedConfig& cfg) {
  return nce_loss_and_grad(params, batch.anchor_features, batch.candidate_features, batch.anchors, cfg.tau, cfg.c);
}

// ---------------------------------------------------------------------------
// Hard-negative mining

struct ScoredCandidate {
  std::uint32_t id = 0;
  double similarity = 0.0;
};

// The `keep` most similar candidates; ties broken by ascending id.
inline std::vector<std::uint32_t> select_hardest(std::vector<ScoredCandidate> scored, std::size_t keep) {
  auto harder = [](const ScoredCandidate& a, const ScoredCandidate& b) {
    return a.similarity != b.similarity ? a.similarity > b.similarity : a.id < b.id;
  };
  const std::size_t n = std::min(keep, scored.size());
  std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(n), scored.end(), harder);
  std::vector<std::uint32_t> ids;
  ids.reserve(n);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(scored[i].id);
  return ids;
}

inline double cosine(const VectorXd& a, const VectorXd& b) {
  const double n = a.norm() * b.norm();
  return n > 0.0 ? a.dot(b) / n : 0.0;
}

inline std::vector<std::uint32_t> mine_hard_negatives(
    const EmbeddingVector& anchor, const std::vector<std::pair<std::uint32_t, EmbeddingVector>>& candidates,
    std::size_t keep) {
  std::vector<ScoredCandidate> scored;
  scored.reserve(candidates.size());
  for (const auto& [id, e] : candidates) scored.push_back({id, cosine(anchor, e)});
  return select_hardest(std::move(scored), keep);
}

// ---------------------------------------------------------------------------
// Training

// Labeled patch corpus: image-domain anchors against shape-domain candidates.
// Negatives per anchor are the oracle-labeled pool (already capped).
struct PatchCorpus {
  MatrixXd anchor_features;
  MatrixXd candidate_features;
  std::vector<AnchorPairs> anchors;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t skipped_anchors = 0;
};

struct TrainResult {
  TowerParams params;
  std::vector<EpochStats> history;
  std::size_t skipped_anchors = 0;
};

inline std::string history_csv(const std::vector<EpochStats>& history) {
  std::string out = "epoch,mean_loss,skipped_anchors\n";
  char buf[96];
  for (const auto& h : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%zu\n", h.epoch, h.mean_loss, h.skipped_anchors);
    out += buf;
  }
  return out;
}

// Plain mini-batch SGD on the mean per-anchor loss. Anchors lacking a
// positive or a negative are skipped and counted. When an anchor's pool
// exceeds negatives_keep, the hardest negatives under the current embedding
// are mined before each step.
inline TrainResult train(const PatchCorpus& corpus, const EmbedConfig& cfg, const TowerParams* init = nullptr) {
  if (corpus.anchors.empty()) throw Error("empty_corpus", "training corpus has no anchors");
  std::vector<std::uint32_t> usable;
  std::size_t skipped = 0;
  for (std::uint32_t i = 0; i < corpus.anchors.size(); ++i) {
    const auto& a = corpus.anchors[i];
    if (a.positives.empty() || a.negatives.empty()) {
      ++skipped;
    } else {
      usable.push_back(i);
    }
  }
  if (usable.empty()) throw Error("no_trainable_anchors", "every anchor lacks a positive or a negative");

  TrainResult result;
  result.skipped_anchors = skipped;
  result.params = init != nullptr ? *init
                                  : init_towers(static_cast<std::size_t>(corpus.anchor_features.rows()),
                                                static_cast<std::size_t>(corpus.candidate_features.rows()),
                                                cfg.hidden_dim, cfg.embed_dim, cfg.seed);
  TowerParams& params = result.params;
  const std::size_t batch_size = std::max<std::size_t>(1, cfg.batch_size);

  std::vector<AnchorPairs> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::uint32_t> order = usable;
    Rng rng = make_rng(cfg.seed, 0x65706f6368ull, epoch);
    shuffle(order, rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      const std::size_t end = std::min(order.size(), start + batch_size);
      batch.clear();
      bool needs_mining = false;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(corpus.anchors[order[i]]);
        needs_mining |= batch.back().negatives.size() > cfg.negatives_keep;
      }
      if (needs_mining) {
        for (auto& a : batch) {
          if (a.negatives.size() <= cfg.negatives_keep) continue;
          const VectorXd ya = embed_batch(params, TowerKind::image, corpus.anchor_features.col(a.anchor));
          const auto gc = detail::gather_columns(corpus.candidate_features, a.negatives);
          const MatrixXd yc = embed_batch(params, TowerKind::shape, gc.x);
          std::vector<ScoredCandidate> scored;
          for (std::size_t k = 0; k < gc.ids.size(); ++k) {
            scored.push_back({gc.ids[k], ya.dot(yc.col(static_cast<Eigen::Index>(k)))});
          }
          a.negatives = select_hardest(std::move(scored), cfg.negatives_keep);
        }
      }
      auto lg = nce_loss_and_grad(params, corpus.anchor_features, corpus.candidate_features, batch, cfg.tau, cfg.c);
      epoch_loss += lg.loss;
      const double step = cfg.learning_rate / static_cast<double>(batch.size());
      if (step != 0.0) {
        for (auto [p, g] : {std::pair{&params.image, &lg.grad.image}, std::pair{&params.shape, &lg.grad.shape}}) {
          p->w1 -= step * g->w1;
          p->b1 -= step * g->b1;
          p->w2 -= step * g->w2;
          p->b2 -= step * g->b2;
        }
      }
    }
    result.history.push_back({epoch, epoch_loss / static_cast<double>(usable.size()), skipped});
  }
  snap_to_float(params);
  if (!params.all_finite()) throw Error("training_diverged", "non-finite parameters after training");
  return result;
}

}  // namespace patchcad
