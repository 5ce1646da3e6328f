#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"
#include "patchcad/error.hpp"
#include "patchcad/random.hpp"
#include "patchcad/views.hpp"

namespace patchcad {

struct PoseBins {
  std::vector<Rotation> medoids;

  std::size_t size() const { return medoids.size(); }
};

inline PoseBins make_pose_bins(std::span<const Rotation> train_rotations, std::size_t k, std::uint64_t seed,
                               std::size_t max_iters = 50) {
  if (k < 2) throw Error("invalid_argument", "pose needs at least 2 rotation bins");
  return {kmedoids(train_rotations, k, seed, max_iters).views.medoids};
}

struct BinAssignment {
  std::size_t bin = 0;
  Rotation residual;  // residual * medoid[bin] == rotation
};

// Nearest medoid by geodesic distance, lowest index on ties.
inline BinAssignment assign_rotation_bin(const PoseBins& bins, const Rotation& rotation) {
  if (bins.medoids.empty()) throw Error("invalid_argument", "empty pose bins");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bins.medoids.size(); ++i) {
    const double d = quat_geodesic(bins.medoids[i], rotation);
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return {best, compose(rotation, bins.medoids[best].conjugate())};
}

// Quadratic within delta, linear beyond.
inline double huber(double x, double delta) {
  const double a = std::abs(x);
  return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

inline double huber_grad(double x, double delta) { return std::abs(x) <= delta ? x : (x > 0 ? delta : -delta); }

struct PosePrediction {
  std::vector<double> bin_logits;
  Rotation offset;
  std::array<double, 2> translation{0.0, 0.0};
};

struct PoseLosses {
  double ce = 0.0;
  double offset = 0.0;
  double translation = 0.0;

  double total() const { return ce + offset + translation; }
};

inline double log_softmax_at(std::span<const double> logits, std::size_t index) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - mx);
  return logits[index] - mx - std::log(sum);
}

// Offset quaternions are compared after flipping the prediction onto the
// ground truth's hemisphere.
inline PoseLosses pose_losses(const PosePrediction& pred, std::size_t gt_bin, const Rotation& gt_offset,
                              std::array<double, 2> gt_translation, double delta) {
  if (gt_bin >= pred.bin_logits.size()) throw Error("invalid_argument", "ground-truth bin out of range");
  PoseLosses l;
  l.ce = -log_softmax_at(pred.bin_logits, gt_bin);
  const double sign = quat_dot(pred.offset, gt_offset) < 0.0 ? -1.0 : 1.0;
  const auto p = pred.offset.wxyz();
  const auto g = gt_offset.wxyz();
  for (std::size_t i = 0; i < 4; ++i) l.offset += huber(sign * p[i] - g[i], delta);
  for (std::size_t i = 0; i < 2; ++i) l.translation += huber(pred.translation[i] - gt_translation[i], delta);
  return l;
}

// Linear head on whole-object features. Output rows: K bin logits, 4 offset
// components (w, x, y, z), 2 translation ratios.
struct PoseHeadParams {
  Eigen::MatrixXd weight;
  Eigen::VectorXd bias;

  std::size_t bins() const { return static_cast<std::size_t>(weight.rows()) - 6; }
  std::size_t feature_dim() const { return static_cast<std::size_t>(weight.cols()); }

  static PoseHeadParams zeros(std::size_t bins, std::size_t features) {
    PoseHeadParams p{Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(bins + 6), static_cast<Eigen::Index>(features)),
                     Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bins + 6))};
    p.bias(static_cast<Eigen::Index>(bins)) = 1.0;  // identity offset
    return p;
  }

  bool operator==(const PoseHeadParams& o) const {
    return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && weight == o.weight &&
           bias == o.bias;
  }
};

inline PosePrediction pose_forward(const PoseHeadParams& head, std::span<const double> features) {
  if (features.size() != head.feature_dim()) throw Error("dimension_mismatch", "pose feature size mismatch");
  const Eigen::Map<const Eigen::VectorXd> f(features.data(), static_cast<Eigen::Index>(features.size()));
  const Eigen::VectorXd out = head.weight * f + head.bias;
  const std::size_t k = head.bins();
  PosePrediction p;
  p.bin_logits.assign(out.data(), out.data() + k);
  Rotation raw{out(k), out(k + 1), out(k + 2), out(k + 3)};
  p.offset = raw.norm() > 1e-12 ? raw.normalized() : Rotation::identity();
  p.translation = {out(k + 4), out(k + 5)};
  return p;
}

struct PoseTarget {
  std::size_t bin = 0;
  Rotation offset;
  std::array<double, 2> translation{0.0, 0.0};
};

struct PoseLossAndGrad {
  double loss = 0.0;
  PoseHeadParams grad;
};

// Summed pose loss over the samples (columns of `features`) with analytic
// gradients, including through the offset normalization.
inline PoseLossAndGrad pose_loss_and_grad(const PoseHeadParams& head, const Eigen::MatrixXd& features,
                                          std::span<const PoseTarget> targets, double delta) {
  if (static_cast<std::size_t>(features.cols()) != targets.size()) {
    throw Error("invalid_argument", "pose features and targets differ in count");
  }
  const std::size_t k = head.bins();
  const Eigen::MatrixXd out = (head.weight * features).colwise() + head.bias;
  Eigen::MatrixXd gout = Eigen::MatrixXd::Zero(out.rows(), out.cols());
  PoseLossAndGrad r{0.0, {Eigen::MatrixXd::Zero(head.weight.rows(), head.weight.cols()),
                          Eigen::VectorXd::Zero(head.bias.size())}};

  for (Eigen::Index s = 0; s < out.cols(); ++s) {
    const auto& t = targets[static_cast<std::size_t>(s)];
    if (t.bin >= k) throw Error("invalid_argument", "ground-truth bin out of range");
    const auto col = out.col(s);

    const Eigen::VectorXd logits = col.head(static_cast<Eigen::Index>(k));
    const double mx = logits.maxCoeff();
    const Eigen::VectorXd e = (logits.array() - mx).exp();
    const double sum = e.sum();
    r.loss += -(logits(static_cast<Eigen::Index>(t.bin)) - mx - std::log(sum));
    gout.col(s).head(static_cast<Eigen::Index>(k)) = e / sum;
    gout(static_cast<Eigen::Index>(t.bin), s) -= 1.0;

    const Eigen::Vector4d raw = col.segment<4>(static_cast<Eigen::Index>(k));
    const double n = std::max(raw.norm(), 1e-12);
    const Eigen::Vector4d u = raw / n;
    const Eigen::Vector4d g(t.offset.w, t.offset.x, t.offset.y, t.offset.z);
    const double sign = u.dot(g) < 0.0 ? -1.0 : 1.0;
    Eigen::Vector4d dv;
    for (int i = 0; i < 4; ++i) {
      const double diff = sign * u(i) - g(i);
      r.loss += huber(diff, delta);
      dv(i) = huber_grad(diff, delta);
    }
    const Eigen::Vector4d du = sign * dv;
    gout.col(s).segment<4>(static_cast<Eigen::Index>(k)) = (du - u * u.dot(du)) / n;

    for (int i = 0; i < 2; ++i) {
      const double diff = col(static_cast<Eigen::Index>(k) + 4 + i) - t.translation[static_cast<std::size_t>(i)];
      r.loss += huber(diff, delta);
      gout(static_cast<Eigen::Index>(k) + 4 + i, s) = huber_grad(diff, delta);
    }
  }
  r.grad.weight = gout * features.transpose();
  r.grad.bias = gout.rowwise().sum();
  return r;
}

struct PoseTrainConfig {
  double learning_rate = 0.05;
  std::size_t epochs = 300;
  std::size_t batch_size = 256;
  double delta = 1.0;
  std::uint64_t seed = 0;
};

// Mini-batch SGD on the mean per-sample pose loss. Returns the per-epoch mean.
inline std::vector<double> train_pose(PoseHeadParams& head, const Eigen::MatrixXd& features,
                                      std::span<const PoseTarget> targets, const PoseTrainConfig& cfg) {
  if (targets.empty()) throw Error("empty_corpus", "no pose training samples");
  std::vector<double> history;
  std::vector<std::uint32_t> order(targets.size());
  for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<PoseTarget> bt;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, 0x706f7365ull, epoch);
    shuffle(order, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      Eigen::MatrixXd bf(features.rows(), static_cast<Eigen::Index>(end - start));
      bt.clear();
      for (std::size_t i = start; i < end; ++i) {
        bf.col(static_cast<Eigen::Index>(i - start)) = features.col(order[i]);
        bt.push_back(targets[order[i]]);
      }
      const auto lg = pose_loss_and_grad(head, bf, bt, cfg.delta);
      total += lg.loss;
      const double step = cfg.learning_rate / static_cast<double>(bt.size());
      head.weight -= step * lg.grad.weight;
      head.bias -= step * lg.grad.bias;
    }
    history.push_back(total / static_cast<double>(targets.size()));
  }
  head.weight = head.weight.cast<float>().cast<double>();
  head.bias = head.bias.cast<float>().cast<double>();
  return history;
}

struct PoseEstimate {
  std::size_t bin = 0;
  Rotation rotation;
  std::array<double, 2> translation{0.0, 0.0};
};

// rotation = normalize(offset) * medoid[argmax logits]
inline PoseEstimate predict_pose(const PoseHeadParams& head, const PoseBins& bins, std::span<const double> features) {
  if (bins.size() != head.bins()) throw Error("invalid_argument", "pose head and bins disagree on K");
  const PosePrediction p = pose_forward(head, features);
  const auto best = static_cast<std::size_t>(
      std::max_element(p.bin_logits.begin(), p.bin_logits.end()) - p.bin_logits.begin());
  return {best, compose(p.offset, bins.medoids[best]), p.translation};
}

inline nlohmann::json pose_to_json(const PoseEstimate& e) {
  return {{"bin", e.bin}, {"quaternion", rotation_to_json(e.rotation)}, {"translation", e.translation}};
}

}  // namespace patchcad
