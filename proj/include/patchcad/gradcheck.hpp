#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "patchcad/embed.hpp"
#include "patchcad/pose.hpp"
#include "patchcad/random.hpp"

namespace patchcad {

// Central finite differences against the analytic gradients of the embedding
// loss and the pose loss on small randomized problems.
struct GradcheckOptions {
  std::size_t batches = 20;
  double step = 1e-4;
  // Denominator floor for the relative error, so that partials that are zero
  // up to rounding do not dominate.
  double floor = 1e-6;
  std::uint64_t seed = 0;
};

struct GradcheckReport {
  std::string name;
  std::size_t batches = 0;
  std::size_t partials = 0;
  double max_rel_error = 0.0;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace detail {

inline void fill_gaussian(double* data, Eigen::Index n, double scale, Rng& rng) {
  for (Eigen::Index i = 0; i < n; ++i) data[i] = scale * gaussian(rng);
}

// ReLU kinks break finite differences; reject draws with a pre-activation
// closer to zero than the perturbation can move it.
inline bool away_from_kinks(const Tower& t, const MatrixXd& x, double margin) {
  const MatrixXd z = (t.w1 * x).colwise() + t.b1;
  return (z.array().abs() > margin).all();
}

struct EmbedProblem {
  TowerParams params;
  MatrixXd anchors;
  MatrixXd candidates;
  std::vector<AnchorPairs> pairs;
};

inline EmbedProblem random_embed_problem(Rng& rng) {
  constexpr Eigen::Index kImageIn = 6, kShapeIn = 9, kHidden = 5, kEmbed = 4, kAnchors = 8, kCandidates = 12;
  EmbedProblem p;
  while (true) {
    p.params = {Tower::zeros(kImageIn, kHidden, kEmbed), Tower::zeros(kShapeIn, kHidden, kEmbed)};
    p.params.for_each_block([&](double* d, Eigen::Index n) { fill_gaussian(d, n, 0.7, rng); });
    p.anchors.resize(kImageIn, kAnchors);
    p.candidates.resize(kShapeIn, kCandidates);
    fill_gaussian(p.anchors.data(), p.anchors.size(), 1.0, rng);
    fill_gaussian(p.candidates.data(), p.candidates.size(), 1.0, rng);
    if (away_from_kinks(p.params.image, p.anchors, 1e-2) && away_from_kinks(p.params.shape, p.candidates, 1e-2)) break;
  }
  p.pairs.clear();
  for (std::uint32_t a = 0; a < kAnchors; ++a) {
    std::vector<std::uint32_t> ids(kCandidates);
    for (std::uint32_t i = 0; i < kCandidates; ++i) ids[i] = i;
    shuffle(ids, rng);
    const std::size_t npos = 1 + uniform_index(rng, 3);
    const std::size_t nneg = 1 + uniform_index(rng, kCandidates - npos);
    AnchorPairs ap;
    ap.anchor = a;
    ap.positives.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(npos));
    ap.negatives.assign(ids.begin() + static_cast<std::ptrdiff_t>(npos),
                        ids.begin() + static_cast<std::ptrdiff_t>(npos + nneg));
    p.pairs.push_back(std::move(ap));
  }
  return p;
}

}  // namespace detail

inline GradcheckReport gradcheck_embedding(const GradcheckOptions& opt, double tau = 0.15, double c = 24.0) {
  Rng rng = make_rng(opt.seed, 0x67636bull);
  GradcheckReport rep{"nce_loss", opt.batches, 0, 0.0};
  for (std::size_t b = 0; b < opt.batches; ++b) {
    detail::EmbedProblem p = detail::random_embed_problem(rng);
    auto loss = [&](const TowerParams& params) {
      return nce_loss_and_grad(params, p.anchors, p.candidates, p.pairs, tau, c).loss;
    };
    LossAndGrad analytic = nce_loss_and_grad(p.params, p.anchors, p.candidates, p.pairs, tau, c);
    std::vector<double> grads;
    analytic.grad.for_each_block([&](double* d, Eigen::Index n) { grads.insert(grads.end(), d, d + n); });
    std::size_t flat = 0;
    TowerParams work = p.params;
    work.for_each_block([&](double* d, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i, ++flat) {
        const double saved = d[i];
        d[i] = saved + opt.step;
        const double up = loss(work);
        d[i] = saved - opt.step;
        const double down = loss(work);
        d[i] = saved;
        const double numeric = (up - down) / (2.0 * opt.step);
        rep.max_rel_error = std::max(rep.max_rel_error, relative_error(grads[flat], numeric, opt.floor));
        ++rep.partials;
      }
    });
  }
  return rep;
}

namespace detail {

template <typename Fn>
void for_each_pose_param(PoseHeadParams& h, Fn&& fn) {
  for (Eigen::Index i = 0; i < h.weight.size(); ++i) fn(h.weight.data()[i]);
  for (Eigen::Index i = 0; i < h.bias.size(); ++i) fn(h.bias(i));
}

// Rejects draws where a Huber residual sits on the kink at +-delta or the
// offset is nearly orthogonal to its target (the sign alignment flips there).
inline bool pose_problem_is_smooth(const PoseHeadParams& h, const MatrixXd& x, const std::vector<PoseTarget>& t,
                                   double delta) {
  for (Eigen::Index s = 0; s < x.cols(); ++s) {
    const VectorXd col = x.col(s);
    const PosePrediction p = pose_forward(h, std::span<const double>(col.data(), static_cast<std::size_t>(col.size())));
    const double dot = quat_dot(p.offset, t[static_cast<std::size_t>(s)].offset);
    if (std::abs(dot) < 1e-2) return false;
    const Rotation aligned = dot < 0 ? p.offset.negated() : p.offset;
    const auto a = aligned.wxyz();
    const auto g = t[static_cast<std::size_t>(s)].offset.wxyz();
    for (int i = 0; i < 4; ++i) {
      if (std::abs(std::abs(a[i] - g[i]) - delta) < 1e-2) return false;
    }
    for (int i = 0; i < 2; ++i) {
      if (std::abs(std::abs(p.translation[i] - t[static_cast<std::size_t>(s)].translation[i]) - delta) < 1e-2) {
        return false;
      }
    }
  }
  return true;
}

}  // namespace detail

inline GradcheckReport gradcheck_pose(const GradcheckOptions& opt, double delta = 1.0) {
  Rng rng = make_rng(opt.seed, 0x706763ull);
  constexpr std::size_t kBins = 4, kFeatures = 5, kSamples = 6;
  GradcheckReport rep{"pose_loss", opt.batches, 0, 0.0};
  for (std::size_t b = 0; b < opt.batches; ++b) {
    PoseHeadParams head = PoseHeadParams::zeros(kBins, kFeatures);
    MatrixXd x(static_cast<Eigen::Index>(kFeatures), static_cast<Eigen::Index>(kSamples));
    std::vector<PoseTarget> targets;
    do {
      detail::fill_gaussian(head.weight.data(), head.weight.size(), 0.5, rng);
      detail::fill_gaussian(head.bias.data(), head.bias.size(), 0.5, rng);
      detail::fill_gaussian(x.data(), x.size(), 1.0, rng);
      targets.clear();
      for (std::size_t s = 0; s < kSamples; ++s) {
        // translations spread wide enough to reach the linear Huber branch
        targets.push_back({uniform_index(rng, kBins), random_rotation(rng),
                           {3.0 * gaussian(rng), 3.0 * gaussian(rng)}});
      }
    } while (!detail::pose_problem_is_smooth(head, x, targets, delta));

    const PoseLossAndGrad analytic = pose_loss_and_grad(head, x, targets, delta);
    std::vector<double> grads;
    PoseHeadParams g = analytic.grad;
    detail::for_each_pose_param(g, [&](double& v) { grads.push_back(v); });
    std::size_t flat = 0;
    detail::for_each_pose_param(head, [&](double& v) {
      const double saved = v;
      v = saved + opt.step;
      const double up = pose_loss_and_grad(head, x, targets, delta).loss;
      v = saved - opt.step;
      const double down = pose_loss_and_grad(head, x, targets, delta).loss;
      v = saved;
      const double numeric = (up - down) / (2.0 * opt.step);
      rep.max_rel_error = std::max(rep.max_rel_error, relative_error(grads[flat++], numeric, opt.floor));
      ++rep.partials;
    });
  }
  return rep;
}

}  // namespace patchcad
