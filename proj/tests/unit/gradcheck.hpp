#pragma once

// Central finite-difference check of masked_loss_and_grad on a toy SAE
// (d = 2, omega = 4, batch = 3) with the selection masks frozen.

#include <algorithm>
#include <random>

#include "debiaslens/training.hpp"

namespace testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  bool aux_active = false;
};

inline double block_rel_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
  return (analytic - numeric).norm() / scale;
}

inline GradCheckResult gradient_check(std::uint64_t seed, double l1_weight, double aux_weight) {
  using namespace debiaslens;
  constexpr double kEps = 1e-5;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  auto fill = [&](Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng);
  };

  SaeParams p;
  p.w_enc.resize(2, 4);
  p.w_dec.resize(4, 2);
  fill(p.w_enc);
  fill(p.w_dec);
  Eigen::MatrixXd biases(2, 2);
  fill(biases);
  p.b1 = 0.1 * biases.col(0);
  p.b2 = 0.1 * biases.col(1);
  p.prefix_schedule = {1, 2, 4};
  Eigen::MatrixXd batch(3, 2);
  fill(batch);

  // Latents 2 and 3 are dead so the auxiliary branch is exercised.
  DeadLatentTracker tracker(4, 1);
  tracker.set_steps_since_fire(2, 1);
  tracker.set_steps_since_fire(3, 1);
  const auto masks = compute_masks(batch, p, 2, tracker, 2);
  const LossWeights weights{l1_weight, aux_weight};

  ParamGrads g;
  masked_loss_and_grad(batch, p, masks, weights, g);

  auto numeric = [&](auto member) {
    Eigen::MatrixXd out = (p.*member);
    auto& target = p.*member;
    for (Eigen::Index i = 0; i < target.rows(); ++i) {
      for (Eigen::Index j = 0; j < target.cols(); ++j) {
        const double keep = target(i, j);
        target(i, j) = keep + kEps;
        const double up = masked_loss(batch, p, masks, weights).total;
        target(i, j) = keep - kEps;
        const double down = masked_loss(batch, p, masks, weights).total;
        target(i, j) = keep;
        out(i, j) = (up - down) / (2 * kEps);
      }
    }
    return out;
  };

  GradCheckResult r;
  for (const auto& m : masks) r.aux_active = r.aux_active || m.aux_active;
  r.max_rel_error = std::max({block_rel_error(g.w_enc, numeric(&SaeParams::w_enc)),
                              block_rel_error(g.w_dec, numeric(&SaeParams::w_dec)),
                              block_rel_error(g.b1, numeric(&SaeParams::b1)),
                              block_rel_error(g.b2, numeric(&SaeParams::b2))});
  return r;
}

}  // namespace testing
