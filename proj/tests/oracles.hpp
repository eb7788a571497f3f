#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <vector>

#include "histoprog/mil.hpp"
#include "histoprog/numerics.hpp"

namespace oracle {

/// Mann-Whitney statistic by enumerating every positive/negative pair.
inline double brute_force_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1;
      if (scores[i] > scores[j]) {
        wins += 1;
      } else if (scores[i] == scores[j]) {
        wins += 0.5;
      }
    }
  }
  return wins / pairs;
}

/// A random double-precision bag and model whose ReLU pre-activations all sit
/// at least `margin` away from zero, so central differences never straddle a kink.
struct MilInstance {
  histoprog::MilParams<double> params;
  histoprog::Matrix<double> tiles;
  int label = 0;
};

inline double relu_margin(const MilInstance& inst) {
  using namespace histoprog;
  const auto& p = inst.params;
  double margin = INFINITY;
  const auto fwd = forward<double>(p, inst.tiles);
  const auto alpha = softmax<double>(fwd.attention_logits);
  for (std::size_t i = 0; i < inst.tiles.rows(); ++i) {
    const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(inst.tiles.row(i).data(), Eigen::Index(p.dim));
    const Eigen::VectorXd raw = p.proj_w() * x;
    const Eigen::VectorXd z = raw + p.proj_b();
    margin = std::min(margin, z.cwiseAbs().minCoeff());
    if (p.variant == MilVariant::AdditiveMil) {
      const Eigen::VectorXd z2 = alpha[i] * raw + p.proj_b();
      margin = std::min(margin, z2.cwiseAbs().minCoeff());
    }
  }
  return margin;
}

inline MilInstance random_mil_instance(histoprog::MilVariant variant, std::size_t dim, histoprog::Rng& rng,
                                       double margin = 1e-4) {
  using namespace histoprog;
  for (;;) {
    MilInstance inst;
    inst.params = init_mil<double>(dim, variant, rng.next_u64());
    // Non-zero biases so that every block of the gradient is exercised.
    for (double& v : inst.params.flat) v += 0.05 * rng.normal();
    const std::size_t n = 1 + rng.uniform_index(8);
    inst.tiles = Matrix<double>(n, dim);
    for (double& v : inst.tiles.values()) v = rng.normal();
    inst.label = int(rng.uniform_index(2));
    if (relu_margin(inst) >= margin) return inst;
  }
}

/// Max over checked coordinates of |analytic - fd|, divided by the largest
/// finite-difference magnitude. Checks every coordinate when `per_block` is 0,
/// otherwise `per_block` random coordinates from each parameter block.
inline double mil_fd_relative_error(const MilInstance& inst, std::size_t per_block, histoprog::Rng& rng) {
  using namespace histoprog;
  const auto analytic = backward<double>(inst.params, inst.tiles, inst.label);
  const MilLayout L(inst.params.dim);
  const std::size_t bounds[] = {L.proj_w, L.proj_b, L.attn_v, L.attn_b, L.attn_w, L.attn_c, L.pred_u, L.pred_c, L.total};
  std::vector<std::size_t> coords;
  for (std::size_t b = 0; b + 1 < std::size(bounds); ++b) {
    const std::size_t lo = bounds[b], len = bounds[b + 1] - bounds[b];
    if (per_block == 0 || len <= per_block) {
      for (std::size_t i = 0; i < len; ++i) coords.push_back(lo + i);
    } else {
      std::vector<std::size_t> all(len);
      for (std::size_t i = 0; i < len; ++i) all[i] = lo + i;
      rng.shuffle(all.begin(), all.end());
      coords.insert(coords.end(), all.begin(), all.begin() + std::ptrdiff_t(per_block));
    }
  }
  std::vector<double> sub(coords.size());
  for (std::size_t i = 0; i < coords.size(); ++i) sub[i] = inst.params.flat[coords[i]];
  MilParams<double> work = inst.params;
  const auto fd = finite_diff_gradient(
      [&](std::span<const double> values) {
        for (std::size_t i = 0; i < coords.size(); ++i) work.flat[coords[i]] = values[i];
        return bag_loss<double>(work, inst.tiles, inst.label);
      },
      sub);
  double err = 0, scale = 0;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    err = std::max(err, std::abs(analytic.flat[coords[i]] - fd[i]));
    scale = std::max(scale, std::abs(fd[i]));
  }
  return scale > 0 ? err / scale : err;
}

}  // namespace oracle
