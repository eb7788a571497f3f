#include "histoprog/relevance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace histoprog {

namespace {

void check_weights(std::span<const double> weights, const char* who) {
  if (weights.empty()) throw ValidationError(std::string(who) + ": no items");
  for (const double w : weights) {
    if (!(w >= 0) || !std::isfinite(w)) throw ValidationError(std::string(who) + ": weights must be finite and >= 0");
  }
}

}  // namespace

std::vector<std::size_t> weighted_sample_with_replacement(std::span<const double> weights, std::size_t count,
                                                          std::uint64_t seed) {
  check_weights(weights, "weighted_sample_with_replacement");
  std::vector<double> cum(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cum.begin());
  const double total = cum.back();
  if (!(total > 0)) throw ValidationError("weighted_sample_with_replacement: all weights are zero");
  Rng rng(seed);
  std::vector<std::size_t> out(count);
  for (auto& o : out) {
    const double target = rng.uniform() * total;
    auto it = std::upper_bound(cum.begin(), cum.end(), target);
    if (it == cum.end()) --it;  // guards rounding at the top end
    o = std::size_t(it - cum.begin());
  }
  return out;
}

WeightedSubset weighted_sample_without_replacement(std::span<const double> weights, std::size_t count,
                                                   std::uint64_t seed) {
  check_weights(weights, "weighted_sample_without_replacement");
  Rng rng(seed);
  struct Key {
    double key;
    std::size_t item;
  };
  std::vector<Key> keys;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    const double u = rng.uniform_open();  // drawn for every item so keys do not depend on other weights
    if (weights[j] > 0) keys.push_back({std::log(u) / weights[j], j});
  }
  WeightedSubset out;
  out.shortfall = keys.size() < count;
  const std::size_t take = std::min(count, keys.size());
  std::partial_sort(keys.begin(), keys.begin() + std::ptrdiff_t(take), keys.end(), [](const Key& a, const Key& b) {
    if (a.key != b.key) return a.key > b.key;
    return a.item < b.item;
  });
  for (std::size_t i = 0; i < take; ++i) out.items.push_back(keys[i].item);
  return out;
}

PrognosisSample sample_prognosis_tiles(const std::string& hospital, std::span<const TileRef> tiles,
                                       std::size_t n_per_sign, std::uint64_t seed) {
  PrognosisSample out;
  out.hospital = hospital;
  std::vector<std::size_t> pos, neg;
  std::vector<double> wpos, wneg;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const double s = tiles[i].decision_score;
    if (!std::isfinite(s)) throw ValidationError("sample_prognosis_tiles: non-finite decision score");
    if (s > 0) {
      pos.push_back(i);
      wpos.push_back(s);
    } else if (s < 0) {
      neg.push_back(i);
      wneg.push_back(-s);
    } else {
      ++out.n_zero_excluded;
    }
  }
  out.n_positive_tiles = pos.size();
  out.n_negative_tiles = neg.size();
  if (pos.empty()) throw ValidationError("hospital " + hospital + " has no tiles with a positive decision score");
  if (neg.empty()) throw ValidationError("hospital " + hospital + " has no tiles with a negative decision score");
  const Rng base(seed);
  const auto hs = fnv1a64(hospital);
  for (const auto j : weighted_sample_with_replacement(wpos, n_per_sign, base.fork(hs ^ 1).next_u64())) {
    out.longer.push_back(pos[j]);
  }
  for (const auto j : weighted_sample_with_replacement(wneg, n_per_sign, base.fork(hs ^ 2).next_u64())) {
    out.shorter.push_back(neg[j]);
  }
  return out;
}

PatternStats pattern_stats(std::span<const SparseCode> codes, std::span<const HospitalCodes> hospitals,
                           std::size_t n_latents) {
  if (hospitals.empty()) throw ValidationError("pattern_stats: no hospitals");
  const std::size_t H = hospitals.size();
  PatternStats st;
  st.n_latents = n_latents;
  st.mean_longer = Matrix<double>(n_latents, H);
  st.mean_shorter = Matrix<double>(n_latents, H);
  st.diff = Matrix<double>(n_latents, H);

  auto accumulate = [&](const std::vector<std::size_t>& idx, std::size_t h, Matrix<double>& into) {
    std::vector<double> sum(n_latents, 0.0);
    for (const auto i : idx) {
      if (i >= codes.size()) throw ValidationError("pattern_stats: tile index out of range");
      const auto& c = codes[i];
      for (std::size_t t = 0; t < c.indices.size(); ++t) {
        if (c.indices[t] >= n_latents) throw ValidationError("pattern_stats: latent index out of range");
        sum[c.indices[t]] += c.activations[t];
      }
    }
    for (std::size_t l = 0; l < n_latents; ++l) into(l, h) = sum[l] / double(idx.size());
  };
  for (std::size_t h = 0; h < H; ++h) {
    const auto& hc = hospitals[h];
    if (hc.longer.empty() || hc.shorter.empty()) {
      throw ValidationError("pattern_stats: hospital " + hc.hospital + " is missing a survival group");
    }
    st.hospitals.push_back(hc.hospital);
    accumulate(hc.longer, h, st.mean_longer);
    accumulate(hc.shorter, h, st.mean_shorter);
  }

  st.mean_diff.resize(n_latents);
  st.mean_abs_diff.resize(n_latents);
  st.direction.resize(n_latents);
  st.sign_consistent.resize(n_latents);
  for (std::size_t l = 0; l < n_latents; ++l) {
    double sum = 0, abs_sum = 0;
    bool all_pos = true, all_neg = true;
    for (std::size_t h = 0; h < H; ++h) {
      const double d = st.mean_longer(l, h) - st.mean_shorter(l, h);
      st.diff(l, h) = d;
      sum += d;
      abs_sum += std::abs(d);
      all_pos = all_pos && d > 0;
      all_neg = all_neg && d < 0;
    }
    st.mean_diff[l] = sum / double(H);
    st.mean_abs_diff[l] = abs_sum / double(H);
    if (st.mean_diff[l] > 0) st.direction[l] = Direction::Longer;
    if (st.mean_diff[l] < 0) st.direction[l] = Direction::Shorter;
    st.sign_consistent[l] = all_pos || all_neg;
  }
  return st;
}

std::vector<SelectedPattern> select_top_patterns(const PatternStats& stats, std::size_t m) {
  if (m > stats.n_latents) throw ValidationError("select_top_patterns: m exceeds the number of latents");
  std::vector<std::uint32_t> order(stats.n_latents);
  std::iota(order.begin(), order.end(), std::uint32_t(0));
  std::stable_sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return stats.mean_abs_diff[a] > stats.mean_abs_diff[b];
  });
  std::vector<SelectedPattern> out;
  for (std::size_t i = 0; i < m; ++i) {
    const auto l = order[i];
    SelectedPattern p;
    p.latent = l;
    p.direction = stats.direction[l];
    p.mean_abs_diff = stats.mean_abs_diff[l];
    p.sign_consistent = stats.sign_consistent[l];
    for (std::size_t h = 0; h < stats.hospitals.size(); ++h) p.hospital_diffs.push_back(stats.diff(l, h));
    out.push_back(std::move(p));
  }
  return out;
}

WeightedSubset sample_example_tiles(std::uint32_t latent, std::span<const std::size_t> pool,
                                    std::span<const SparseCode> codes, std::size_t n, std::uint64_t seed) {
  if (pool.empty()) throw ValidationError("sample_example_tiles: empty tile pool");
  std::vector<std::size_t> unique(pool.begin(), pool.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<double> weights(unique.size());
  for (std::size_t i = 0; i < unique.size(); ++i) {
    if (unique[i] >= codes.size()) throw ValidationError("sample_example_tiles: tile index out of range");
    weights[i] = codes[unique[i]].activation(latent);
  }
  auto picked = weighted_sample_without_replacement(weights, n, seed);
  for (auto& item : picked.items) item = unique[item];
  return picked;
}

Matrix<double> pattern_similarity_matrix(const SaeParams<float>& params, std::span<const std::uint32_t> latents) {
  const std::size_t m = latents.size();
  std::vector<Eigen::VectorXd> cols;
  for (const auto l : latents) {
    if (l >= params.n_latents) throw ValidationError("pattern_similarity_matrix: latent out of range");
    Eigen::VectorXd c = params.dec_w.map().col(l).cast<double>();
    const double norm = c.norm();
    if (norm > 0) c /= norm;
    cols.push_back(std::move(c));
  }
  Matrix<double> S(m, m);
  for (std::size_t i = 0; i < m; ++i) {
    S(i, i) = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      const double v = std::clamp(cols[i].dot(cols[j]), -1.0, 1.0);
      S(i, j) = v;
      S(j, i) = v;
    }
  }
  return S;
}

}  // namespace histoprog
