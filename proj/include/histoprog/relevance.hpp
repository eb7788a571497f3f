#pragma once

// Decision-score-weighted tile sampling, per-hospital pattern differencing
// and top pattern selection.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "histoprog/data_model.hpp"
#include "histoprog/sae.hpp"

namespace histoprog {

struct TileRef {
  std::string patient_id;
  std::string hospital;
  std::uint32_t tile_index = 0;
  std::int32_t grid_x = 0;
  std::int32_t grid_y = 0;
  double decision_score = 0;
};

/// i.i.d. draws of item indices with P(j) = w_j / sum(w).
std::vector<std::size_t> weighted_sample_with_replacement(std::span<const double> weights, std::size_t count,
                                                          std::uint64_t seed);

struct WeightedSubset {
  std::vector<std::size_t> items;  // distinct, in key order (strongest first)
  bool shortfall = false;          // fewer positively weighted items than requested
};

/// Efraimidis-Spirakis: key_j = u_j^(1/w_j), the `count` largest keys win.
/// Zero-weight items are never chosen.
WeightedSubset weighted_sample_without_replacement(std::span<const double> weights, std::size_t count,
                                                   std::uint64_t seed);

struct PrognosisSample {
  std::string hospital;
  std::vector<std::size_t> longer;   // indices into the hospital's tiles, with multiplicity
  std::vector<std::size_t> shorter;
  std::size_t n_positive_tiles = 0;
  std::size_t n_negative_tiles = 0;
  std::size_t n_zero_excluded = 0;
};

/// Splits one hospital's tiles by the sign of their decision score and draws
/// n_per_sign tiles from each side with replacement, weighted by |score|.
PrognosisSample sample_prognosis_tiles(const std::string& hospital, std::span<const TileRef> tiles,
                                       std::size_t n_per_sign, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Pattern statistics

/// Sampled tiles of one hospital as indices into a shared table of codes.
struct HospitalCodes {
  std::string hospital;
  std::vector<std::size_t> longer;
  std::vector<std::size_t> shorter;
};

struct PatternStats {
  std::size_t n_latents = 0;
  std::vector<std::string> hospitals;
  Matrix<double> mean_longer;   // n_latents x n_hospitals
  Matrix<double> mean_shorter;
  Matrix<double> diff;          // mean_longer - mean_shorter
  std::vector<double> mean_diff;
  std::vector<double> mean_abs_diff;
  std::vector<std::optional<Direction>> direction;  // empty when mean_diff == 0
  std::vector<bool> sign_consistent;                // all hospital diffs share one non-zero sign
};

/// Means over the sampled multisets; absent latents count as activation 0.
PatternStats pattern_stats(std::span<const SparseCode> codes, std::span<const HospitalCodes> hospitals,
                           std::size_t n_latents);

struct SelectedPattern {
  std::uint32_t latent = 0;
  std::optional<Direction> direction;
  double mean_abs_diff = 0;
  std::vector<double> hospital_diffs;
  bool sign_consistent = false;
};

/// Descending mean_abs_diff, ties to the lower latent index.
std::vector<SelectedPattern> select_top_patterns(const PatternStats& stats, std::size_t m);

/// Draws up to n distinct pool entries weighted by the latent's activation.
/// The pool is deduplicated first; `items` index into `codes`.
WeightedSubset sample_example_tiles(std::uint32_t latent, std::span<const std::size_t> pool,
                                    std::span<const SparseCode> codes, std::size_t n, std::uint64_t seed);

/// Pairwise cosine similarity of the selected decoder columns.
Matrix<double> pattern_similarity_matrix(const SaeParams<float>& params, std::span<const std::uint32_t> latents);

}  // namespace histoprog
