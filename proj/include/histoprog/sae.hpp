#pragma once

// TopK sparse autoencoder over tile embeddings.
//
// Inputs are first multiplied by a cohort-level scalar `input_scale`; then
//   u    = enc_w (scale x - pre_b) + enc_b
//   code = rectified top-K entries of u
//   x^   = pre_b + dec_w code          (scaled space)
// decode() divides by input_scale again, so callers only see raw embeddings.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "histoprog/numerics.hpp"

namespace histoprog {

struct SparseCode {
  std::vector<std::uint32_t> indices;  // strictly increasing
  std::vector<float> activations;      // all > 0
  std::size_t n_latents = 0;

  std::size_t size() const { return indices.size(); }
  /// Activation of `latent`, 0 when absent.
  float activation(std::uint32_t latent) const;
  friend bool operator==(const SparseCode&, const SparseCode&) = default;
};

template <typename T>
struct SaeParams {
  std::size_t dim = 0;
  std::size_t n_latents = 0;
  std::size_t k = 0;
  double input_scale = 1.0;
  Matrix<T> enc_w;        // n_latents x dim
  std::vector<T> enc_b;   // n_latents
  Matrix<T> dec_w;        // dim x n_latents, columns are the basis vectors
  std::vector<T> pre_b;   // dim, scaled space

  template <typename U>
  SaeParams<U> cast() const {
    return {dim, n_latents, k, input_scale, enc_w.template cast<U>(),
            std::vector<U>(enc_b.begin(), enc_b.end()), dec_w.template cast<U>(),
            std::vector<U>(pre_b.begin(), pre_b.end())};
  }
  friend bool operator==(const SaeParams&, const SaeParams&) = default;
};

/// pre_b = mean of the sample, decoder columns random unit vectors, enc_w = dec_wᵀ, enc_b = 0.
template <typename T>
SaeParams<T> init_sae(std::size_t dim, std::size_t n_latents, std::size_t k, const Matrix<float>& data_sample,
                      std::uint64_t seed);

/// Top-K of the given pre-activations, ties to the lower index, non-positive survivors dropped.
template <typename T>
SparseCode topk_code(std::span<const T> pre_activations, std::size_t k);

template <typename T>
std::vector<T> pre_activations(const SaeParams<T>& params, std::span<const T> x);

template <typename T>
SparseCode encode_topk(const SaeParams<T>& params, std::span<const T> x);

/// Encodes every row; uses blocked matrix products, same result as encode_topk row by row.
std::vector<SparseCode> encode_batch(const SaeParams<float>& params, const Matrix<float>& rows);

template <typename T>
std::vector<T> decode(const SaeParams<T>& params, const SparseCode& code);

// ---------------------------------------------------------------------------
// Training

struct SaeTrainConfig {
  double lr = 5e-5;
  std::size_t epochs = 8;
  std::size_t batch_size = 16384;
  double tail_fraction = 0.2;
  std::uint64_t seed = 0;
  double norm_target = 0;  // 0 means sqrt(dim)
};

struct SaeGradient {
  double loss = 0;  // mean squared error over batch and dimensions, scaled space
  std::vector<double> enc_w, enc_b, dec_w, pre_b;
};

/// Reconstruction loss of a batch of raw rows and its gradient (top-K support held fixed).
template <typename T>
SaeGradient sae_loss_and_gradient(const SaeParams<T>& params, const Matrix<T>& batch);

template <typename T>
double sae_loss(const SaeParams<T>& params, const Matrix<T>& batch);

struct SaeTrainLog {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;  // mean of step losses per epoch
  std::uint64_t optimizer_steps = 0;
};

struct SaeTrainResult {
  SaeParams<float> params;
  SaeTrainLog log;
};

/// Called after every optimizer step (post-renormalisation).
using SaeStepHook = std::function<void(std::uint64_t step, const SaeParams<float>& params)>;

/// Adam without weight decay on the reconstruction MSE; decoder columns are
/// renormalised after each step; lr is constant, then linear to zero over the
/// final tail_fraction of steps. Sets input_scale so the mean distance of a
/// scaled row to the mean equals norm_target.
SaeTrainResult train_sae(const Matrix<float>& tiles, const SaeTrainConfig& config, SaeParams<float> params,
                         const SaeStepHook& on_step = {});

// ---------------------------------------------------------------------------
// Diagnostics

struct LatentFrequency {
  std::uint32_t latent = 0;
  double frequency = 0;
};

struct DeadLatentReport {
  std::vector<LatentFrequency> latents;  // frequency descending, then index
  std::size_t n_dead = 0;
  std::size_t n_samples = 0;
};

DeadLatentReport dead_latent_report(const SaeParams<float>& params, const Matrix<float>& sample);

struct AtomMatch {
  std::size_t atom = 0;
  std::uint32_t latent = 0;
  double cosine = 0;
};

/// Greedy one-to-one matching of true atoms (rows, unit norm) to decoder columns by cosine similarity.
std::vector<AtomMatch> match_dictionary(const SaeParams<float>& params, const Matrix<double>& true_atoms);

double fraction_matched(std::span<const AtomMatch> matches, double min_cosine);

// ---------------------------------------------------------------------------
// Files

void write_sae_checkpoint(const SaeParams<float>& params, const std::filesystem::path& path);
SaeParams<float> read_sae_checkpoint(const std::filesystem::path& path);

/// ACT1: magic, u32 version, u32 n_latents, u64 n_tiles, then per tile u32 count and (u32, f32) pairs.
void write_activation_dump(std::span<const SparseCode> codes, std::size_t n_latents,
                           const std::filesystem::path& path);
std::vector<SparseCode> read_activation_dump(const std::filesystem::path& path);

}  // namespace histoprog
