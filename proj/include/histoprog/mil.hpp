#pragma once

// Attention MIL over tile-embedding bags.
//
// All three variants share one network: a trunk h = relu(W x + b) with 256
// units, an attention head a(x) = w . tanh(V h + c_v) + c and a linear
// predictor p(x) = u . h + c_p. They differ only in how tiles are pooled:
//
//   AbmilIb      logit = sum_i softmax(a)_i p(x_i)
//   Abmil        logit = u . (sum_i softmax(a)_i h_i) + c_p
//   AdditiveMil  logit = sum_i [u . relu(softmax(a)_i (W x_i) + b) + c_p / n]
//
// For AbmilIb the per-tile decision score s_i = exp(a(x_i)) p(x_i) satisfies
// logit = sum_i s_i / sum_j exp(a(x_j)), and s_i depends on x_i alone.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "histoprog/data_model.hpp"
#include "histoprog/numerics.hpp"

namespace histoprog {

enum class MilVariant { AbmilIb, Abmil, AdditiveMil };

std::string to_string(MilVariant v);
MilVariant parse_mil_variant(const std::string& name);

inline constexpr std::size_t kMilHidden = 256;
inline constexpr std::size_t kMilAttention = 128;

/// Offsets of each parameter block inside MilParams::flat, in checkpoint order.
struct MilLayout {
  std::size_t proj_w, proj_b, attn_v, attn_b, attn_w, attn_c, pred_u, pred_c, total;
  explicit MilLayout(std::size_t dim);
};

std::size_t mil_param_count(std::size_t dim);

template <typename T>
struct MilParams {
  MilVariant variant = MilVariant::AbmilIb;
  std::size_t dim = 0;
  std::vector<T> flat;  // proj_w, proj_b, attn_v, attn_b, attn_w, attn_c, pred_u, pred_c

  MilLayout layout() const { return MilLayout(dim); }
  std::size_t size() const { return flat.size(); }

  ConstMatrixMap<T> proj_w() const { return {flat.data() + layout().proj_w, Eigen::Index(kMilHidden), Eigen::Index(dim)}; }
  ConstVectorMap<T> proj_b() const { return {flat.data() + layout().proj_b, Eigen::Index(kMilHidden)}; }
  ConstMatrixMap<T> attn_v() const {
    return {flat.data() + layout().attn_v, Eigen::Index(kMilAttention), Eigen::Index(kMilHidden)};
  }
  ConstVectorMap<T> attn_b() const { return {flat.data() + layout().attn_b, Eigen::Index(kMilAttention)}; }
  ConstVectorMap<T> attn_w() const { return {flat.data() + layout().attn_w, Eigen::Index(kMilAttention)}; }
  T attn_c() const { return flat[layout().attn_c]; }
  T& attn_c() { return flat[layout().attn_c]; }
  ConstVectorMap<T> pred_u() const { return {flat.data() + layout().pred_u, Eigen::Index(kMilHidden)}; }
  T pred_c() const { return flat[layout().pred_c]; }
  T& pred_c() { return flat[layout().pred_c]; }

  template <typename U>
  MilParams<U> cast() const {
    return {variant, dim, std::vector<U>(flat.begin(), flat.end())};
  }

  bool all_finite() const;
};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
template <typename T>
MilParams<T> init_mil(std::size_t dim, MilVariant variant, std::uint64_t seed);

template <typename T>
struct BagForward {
  T logit = 0;
  T p_longer = 0;
  std::vector<T> attention_logits;  // a(x_i)
  std::vector<T> tile_predictions;  // p(x_i)
  std::vector<T> decision_scores;   // exp(a(x_i)) p(x_i)
};

/// Forward pass over an n_tiles x dim matrix. Each tile is evaluated on its own,
/// so per-tile outputs are bit-identical whatever else is in the bag.
template <typename T>
BagForward<T> forward(const MilParams<T>& params, const Matrix<T>& tiles);

BagForward<float> forward(const MilParams<float>& params, const EmbeddingBag& bag);

template <typename T>
struct MilGradient {
  T loss = 0;
  T logit = 0;
  std::vector<T> flat;  // same layout as MilParams::flat
};

/// Exact gradient of bce_with_logits(logit, label) with respect to every parameter.
template <typename T>
MilGradient<T> backward(const MilParams<T>& params, const Matrix<T>& tiles, int label);

/// BCE loss of one bag; convenient for finite-difference checks.
template <typename T>
T bag_loss(const MilParams<T>& params, const Matrix<T>& tiles, int label);

// ---------------------------------------------------------------------------
// Training

struct MilTrainConfig {
  double lr = 5e-5;
  double weight_decay = 1e-2;
  std::size_t epochs = 16;
  std::size_t grad_accum_steps = 32;
  ScheduleKind schedule = ScheduleKind::CosineNoWarmup;
  std::uint64_t seed = 0;
};

std::uint64_t mil_total_steps(std::size_t n_train, const MilTrainConfig& config);

template <typename T>
struct MilExample {
  const Matrix<T>* tiles = nullptr;
  int label = 0;  // 0 = Shorter, 1 = Longer
};

struct MilEpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double train_auroc = 0;  // NaN when a class is missing
  double val_loss = 0;     // NaN without validation data
  double val_auroc = 0;
  double last_lr = 0;
};

struct MilTrainLog {
  std::vector<MilEpochLog> epochs;
  std::uint64_t optimizer_steps = 0;
};

template <typename T>
struct MilTrainResult {
  MilParams<T> params;
  MilTrainLog log;
};

/// Batch size 1, gradients averaged over `grad_accum_steps` bags per AdamW
/// step (a trailing partial window still steps), per-step learning-rate
/// schedule, final-epoch weights returned.
template <typename T>
MilTrainResult<T> train_mil(std::span<const MilExample<T>> train, std::span<const MilExample<T>> val,
                            const MilTrainConfig& config, MilParams<T> init);

template <typename T>
MilTrainResult<T> train_mil(std::span<const MilExample<T>> train, std::span<const MilExample<T>> val,
                            const MilTrainConfig& config, std::size_t dim, MilVariant variant) {
  return train_mil(train, val, config, init_mil<T>(dim, variant, config.seed));
}

// ---------------------------------------------------------------------------
// Inference helpers

/// Longer iff p_longer >= threshold.
SurvivalGroup predict_group(const MilParams<float>& params, const EmbeddingBag& bag, double threshold = 0.5);
SurvivalGroup group_from_probability(double p_longer, double threshold = 0.5);

struct TileScore {
  std::int32_t grid_x = 0;
  std::int32_t grid_y = 0;
  float attention_logit = 0;
  float tile_prediction = 0;
  float decision_score = 0;
};

struct TileScoreSet {
  std::vector<TileScore> tiles;
  /// False for Abmil / AdditiveMil, whose logits are not a sum of these scores.
  bool scores_decompose_prediction = true;
};

TileScoreSet score_tiles(const MilParams<float>& params, const EmbeddingBag& bag);

// ---------------------------------------------------------------------------
// Checkpoints (MILP)

void write_mil_checkpoint(const MilParams<float>& params, const std::filesystem::path& path);
MilParams<float> read_mil_checkpoint(const std::filesystem::path& path);

}  // namespace histoprog
