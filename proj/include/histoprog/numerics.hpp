#pragma once

// Numerical kernels shared by the MIL and SAE models: a row-major matrix,
// stable softmax / BCE, Adam(W), learning-rate schedules, a seeded RNG and a
// central-difference gradient oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "histoprog/errors.hpp"

namespace histoprog {

template <typename T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMajorMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix<T>>;
template <typename T>
using VectorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstVectorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

/// Dense row-major matrix owning its storage.
template <typename T>
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<T> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ValidationError("matrix value count does not match shape");
    }
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }

  std::span<T> values() { return values_; }
  std::span<const T> values() const { return values_; }
  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }

  MatrixMap<T> map() { return {values_.data(), Eigen::Index(rows_), Eigen::Index(cols_)}; }
  ConstMatrixMap<T> map() const {
    return {values_.data(), Eigen::Index(rows_), Eigen::Index(cols_)};
  }

  template <typename U>
  Matrix<U> cast() const {
    return Matrix<U>(rows_, cols_, std::vector<U>(values_.begin(), values_.end()));
  }

  bool all_finite() const {
    for (const T v : values_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> values_;
};

// ---------------------------------------------------------------------------
// Random numbers

/// xoshiro256** seeded through splitmix64. Every random draw in the project
/// goes through this generator so a seed fully determines all outputs.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  /// Independent generator for a named sub-stream, e.g. one per patient.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform in (0, 1], safe to take the log of.
  double uniform_open();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n), unbiased.
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller (no cached second variate).
  double normal();
  double exponential(double rate) { return -std::log(uniform_open()) / rate; }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_index(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

 private:
  Rng() = default;
  std::uint64_t s_[4] = {0, 0, 0, 0};
  std::uint64_t seed_ = 0;
};

std::uint64_t splitmix64(std::uint64_t& state);

/// 64-bit FNV-1a; used to derive stream ids from strings and for config hashes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

// ---------------------------------------------------------------------------
// Scalar / vector kernels

template <typename T>
T log_sum_exp(std::span<const T> values) {
  if (values.empty()) throw ValidationError("log_sum_exp: empty input");
  T max_v = values[0];
  for (const T v : values) max_v = std::max(max_v, v);
  T sum = 0;
  for (const T v : values) sum += std::exp(v - max_v);
  return max_v + std::log(sum);
}

template <typename T>
std::vector<T> softmax(std::span<const T> values) {
  if (values.empty()) throw ValidationError("softmax: empty input");
  T max_v = values[0];
  for (const T v : values) max_v = std::max(max_v, v);
  std::vector<T> out(values.size());
  T sum = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] - max_v);
    sum += out[i];
  }
  for (T& v : out) v /= sum;
  return out;
}

template <typename T>
T sigmoid(T z) {
  if (z >= 0) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

/// log(1 + exp(z)) without overflow.
template <typename T>
T softplus(T z) {
  return std::max(z, T(0)) + std::log1p(std::exp(-std::abs(z)));
}

/// Binary cross entropy on a logit: -[y log s(z) + (1-y) log(1 - s(z))].
template <typename T>
T bce_with_logits(T logit, int label) {
  if (label != 0 && label != 1) throw ValidationError("bce_with_logits: label must be 0 or 1");
  // -log s(z) = softplus(-z), -log(1 - s(z)) = softplus(z)
  return label == 1 ? softplus(-logit) : softplus(logit);
}

// ---------------------------------------------------------------------------
// Optimizers

template <typename T>
struct OptimState {
  std::vector<T> first_moment;
  std::vector<T> second_moment;
  std::uint64_t step_count = 0;

  OptimState() = default;
  explicit OptimState(std::size_t n) : first_moment(n, T(0)), second_moment(n, T(0)) {}
};

template <typename T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
  T weight_decay = T(0);  // decoupled (AdamW); 0 gives plain Adam
};

/// One AdamW step with bias-corrected moments and decoupled weight decay.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, OptimState<T>& state,
                const AdamConfig<T>& cfg);

// ---------------------------------------------------------------------------
// Learning-rate schedules

enum class ScheduleKind { CosineNoWarmup, LinearTailDecay, Constant };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double base_lr = 0.0;
  std::uint64_t total_steps = 0;
  double tail_fraction = 0.2;  // LinearTailDecay only
};

/// Learning rate at optimizer step `step` (0-based), 0 <= step <= total_steps.
double schedule_lr(const LrSchedule& schedule, std::uint64_t step);

// ---------------------------------------------------------------------------
// Gradient oracle

using LossFn = std::function<double(std::span<const double>)>;

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
std::vector<double> finite_diff_gradient(const LossFn& loss_fn, std::span<const double> params,
                                         double h = 1e-5);

}  // namespace histoprog
