#include "histoprog/numerics.hpp"

#include <numbers>

namespace histoprog {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (const char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : s_) s = splitmix64(sm);
}

Rng Rng::fork(std::uint64_t stream) const {
  std::uint64_t sm = seed_ ^ (stream * 0xd1b54a32d192ed03ULL);
  return Rng(splitmix64(sm) ^ 0x5851f42d4c957f2dULL);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform_open() { return (double(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

std::uint64_t Rng::uniform_index(std::uint64_t n) {
  if (n == 0) throw ValidationError("uniform_index: empty range");
  // Lemire's multiply-shift with rejection.
  unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<unsigned __int128>(next_u64()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double Rng::normal() {
  const double u1 = uniform_open();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, OptimState<T>& state,
                const AdamConfig<T>& cfg) {
  if (params.size() != grads.size() || state.first_moment.size() != params.size() ||
      state.second_moment.size() != params.size()) {
    throw ValidationError("adamw_step: parameter, gradient and state shapes differ");
  }
  state.step_count += 1;
  const auto t = static_cast<T>(state.step_count);
  const T bias1 = T(1) - std::pow(cfg.beta1, t);
  const T bias2 = T(1) - std::pow(cfg.beta2, t);
  const T decay = T(1) - cfg.lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T g = grads[i];
    T& m = state.first_moment[i];
    T& v = state.second_moment[i];
    m = cfg.beta1 * m + (T(1) - cfg.beta1) * g;
    v = cfg.beta2 * v + (T(1) - cfg.beta2) * g * g;
    const T m_hat = m / bias1;
    const T v_hat = v / bias2;
    params[i] *= decay;
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

template void adamw_step<float>(std::span<float>, std::span<const float>, OptimState<float>&,
                                const AdamConfig<float>&);
template void adamw_step<double>(std::span<double>, std::span<const double>, OptimState<double>&,
                                 const AdamConfig<double>&);

double schedule_lr(const LrSchedule& schedule, std::uint64_t step) {
  if (step > schedule.total_steps) {
    throw ValidationError("schedule_lr: step " + std::to_string(step) + " exceeds total_steps " +
                          std::to_string(schedule.total_steps));
  }
  const double base = schedule.base_lr;
  switch (schedule.kind) {
    case ScheduleKind::Constant:
      return base;
    case ScheduleKind::CosineNoWarmup: {
      if (schedule.total_steps == 0) return base;
      const double frac = double(step) / double(schedule.total_steps);
      return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
    }
    case ScheduleKind::LinearTailDecay: {
      const double total = double(schedule.total_steps);
      const double tail = schedule.tail_fraction * total;
      const double start = total - tail;
      if (double(step) < start || tail <= 0.0) return base;
      return std::max(0.0, base * (total - double(step)) / tail);
    }
  }
  return base;
}

std::vector<double> finite_diff_gradient(const LossFn& loss_fn, std::span<const double> params,
                                         double h) {
  std::vector<double> probe(params.begin(), params.end());
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = loss_fn(probe);
    probe[i] = orig - h;
    const double down = loss_fn(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace histoprog
