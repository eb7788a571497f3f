#include "histoprog/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "histoprog/binary_io.hpp"

namespace histoprog {

float SparseCode::activation(std::uint32_t latent) const {
  const auto it = std::lower_bound(indices.begin(), indices.end(), latent);
  if (it == indices.end() || *it != latent) return 0.0f;
  return activations[std::size_t(it - indices.begin())];
}

namespace {

constexpr std::size_t kEncodeChunk = 1024;

template <typename T>
struct Selected {
  std::uint32_t index;
  T value;
};

// Top-k by (value desc, index asc), scanning in index order so an equal value
// never displaces an earlier index. Non-positive survivors are dropped and the
// result is sorted by index.
template <typename T>
void select_topk(const T* u, std::size_t n, std::size_t k, std::vector<Selected<T>>& out) {
  out.clear();
  if (k == 0) return;
  for (std::size_t j = 0; j < n; ++j) {
    const T v = u[j];
    if (out.size() == k && !(v > out.back().value)) continue;
    auto pos = std::upper_bound(out.begin(), out.end(), v,
                                [](T value, const Selected<T>& s) { return value > s.value; });
    out.insert(pos, {std::uint32_t(j), v});
    if (out.size() > k) out.pop_back();
  }
  out.erase(std::remove_if(out.begin(), out.end(), [](const Selected<T>& s) { return !(s.value > T(0)); }),
            out.end());
  std::sort(out.begin(), out.end(), [](const Selected<T>& a, const Selected<T>& b) { return a.index < b.index; });
}

template <typename T>
SparseCode to_code(const std::vector<Selected<T>>& sel, std::size_t n_latents) {
  SparseCode code;
  code.n_latents = n_latents;
  code.indices.reserve(sel.size());
  code.activations.reserve(sel.size());
  for (const auto& s : sel) {
    code.indices.push_back(s.index);
    code.activations.push_back(static_cast<float>(s.value));
  }
  return code;
}

template <typename T>
void check_params(const SaeParams<T>& p) {
  if (p.k == 0 || p.k > p.n_latents) throw ValidationError("SAE: k must satisfy 1 <= k <= n_latents");
  if (p.enc_w.rows() != p.n_latents || p.enc_w.cols() != p.dim || p.dec_w.rows() != p.dim ||
      p.dec_w.cols() != p.n_latents || p.enc_b.size() != p.n_latents || p.pre_b.size() != p.dim) {
    throw ValidationError("SAE: parameter shapes are inconsistent");
  }
}

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct GradBuffers {
  RowMajorMatrix<T> enc_w;  // n_latents x dim
  Vec<T> enc_b;
  RowMajorMatrix<T> dec_t;  // n_latents x dim (transposed decoder)
  Vec<T> pre_b;

  void reset(std::size_t n_latents, std::size_t dim) {
    enc_w.setZero(Eigen::Index(n_latents), Eigen::Index(dim));
    enc_b.setZero(Eigen::Index(n_latents));
    dec_t.setZero(Eigen::Index(n_latents), Eigen::Index(dim));
    pre_b.setZero(Eigen::Index(dim));
  }
};

// MSE of one batch of raw rows; fills gradients when `grad` is non-null.
template <typename T>
double batch_loss(const SaeParams<T>& P, const Matrix<T>& raw, GradBuffers<T>* grad) {
  check_params(P);
  if (raw.cols() != P.dim) throw ValidationError("SAE: batch dim does not match model dim");
  if (raw.rows() == 0) throw ValidationError("SAE: empty batch");
  const auto B = Eigen::Index(raw.rows());
  const auto N = Eigen::Index(P.n_latents);
  const auto E = P.enc_w.map();
  const ConstVectorMap<T> eb(P.enc_b.data(), N);
  const ConstVectorMap<T> pb(P.pre_b.data(), Eigen::Index(P.dim));
  const RowMajorMatrix<T> Dt = P.dec_w.map().transpose();

  RowMajorMatrix<T> C = T(P.input_scale) * raw.map();
  C.rowwise() -= pb.transpose();
  if (grad) grad->reset(P.n_latents, P.dim);
  const T inv = T(2) / (T(B) * T(P.dim));

  double loss = 0;
  std::vector<Selected<T>> sel;
  Vec<T> r(Eigen::Index(P.dim));
  for (Eigen::Index r0 = 0; r0 < B; r0 += Eigen::Index(kEncodeChunk)) {
    const Eigen::Index len = std::min<Eigen::Index>(Eigen::Index(kEncodeChunk), B - r0);
    RowMajorMatrix<T> U = C.middleRows(r0, len) * E.transpose();
    U.rowwise() += eb.transpose();
    for (Eigen::Index i = 0; i < len; ++i) {
      select_topk(U.data() + i * N, std::size_t(N), P.k, sel);
      const auto c = C.row(r0 + i);
      r = -c.transpose();
      for (const auto& s : sel) r += s.value * Dt.row(s.index).transpose();
      loss += double(r.squaredNorm());
      if (!grad) continue;
      const Vec<T> dx = inv * r;
      grad->pre_b += dx;
      for (const auto& s : sel) {
        grad->dec_t.row(s.index) += s.value * dx.transpose();
        const T da = Dt.row(s.index).dot(dx);
        grad->enc_w.row(s.index) += da * c;
        grad->enc_b[s.index] += da;
        grad->pre_b -= da * E.row(s.index).transpose();
      }
    }
  }
  return loss / (double(B) * double(P.dim));
}

}  // namespace

template <typename T>
SaeParams<T> init_sae(std::size_t dim, std::size_t n_latents, std::size_t k, const Matrix<float>& data_sample,
                      std::uint64_t seed) {
  if (dim == 0 || n_latents == 0) throw ValidationError("init_sae: dim and n_latents must be >= 1");
  if (k == 0 || k > n_latents) {
    throw ValidationError("init_sae: k = " + std::to_string(k) + " must lie in [1, n_latents = " +
                          std::to_string(n_latents) + "]");
  }
  if (data_sample.rows() == 0) throw ValidationError("init_sae: empty data sample");
  if (data_sample.cols() != dim) throw ValidationError("init_sae: sample dim does not match");

  SaeParams<T> p;
  p.dim = dim;
  p.n_latents = n_latents;
  p.k = k;
  p.pre_b.assign(dim, T(0));
  std::vector<double> mean(dim, 0.0);
  for (std::size_t i = 0; i < data_sample.rows(); ++i) {
    const auto row = data_sample.row(i);
    for (std::size_t d = 0; d < dim; ++d) mean[d] += row[d];
  }
  for (std::size_t d = 0; d < dim; ++d) p.pre_b[d] = static_cast<T>(mean[d] / double(data_sample.rows()));

  Rng rng(seed);
  p.dec_w = Matrix<T>(dim, n_latents);
  p.enc_w = Matrix<T>(n_latents, dim);
  std::vector<double> col(dim);
  for (std::size_t j = 0; j < n_latents; ++j) {
    double norm = 0;
    do {
      norm = 0;
      for (auto& v : col) {
        v = rng.normal();
        norm += v * v;
      }
    } while (norm == 0);
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < dim; ++d) {
      p.dec_w(d, j) = static_cast<T>(col[d] / norm);
      p.enc_w(j, d) = p.dec_w(d, j);
    }
  }
  p.enc_b.assign(n_latents, T(0));
  return p;
}

template <typename T>
SparseCode topk_code(std::span<const T> pre_acts, std::size_t k) {
  if (k == 0 || k > pre_acts.size()) throw ValidationError("topk_code: k must lie in [1, n_latents]");
  std::vector<Selected<T>> sel;
  select_topk(pre_acts.data(), pre_acts.size(), k, sel);
  return to_code(sel, pre_acts.size());
}

template <typename T>
std::vector<T> pre_activations(const SaeParams<T>& params, std::span<const T> x) {
  check_params(params);
  if (x.size() != params.dim) {
    throw ValidationError("SAE encode: input dim " + std::to_string(x.size()) + " does not match model dim " +
                          std::to_string(params.dim));
  }
  Vec<T> c(Eigen::Index(params.dim));
  for (std::size_t d = 0; d < params.dim; ++d) c[Eigen::Index(d)] = T(params.input_scale) * x[d] - params.pre_b[d];
  Vec<T> u = params.enc_w.map() * c;
  std::vector<T> out(params.n_latents);
  for (std::size_t j = 0; j < params.n_latents; ++j) out[j] = u[Eigen::Index(j)] + params.enc_b[j];
  return out;
}

template <typename T>
SparseCode encode_topk(const SaeParams<T>& params, std::span<const T> x) {
  const auto u = pre_activations(params, x);
  return topk_code<T>(u, params.k);
}

std::vector<SparseCode> encode_batch(const SaeParams<float>& P, const Matrix<float>& rows) {
  check_params(P);
  if (rows.cols() != P.dim && rows.rows() != 0) throw ValidationError("SAE encode: input dim does not match");
  const auto N = Eigen::Index(P.n_latents);
  const auto E = P.enc_w.map();
  const ConstVectorMap<float> eb(P.enc_b.data(), N);
  const ConstVectorMap<float> pb(P.pre_b.data(), Eigen::Index(P.dim));
  std::vector<SparseCode> out;
  out.reserve(rows.rows());
  std::vector<Selected<float>> sel;
  const auto X = rows.map();
  for (Eigen::Index r0 = 0; r0 < X.rows(); r0 += Eigen::Index(kEncodeChunk)) {
    const Eigen::Index len = std::min<Eigen::Index>(Eigen::Index(kEncodeChunk), X.rows() - r0);
    RowMajorMatrix<float> C = float(P.input_scale) * X.middleRows(r0, len);
    C.rowwise() -= pb.transpose();
    RowMajorMatrix<float> U = C * E.transpose();
    U.rowwise() += eb.transpose();
    for (Eigen::Index i = 0; i < len; ++i) {
      select_topk(U.data() + i * N, std::size_t(N), P.k, sel);
      out.push_back(to_code(sel, P.n_latents));
    }
  }
  return out;
}

template <typename T>
std::vector<T> decode(const SaeParams<T>& params, const SparseCode& code) {
  check_params(params);
  if (code.indices.size() != code.activations.size()) throw ValidationError("SAE decode: malformed code");
  std::vector<T> x(params.pre_b);
  for (std::size_t t = 0; t < code.indices.size(); ++t) {
    const auto j = code.indices[t];
    if (j >= params.n_latents) {
      throw ValidationError("SAE decode: latent index " + std::to_string(j) + " out of range");
    }
    for (std::size_t d = 0; d < params.dim; ++d) x[d] += T(code.activations[t]) * params.dec_w(d, j);
  }
  if (params.input_scale != 1.0) {
    for (T& v : x) v = static_cast<T>(v / params.input_scale);
  }
  return x;
}

template <typename T>
SaeGradient sae_loss_and_gradient(const SaeParams<T>& params, const Matrix<T>& batch) {
  GradBuffers<T> g;
  SaeGradient out;
  out.loss = batch_loss(params, batch, &g);
  const RowMajorMatrix<T> dec = g.dec_t.transpose();
  out.enc_w.assign(g.enc_w.data(), g.enc_w.data() + g.enc_w.size());
  out.enc_b.assign(g.enc_b.data(), g.enc_b.data() + g.enc_b.size());
  out.dec_w.assign(dec.data(), dec.data() + dec.size());
  out.pre_b.assign(g.pre_b.data(), g.pre_b.data() + g.pre_b.size());
  return out;
}

template <typename T>
double sae_loss(const SaeParams<T>& params, const Matrix<T>& batch) {
  return batch_loss<T>(params, batch, nullptr);
}

// ---------------------------------------------------------------------------
// Training

namespace {

void renormalize_decoder(SaeParams<float>& p) {
  auto D = p.dec_w.map();
  for (Eigen::Index j = 0; j < D.cols(); ++j) {
    const double norm = D.col(j).template cast<double>().norm();
    if (norm > 0) D.col(j) /= float(norm);
  }
}

}  // namespace

SaeTrainResult train_sae(const Matrix<float>& tiles, const SaeTrainConfig& config, SaeParams<float> params,
                         const SaeStepHook& on_step) {
  check_params(params);
  if (tiles.rows() == 0) throw ValidationError("train_sae: no tiles");
  if (tiles.cols() != params.dim) throw ValidationError("train_sae: tile dim does not match model dim");
  if (!(config.lr > 0) || config.epochs == 0 || config.batch_size == 0 || config.norm_target < 0 ||
      !(config.tail_fraction >= 0 && config.tail_fraction <= 1)) {
    throw ValidationError("train_sae: lr, epochs and batch_size must be positive");
  }
  const std::size_t n = tiles.rows();
  const std::size_t dim = params.dim;

  // Global input scale, measured around the raw-space mean from init.
  std::vector<double> raw_mean(dim);
  for (std::size_t d = 0; d < dim; ++d) raw_mean[d] = double(params.pre_b[d]) / params.input_scale;
  double mean_dist = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = tiles.row(i);
    double s = 0;
    for (std::size_t d = 0; d < dim; ++d) s += (row[d] - raw_mean[d]) * (row[d] - raw_mean[d]);
    mean_dist += std::sqrt(s);
  }
  mean_dist /= double(n);
  const double target = config.norm_target > 0 ? config.norm_target : std::sqrt(double(dim));
  params.input_scale = mean_dist > 0 ? target / mean_dist : 1.0;
  for (std::size_t d = 0; d < dim; ++d) params.pre_b[d] = float(raw_mean[d] * params.input_scale);
  renormalize_decoder(params);

  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const LrSchedule schedule{ScheduleKind::LinearTailDecay, config.lr, steps_per_epoch * config.epochs,
                            config.tail_fraction};
  OptimState<float> s_enc_w(params.enc_w.size()), s_enc_b(params.n_latents), s_dec(params.dec_w.size()),
      s_pre(dim);
  AdamConfig<float> adam;
  adam.weight_decay = 0.0f;

  SaeTrainResult result{std::move(params), {}};
  SaeParams<float>& P = result.params;
  GradBuffers<float> g;
  std::vector<std::size_t> order(n);
  Matrix<float> batch;
  const Rng base(config.seed);
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng rng = base.fork(epoch);
    rng.shuffle(order.begin(), order.end());
    double epoch_sum = 0;
    for (std::size_t b0 = 0; b0 < n; b0 += config.batch_size) {
      const std::size_t len = std::min(config.batch_size, n - b0);
      batch = Matrix<float>(len, dim);
      for (std::size_t i = 0; i < len; ++i) {
        const auto src = tiles.row(order[b0 + i]);
        std::copy(src.begin(), src.end(), batch.row(i).begin());
      }
      const double loss = batch_loss(P, batch, &g);
      if (!std::isfinite(loss)) {
        throw NumericalError("non-finite SAE loss at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(step));
      }
      const RowMajorMatrix<float> gdec = g.dec_t.transpose();
      adam.lr = float(schedule_lr(schedule, step));
      adamw_step<float>(P.enc_w.values(), std::span<const float>(g.enc_w.data(), std::size_t(g.enc_w.size())),
                        s_enc_w, adam);
      adamw_step<float>(P.enc_b, std::span<const float>(g.enc_b.data(), std::size_t(g.enc_b.size())), s_enc_b,
                        adam);
      adamw_step<float>(P.dec_w.values(), std::span<const float>(gdec.data(), std::size_t(gdec.size())), s_dec,
                        adam);
      adamw_step<float>(P.pre_b, std::span<const float>(g.pre_b.data(), std::size_t(g.pre_b.size())), s_pre, adam);
      renormalize_decoder(P);
      ++step;
      result.log.step_loss.push_back(loss);
      epoch_sum += loss;
      if (on_step) on_step(step, P);
    }
    result.log.epoch_loss.push_back(epoch_sum / double(steps_per_epoch));
  }
  result.log.optimizer_steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Diagnostics

DeadLatentReport dead_latent_report(const SaeParams<float>& params, const Matrix<float>& sample) {
  if (sample.rows() == 0) throw ValidationError("dead_latent_report: empty sample");
  const auto codes = encode_batch(params, sample);
  std::vector<std::size_t> counts(params.n_latents, 0);
  for (const auto& c : codes) {
    for (const auto j : c.indices) ++counts[j];
  }
  DeadLatentReport r;
  r.n_samples = sample.rows();
  for (std::uint32_t j = 0; j < params.n_latents; ++j) {
    r.latents.push_back({j, double(counts[j]) / double(sample.rows())});
    r.n_dead += counts[j] == 0;
  }
  std::stable_sort(r.latents.begin(), r.latents.end(),
                   [](const LatentFrequency& a, const LatentFrequency& b) { return a.frequency > b.frequency; });
  return r;
}

std::vector<AtomMatch> match_dictionary(const SaeParams<float>& params, const Matrix<double>& true_atoms) {
  if (true_atoms.cols() != params.dim) throw ValidationError("match_dictionary: atom dim does not match");
  const Eigen::MatrixXd D = params.dec_w.map().cast<double>();
  Eigen::RowVectorXd norms = D.colwise().norm();
  for (Eigen::Index j = 0; j < norms.size(); ++j) {
    if (norms[j] == 0) norms[j] = 1;
  }
  const Eigen::MatrixXd sims = (true_atoms.map() * D).array().rowwise() / norms.array();

  struct Pair {
    double cosine;
    std::size_t atom;
    std::uint32_t latent;
  };
  std::vector<Pair> pairs;
  pairs.reserve(std::size_t(sims.size()));
  for (Eigen::Index a = 0; a < sims.rows(); ++a) {
    for (Eigen::Index j = 0; j < sims.cols(); ++j) pairs.push_back({sims(a, j), std::size_t(a), std::uint32_t(j)});
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) {
    if (x.cosine != y.cosine) return x.cosine > y.cosine;
    if (x.atom != y.atom) return x.atom < y.atom;
    return x.latent < y.latent;
  });
  std::vector<AtomMatch> out(true_atoms.rows());
  std::vector<bool> atom_done(true_atoms.rows(), false), latent_used(params.n_latents, false);
  std::size_t remaining = std::min<std::size_t>(true_atoms.rows(), params.n_latents);
  for (const auto& p : pairs) {
    if (remaining == 0) break;
    if (atom_done[p.atom] || latent_used[p.latent]) continue;
    atom_done[p.atom] = latent_used[p.latent] = true;
    out[p.atom] = {p.atom, p.latent, p.cosine};
    --remaining;
  }
  for (std::size_t a = 0; a < out.size(); ++a) {
    if (!atom_done[a]) out[a] = {a, 0, 0.0};
  }
  return out;
}

double fraction_matched(std::span<const AtomMatch> matches, double min_cosine) {
  if (matches.empty()) return 0.0;
  const auto hits = std::count_if(matches.begin(), matches.end(),
                                  [&](const AtomMatch& m) { return m.cosine >= min_cosine; });
  return double(hits) / double(matches.size());
}

// ---------------------------------------------------------------------------
// Files

namespace {
constexpr char kSaeMagic[4] = {'S', 'A', 'E', '1'};
constexpr char kActMagic[4] = {'A', 'C', 'T', '1'};
constexpr std::uint32_t kFileVersion = 1;

void expect_magic(binio::Reader& r, const char* magic, const std::filesystem::path& path) {
  char got[4];
  r.bytes(got, 4);
  if (std::memcmp(got, magic, 4) != 0) {
    throw ValidationError(path.string() + ": bad magic (expected " + std::string(magic, 4) + ")");
  }
  if (const auto v = r.u32(); v != kFileVersion) {
    throw ValidationError(path.string() + ": unsupported version " + std::to_string(v));
  }
}
}  // namespace

void write_sae_checkpoint(const SaeParams<float>& params, const std::filesystem::path& path) {
  check_params(params);
  binio::Writer w;
  w.bytes(kSaeMagic, 4);
  w.u32(kFileVersion);
  w.u32(std::uint32_t(params.dim));
  w.u32(std::uint32_t(params.n_latents));
  w.u32(std::uint32_t(params.k));
  w.f64(params.input_scale);
  w.f32s(std::span<const float>(params.pre_b));
  w.f32s(std::span<const float>(params.enc_b));
  w.f32s(params.enc_w.values());
  w.f32s(params.dec_w.values());
  w.save(path);
}

SaeParams<float> read_sae_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(binio::Reader::slurp(path));
  expect_magic(r, kSaeMagic, path);
  SaeParams<float> p;
  p.dim = r.u32();
  p.n_latents = r.u32();
  p.k = r.u32();
  p.input_scale = r.f64();
  if (p.dim == 0 || p.n_latents == 0 || p.k == 0 || p.k > p.n_latents) {
    throw ValidationError(path.string() + ": invalid SAE shape");
  }
  if (!(p.input_scale > 0) || !std::isfinite(p.input_scale)) {
    throw ValidationError(path.string() + ": invalid input scale");
  }
  p.pre_b.resize(p.dim);
  p.enc_b.resize(p.n_latents);
  p.enc_w = Matrix<float>(p.n_latents, p.dim);
  p.dec_w = Matrix<float>(p.dim, p.n_latents);
  r.f32s(std::span<float>(p.pre_b));
  r.f32s(std::span<float>(p.enc_b));
  r.f32s(p.enc_w.values());
  r.f32s(p.dec_w.values());
  if (r.remaining() != 0) throw ValidationError(path.string() + ": trailing bytes after parameters");
  return p;
}

void write_activation_dump(std::span<const SparseCode> codes, std::size_t n_latents,
                           const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(kActMagic, 4);
  w.u32(kFileVersion);
  w.u32(std::uint32_t(n_latents));
  w.u64(codes.size());
  for (const auto& c : codes) {
    w.u32(std::uint32_t(c.indices.size()));
    for (std::size_t t = 0; t < c.indices.size(); ++t) {
      w.u32(c.indices[t]);
      w.f32(c.activations[t]);
    }
  }
  w.save(path);
}

std::vector<SparseCode> read_activation_dump(const std::filesystem::path& path) {
  binio::Reader r(binio::Reader::slurp(path));
  expect_magic(r, kActMagic, path);
  const std::size_t n_latents = r.u32();
  const std::uint64_t n_tiles = r.u64();
  if (n_tiles > r.remaining() / 4) throw ValidationError(path.string() + ": truncated payload");
  std::vector<SparseCode> codes(n_tiles);
  for (auto& c : codes) {
    c.n_latents = n_latents;
    const auto count = r.u32();
    if (count > n_latents) throw ValidationError(path.string() + ": code longer than n_latents");
    c.indices.resize(count);
    c.activations.resize(count);
    for (std::uint32_t t = 0; t < count; ++t) {
      c.indices[t] = r.u32();
      c.activations[t] = r.f32();
      if (c.indices[t] >= n_latents) throw ValidationError(path.string() + ": latent index out of range");
    }
  }
  if (r.remaining() != 0) throw ValidationError(path.string() + ": trailing bytes");
  return codes;
}

#define HISTOPROG_INSTANTIATE_SAE(T)                                                                      \
  template SaeParams<T> init_sae<T>(std::size_t, std::size_t, std::size_t, const Matrix<float>&, std::uint64_t); \
  template SparseCode topk_code<T>(std::span<const T>, std::size_t);                                      \
  template std::vector<T> pre_activations<T>(const SaeParams<T>&, std::span<const T>);                    \
  template SparseCode encode_topk<T>(const SaeParams<T>&, std::span<const T>);                            \
  template std::vector<T> decode<T>(const SaeParams<T>&, const SparseCode&);                              \
  template SaeGradient sae_loss_and_gradient<T>(const SaeParams<T>&, const Matrix<T>&);                   \
  template double sae_loss<T>(const SaeParams<T>&, const Matrix<T>&);

HISTOPROG_INSTANTIATE_SAE(float)
HISTOPROG_INSTANTIATE_SAE(double)

#undef HISTOPROG_INSTANTIATE_SAE

}  // namespace histoprog
