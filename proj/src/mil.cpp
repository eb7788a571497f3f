#include "histoprog/mil.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "histoprog/binary_io.hpp"
#include "histoprog/stats.hpp"

namespace histoprog {

std::string to_string(MilVariant v) {
  switch (v) {
    case MilVariant::AbmilIb: return "abmil-ib";
    case MilVariant::Abmil: return "abmil";
    case MilVariant::AdditiveMil: return "additive-mil";
  }
  return "abmil-ib";
}

MilVariant parse_mil_variant(const std::string& name) {
  if (name == "abmil-ib" || name == "AbmilIb") return MilVariant::AbmilIb;
  if (name == "abmil" || name == "Abmil") return MilVariant::Abmil;
  if (name == "additive-mil" || name == "AdditiveMil") return MilVariant::AdditiveMil;
  throw ValidationError("unknown MIL variant '" + name + "' (expected abmil-ib, abmil or additive-mil)");
}

MilLayout::MilLayout(std::size_t dim) {
  proj_w = 0;
  proj_b = proj_w + kMilHidden * dim;
  attn_v = proj_b + kMilHidden;
  attn_b = attn_v + kMilAttention * kMilHidden;
  attn_w = attn_b + kMilAttention;
  attn_c = attn_w + kMilAttention;
  pred_u = attn_c + 1;
  pred_c = pred_u + kMilHidden;
  total = pred_c + 1;
}

std::size_t mil_param_count(std::size_t dim) { return MilLayout(dim).total; }

template <typename T>
bool MilParams<T>::all_finite() const {
  for (const T v : flat) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template <typename T>
MilParams<T> init_mil(std::size_t dim, MilVariant variant, std::uint64_t seed) {
  if (dim == 0) throw ValidationError("init_mil: dim must be >= 1");
  const MilLayout L(dim);
  MilParams<T> p{variant, dim, std::vector<T>(L.total, T(0))};
  Rng rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(double(fan_in));
    for (std::size_t i = 0; i < count; ++i) p.flat[offset + i] = static_cast<T>(rng.uniform(-bound, bound));
  };
  fill(L.proj_w, kMilHidden * dim, dim);
  fill(L.attn_v, kMilAttention * kMilHidden, kMilHidden);
  fill(L.attn_w, kMilAttention, kMilAttention);
  fill(L.pred_u, kMilHidden, kMilHidden);
  return p;
}

namespace {

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
void check_input(const MilParams<T>& params, const Matrix<T>& tiles) {
  if (tiles.rows() == 0) throw ValidationError("MIL forward: empty bag");
  if (tiles.cols() != params.dim) {
    throw ValidationError("MIL forward: bag dim " + std::to_string(tiles.cols()) + " does not match model dim " +
                          std::to_string(params.dim));
  }
}

// Pools per-tile terms into the bag logit. `hidden` holds h_i, `raw` holds W x_i.
template <typename T>
T pool_logit(const MilParams<T>& params, std::span<const T> alpha, std::span<const T> preds,
             const RowMajorMatrix<T>& hidden, const RowMajorMatrix<T>& raw) {
  const std::size_t n = alpha.size();
  switch (params.variant) {
    case MilVariant::AbmilIb: {
      T logit = 0;
      for (std::size_t i = 0; i < n; ++i) logit += alpha[i] * preds[i];
      return logit;
    }
    case MilVariant::Abmil: {
      Vec<T> pooled = Vec<T>::Zero(kMilHidden);
      for (std::size_t i = 0; i < n; ++i) pooled += alpha[i] * hidden.row(Eigen::Index(i)).transpose();
      return params.pred_u().dot(pooled) + params.pred_c();
    }
    case MilVariant::AdditiveMil: {
      T logit = params.pred_c();
      const auto b = params.proj_b();
      const auto u = params.pred_u();
      for (std::size_t i = 0; i < n; ++i) {
        const Vec<T> scaled = (alpha[i] * raw.row(Eigen::Index(i)).transpose() + b).cwiseMax(T(0));
        logit += u.dot(scaled);
      }
      return logit;
    }
  }
  return 0;
}

// Everything backward() needs, computed with whole-bag matrix products.
template <typename T>
struct BagCache {
  RowMajorMatrix<T> raw;     // n x 256, W x_i
  RowMajorMatrix<T> z;       // n x 256, W x_i + b
  RowMajorMatrix<T> h;       // n x 256, relu(z)
  RowMajorMatrix<T> t;       // n x 128, tanh(V h + c_v)
  Vec<T> a, p, alpha;
  T logit = 0;
};

template <typename T>
BagCache<T> forward_cache(const MilParams<T>& params, const Matrix<T>& tiles) {
  check_input(params, tiles);
  const auto X = tiles.map();
  BagCache<T> c;
  c.raw.noalias() = X * params.proj_w().transpose();
  c.z = c.raw.rowwise() + params.proj_b().transpose();
  c.h = c.z.cwiseMax(T(0));
  RowMajorMatrix<T> g = c.h * params.attn_v().transpose();
  g.rowwise() += params.attn_b().transpose();
  c.t = g.array().tanh().matrix();
  c.a = (c.t * params.attn_w()).array() + params.attn_c();
  c.p = (c.h * params.pred_u()).array() + params.pred_c();
  const auto alpha = softmax<T>(std::span<const T>(c.a.data(), std::size_t(c.a.size())));
  c.alpha = Eigen::Map<const Vec<T>>(alpha.data(), Eigen::Index(alpha.size()));
  c.logit = pool_logit<T>(params, alpha, std::span<const T>(c.p.data(), std::size_t(c.p.size())), c.h, c.raw);
  return c;
}

}  // namespace

template <typename T>
BagForward<T> forward(const MilParams<T>& params, const Matrix<T>& tiles) {
  check_input(params, tiles);
  const std::size_t n = tiles.rows();
  const auto W = params.proj_w();
  const auto b = params.proj_b();
  const auto V = params.attn_v();
  const auto cv = params.attn_b();
  const auto w = params.attn_w();
  const auto u = params.pred_u();

  BagForward<T> out;
  out.attention_logits.resize(n);
  out.tile_predictions.resize(n);
  out.decision_scores.resize(n);
  const bool need_hidden = params.variant != MilVariant::AbmilIb;
  RowMajorMatrix<T> hidden, raw;
  if (need_hidden) {
    hidden.resize(Eigen::Index(n), Eigen::Index(kMilHidden));
    raw.resize(Eigen::Index(n), Eigen::Index(kMilHidden));
  }
  Vec<T> r(kMilHidden), h(kMilHidden), g(kMilAttention);
  for (std::size_t i = 0; i < n; ++i) {
    const ConstVectorMap<T> x(tiles.row(i).data(), Eigen::Index(params.dim));
    r.noalias() = W * x;
    h = (r + b).cwiseMax(T(0));
    g.noalias() = V * h;
    g += cv;
    const T a = w.dot(g.array().tanh().matrix()) + params.attn_c();
    const T p = u.dot(h) + params.pred_c();
    out.attention_logits[i] = a;
    out.tile_predictions[i] = p;
    out.decision_scores[i] = std::exp(a) * p;
    if (need_hidden) {
      hidden.row(Eigen::Index(i)) = h.transpose();
      raw.row(Eigen::Index(i)) = r.transpose();
    }
  }
  const auto alpha = softmax<T>(out.attention_logits);
  out.logit = pool_logit<T>(params, alpha, out.tile_predictions, hidden, raw);
  out.p_longer = sigmoid(out.logit);
  return out;
}

BagForward<float> forward(const MilParams<float>& params, const EmbeddingBag& bag) {
  return forward(params, bag.embeddings);
}

template <typename T>
T bag_loss(const MilParams<T>& params, const Matrix<T>& tiles, int label) {
  return bce_with_logits(forward(params, tiles).logit, label);
}

template <typename T>
MilGradient<T> backward(const MilParams<T>& params, const Matrix<T>& tiles, int label) {
  if (label != 0 && label != 1) throw ValidationError("MIL backward: label must be 0 or 1");
  const BagCache<T> c = forward_cache(params, tiles);
  const auto n = Eigen::Index(tiles.rows());
  const MilLayout L(params.dim);
  const auto X = tiles.map();
  const auto u = params.pred_u();
  const auto w = params.attn_w();

  MilGradient<T> grad;
  grad.logit = c.logit;
  grad.loss = bce_with_logits(c.logit, label);
  grad.flat.assign(L.total, T(0));
  MatrixMap<T> dW(grad.flat.data() + L.proj_w, Eigen::Index(kMilHidden), Eigen::Index(params.dim));
  VectorMap<T> db(grad.flat.data() + L.proj_b, Eigen::Index(kMilHidden));
  MatrixMap<T> dV(grad.flat.data() + L.attn_v, Eigen::Index(kMilAttention), Eigen::Index(kMilHidden));
  VectorMap<T> dcv(grad.flat.data() + L.attn_b, Eigen::Index(kMilAttention));
  VectorMap<T> dw(grad.flat.data() + L.attn_w, Eigen::Index(kMilAttention));
  VectorMap<T> du(grad.flat.data() + L.pred_u, Eigen::Index(kMilHidden));
  T& dc = grad.flat[L.attn_c];
  T& dcp = grad.flat[L.pred_c];

  const T dl = sigmoid(c.logit) - T(label);
  RowMajorMatrix<T> dH = RowMajorMatrix<T>::Zero(n, Eigen::Index(kMilHidden));
  Vec<T> da(n);

  switch (params.variant) {
    case MilVariant::AbmilIb: {
      const Vec<T> dp = dl * c.alpha;
      da = dp.cwiseProduct((c.p.array() - c.logit).matrix());
      du = c.h.transpose() * dp;
      dcp = dl;
      dH.noalias() = dp * u.transpose();
      break;
    }
    case MilVariant::Abmil: {
      const Vec<T> pooled = c.h.transpose() * c.alpha;
      const Vec<T> q = c.h * u;
      const T q_pooled = u.dot(pooled);
      du = dl * pooled;
      dcp = dl;
      dH.noalias() = (dl * c.alpha) * u.transpose();
      da = (dl * c.alpha).cwiseProduct((q.array() - q_pooled).matrix());
      break;
    }
    case MilVariant::AdditiveMil: {
      RowMajorMatrix<T> y = (c.raw.array().colwise() * c.alpha.array()).matrix();
      y.rowwise() += params.proj_b().transpose();
      const RowMajorMatrix<T> active = (y.array() > T(0)).template cast<T>().matrix();
      du = dl * y.cwiseMax(T(0)).colwise().sum().transpose();
      dcp = dl;
      const RowMajorMatrix<T> dY = dl * (active.array().rowwise() * u.transpose().array()).matrix();
      dW.noalias() += (dY.array().colwise() * c.alpha.array()).matrix().transpose() * X;
      db += dY.colwise().sum().transpose();
      const Vec<T> dalpha = dY.cwiseProduct(c.raw).rowwise().sum();
      const T mean = c.alpha.dot(dalpha);
      da = c.alpha.cwiseProduct((dalpha.array() - mean).matrix());
      break;
    }
  }

  // Attention head.
  dw.noalias() = c.t.transpose() * da;
  dc = da.sum();
  const RowMajorMatrix<T> dG =
      ((da * w.transpose()).array() * (T(1) - c.t.array().square())).matrix();
  dV.noalias() = dG.transpose() * c.h;
  dcv = dG.colwise().sum().transpose();
  dH.noalias() += dG * params.attn_v();

  // Trunk.
  const RowMajorMatrix<T> dZ = (dH.array() * (c.z.array() > T(0)).template cast<T>()).matrix();
  dW.noalias() += dZ.transpose() * X;
  db += dZ.colwise().sum().transpose();
  return grad;
}

// ---------------------------------------------------------------------------
// Training

std::uint64_t mil_total_steps(std::size_t n_train, const MilTrainConfig& config) {
  if (config.grad_accum_steps == 0) throw ValidationError("grad_accum_steps must be >= 1");
  const std::uint64_t per_epoch = (n_train + config.grad_accum_steps - 1) / config.grad_accum_steps;
  return per_epoch * config.epochs;
}

namespace {

double safe_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  if (pos == 0 || pos == std::ptrdiff_t(labels.size())) return std::numeric_limits<double>::quiet_NaN();
  return auroc(scores, labels);
}

}  // namespace

template <typename T>
MilTrainResult<T> train_mil(std::span<const MilExample<T>> train, std::span<const MilExample<T>> val,
                            const MilTrainConfig& config, MilParams<T> init) {
  if (train.empty()) throw ValidationError("train_mil: no training bags");
  if (!(config.lr > 0) || !(config.weight_decay >= 0) || config.epochs == 0 || config.grad_accum_steps == 0) {
    throw ValidationError("train_mil: lr, epochs and grad_accum_steps must be positive");
  }
  for (const auto& ex : train) {
    if (ex.label != 0 && ex.label != 1) throw ValidationError("train_mil: labels must be 0 or 1");
  }

  MilTrainResult<T> result{std::move(init), {}};
  MilParams<T>& params = result.params;
  const std::size_t n = train.size();
  const LrSchedule schedule{config.schedule, config.lr, mil_total_steps(n, config), 0.2};
  OptimState<T> state(params.size());
  AdamConfig<T> adam;
  adam.weight_decay = static_cast<T>(config.weight_decay);

  Rng rng(config.seed);
  Rng shuffle_rng = rng.fork(0x5F0F);
  std::vector<std::size_t> order(n);
  std::vector<T> accum(params.size());
  std::uint64_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t(0));
    shuffle_rng.shuffle(order.begin(), order.end());

    std::vector<double> logits(n);
    std::vector<int> labels(n);
    double loss_sum = 0.0;
    double lr = 0.0;
    std::fill(accum.begin(), accum.end(), T(0));
    std::size_t in_window = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const auto& ex = train[order[k]];
      const auto g = backward(params, *ex.tiles, ex.label);
      if (!std::isfinite(g.loss)) {
        throw NumericalError("non-finite MIL loss at epoch " + std::to_string(epoch + 1) + ", bag " +
                             std::to_string(order[k]) + " (logit " + std::to_string(double(g.logit)) + ")");
      }
      loss_sum += double(g.loss);
      logits[k] = double(g.logit);
      labels[k] = ex.label;
      for (std::size_t i = 0; i < accum.size(); ++i) accum[i] += g.flat[i];
      ++in_window;
      if (in_window == config.grad_accum_steps || k + 1 == n) {
        const T scale = T(1) / T(in_window);
        for (auto& v : accum) v *= scale;
        lr = schedule_lr(schedule, step);
        adam.lr = static_cast<T>(lr);
        adamw_step<T>(params.flat, accum, state, adam);
        ++step;
        if (!params.all_finite()) {
          throw NumericalError("non-finite MIL parameters after optimizer step " + std::to_string(step));
        }
        std::fill(accum.begin(), accum.end(), T(0));
        in_window = 0;
      }
    }

    MilEpochLog entry;
    entry.epoch = epoch + 1;
    entry.train_loss = loss_sum / double(n);
    entry.train_auroc = safe_auroc(logits, labels);
    entry.last_lr = lr;
    entry.val_loss = std::numeric_limits<double>::quiet_NaN();
    entry.val_auroc = std::numeric_limits<double>::quiet_NaN();
    if (!val.empty()) {
      std::vector<double> vlogits;
      std::vector<int> vlabels;
      double vloss = 0.0;
      for (const auto& ex : val) {
        const auto f = forward(params, *ex.tiles);
        vloss += double(bce_with_logits(f.logit, ex.label));
        vlogits.push_back(double(f.logit));
        vlabels.push_back(ex.label);
      }
      entry.val_loss = vloss / double(val.size());
      entry.val_auroc = safe_auroc(vlogits, vlabels);
    }
    result.log.epochs.push_back(entry);
  }
  result.log.optimizer_steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// Inference helpers

SurvivalGroup group_from_probability(double p_longer, double threshold) {
  return p_longer >= threshold ? SurvivalGroup::Longer : SurvivalGroup::Shorter;
}

SurvivalGroup predict_group(const MilParams<float>& params, const EmbeddingBag& bag, double threshold) {
  return group_from_probability(double(forward(params, bag).p_longer), threshold);
}

TileScoreSet score_tiles(const MilParams<float>& params, const EmbeddingBag& bag) {
  if (bag.coords.size() != bag.n_tiles()) throw ValidationError("score_tiles: coords and tiles misaligned");
  const auto f = forward(params, bag);
  TileScoreSet out;
  out.scores_decompose_prediction = params.variant == MilVariant::AbmilIb;
  out.tiles.resize(bag.n_tiles());
  for (std::size_t i = 0; i < bag.n_tiles(); ++i) {
    out.tiles[i] = {bag.coords[i].x, bag.coords[i].y, f.attention_logits[i], f.tile_predictions[i],
                    f.decision_scores[i]};
  }
  return out;
}

// ---------------------------------------------------------------------------
// MILP checkpoints: "MILP", u32 version, u32 variant, u32 dim, f32 parameters.

namespace {
constexpr char kMilMagic[4] = {'M', 'I', 'L', 'P'};
constexpr std::uint32_t kMilVersion = 1;
}  // namespace

void write_mil_checkpoint(const MilParams<float>& params, const std::filesystem::path& path) {
  binio::Writer w;
  w.bytes(kMilMagic, 4);
  w.u32(kMilVersion);
  w.u32(static_cast<std::uint32_t>(params.variant));
  w.u32(static_cast<std::uint32_t>(params.dim));
  w.f32s(std::span<const float>(params.flat));
  w.save(path);
}

MilParams<float> read_mil_checkpoint(const std::filesystem::path& path) {
  binio::Reader r(binio::Reader::slurp(path));
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMilMagic, 4) != 0) throw ValidationError(path.string() + ": bad magic (expected MILP)");
  if (const auto v = r.u32(); v != kMilVersion) {
    throw ValidationError(path.string() + ": unsupported MILP version " + std::to_string(v));
  }
  const auto variant = r.u32();
  if (variant > 2) throw ValidationError(path.string() + ": unknown MIL variant tag");
  const auto dim = r.u32();
  if (dim == 0) throw ValidationError(path.string() + ": dim is 0");
  MilParams<float> p{static_cast<MilVariant>(variant), dim, std::vector<float>(mil_param_count(dim))};
  r.f32s(std::span<float>(p.flat));
  if (r.remaining() != 0) throw ValidationError(path.string() + ": trailing bytes after parameters");
  return p;
}

#define HISTOPROG_INSTANTIATE_MIL(T)                                                                    \
  template struct MilParams<T>;                                                                         \
  template MilParams<T> init_mil<T>(std::size_t, MilVariant, std::uint64_t);                            \
  template BagForward<T> forward<T>(const MilParams<T>&, const Matrix<T>&);                             \
  template MilGradient<T> backward<T>(const MilParams<T>&, const Matrix<T>&, int);                      \
  template T bag_loss<T>(const MilParams<T>&, const Matrix<T>&, int);                                   \
  template MilTrainResult<T> train_mil<T>(std::span<const MilExample<T>>, std::span<const MilExample<T>>, \
                                          const MilTrainConfig&, MilParams<T>);

HISTOPROG_INSTANTIATE_MIL(float)
HISTOPROG_INSTANTIATE_MIL(double)

#undef HISTOPROG_INSTANTIATE_MIL

}  // namespace histoprog
