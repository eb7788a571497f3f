#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "histoprog/mil.hpp"
#include "oracles.hpp"

using namespace histoprog;

namespace {

// dim 2 model with h_0 = x_0, h_1 = x_1; p = h_0 - h_1; a = 2 ln3 * tanh(atanh(0.5) h_1).
// Tiles (1,0) and (0,1) give a = (0, ln 3) and p = (1, -1).
template <typename T>
MilParams<T> two_tile_model(MilVariant variant = MilVariant::AbmilIb) {
  MilParams<T> p{variant, 2, std::vector<T>(mil_param_count(2), T(0))};
  const MilLayout L(2);
  p.flat[L.proj_w + 0 * 2 + 0] = 1;
  p.flat[L.proj_w + 1 * 2 + 1] = 1;
  p.flat[L.attn_v + 0 * kMilHidden + 1] = T(std::atanh(0.5));
  p.flat[L.attn_w + 0] = T(2 * std::log(3.0));
  p.flat[L.pred_u + 0] = 1;
  p.flat[L.pred_u + 1] = -1;
  return p;
}

Matrix<double> random_tiles(std::size_t n, std::size_t dim, Rng& rng) {
  Matrix<double> m(n, dim);
  for (double& v : m.values()) v = rng.normal();
  return m;
}

Matrix<double> rows_of(const Matrix<double>& m, const std::vector<std::size_t>& idx) {
  Matrix<double> out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(m.row(idx[i]).begin(), m.cols(), out.row(i).begin());
  return out;
}

const MilVariant kVariants[] = {MilVariant::AbmilIb, MilVariant::Abmil, MilVariant::AdditiveMil};

}  // namespace

TEST_CASE("parameter counts") {
  CHECK(mil_param_count(1280) == 361218);
  CHECK(mil_param_count(16) == 37634);
  CHECK(mil_param_count(16) == 16 * 256 + 256 + 32896 + 129 + 257);
  for (const auto v : kVariants) CHECK(init_mil<float>(16, v, 1).size() == 37634);
  CHECK_THROWS_AS(init_mil<float>(0, MilVariant::AbmilIb, 1), ValidationError);
  CHECK(init_mil<float>(16, MilVariant::Abmil, 5).flat == init_mil<float>(16, MilVariant::Abmil, 5).flat);
  CHECK(init_mil<float>(16, MilVariant::Abmil, 5).flat != init_mil<float>(16, MilVariant::Abmil, 6).flat);
}

TEST_CASE("variant names") {
  for (const auto v : kVariants) CHECK(parse_mil_variant(to_string(v)) == v);
  CHECK(parse_mil_variant("abmil-ib") == MilVariant::AbmilIb);
  CHECK_THROWS_AS(parse_mil_variant("transmil"), ValidationError);
}

TEST_CASE("two-tile hand example") {
  const auto p = two_tile_model<double>();
  const Matrix<double> tiles(2, 2, std::vector<double>{1, 0, 0, 1});
  const auto f = forward<double>(p, tiles);
  CHECK(f.attention_logits[0] == doctest::Approx(0.0));
  CHECK(f.attention_logits[1] == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(f.tile_predictions[0] == doctest::Approx(1.0));
  CHECK(f.tile_predictions[1] == doctest::Approx(-1.0));
  CHECK(f.logit == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(f.p_longer == doctest::Approx(0.377541).epsilon(1e-6));
  CHECK(f.decision_scores[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(f.decision_scores[1] == doctest::Approx(-3.0).epsilon(1e-12));

  const auto pf = two_tile_model<float>();
  EmbeddingBag bag;
  bag.embeddings = Matrix<float>(2, 2, std::vector<float>{1, 0, 0, 1});
  bag.coords = {{4, 5}, {6, 7}};
  const auto scored = score_tiles(pf, bag);
  CHECK(scored.scores_decompose_prediction);
  CHECK(scored.tiles[0].grid_x == 4);
  CHECK(scored.tiles[1].grid_y == 7);
  CHECK(scored.tiles[0].decision_score == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(scored.tiles[1].decision_score == doctest::Approx(-3.0).epsilon(1e-6));
  CHECK(predict_group(pf, bag) == SurvivalGroup::Shorter);
  CHECK_FALSE(score_tiles(two_tile_model<float>(MilVariant::Abmil), bag).scores_decompose_prediction);
}

TEST_CASE("prediction boundary") {
  CHECK(group_from_probability(0.5) == SurvivalGroup::Longer);
  CHECK(group_from_probability(std::nextafter(0.5, 0.0)) == SurvivalGroup::Shorter);
  // All-zero model: logit 0, p_longer exactly 0.5.
  MilParams<float> zero{MilVariant::AbmilIb, 2, std::vector<float>(mil_param_count(2), 0.0f)};
  EmbeddingBag bag;
  bag.embeddings = Matrix<float>(2, 2, std::vector<float>{1, -1, -1, 1});
  bag.coords = {{0, 0}, {0, 1}};
  CHECK(forward(zero, bag).p_longer == 0.5f);
  CHECK(predict_group(zero, bag) == SurvivalGroup::Longer);
}

TEST_CASE("single tile and constant predictor identities") {
  Rng rng(4);
  for (const auto v : kVariants) {
    auto p = init_mil<double>(8, v, 3);
    for (double& x : p.flat) x += 0.05 * rng.normal();
    const auto one = random_tiles(1, 8, rng);
    const auto f = forward<double>(p, one);
    const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(one.row(0).data(), 8);
    const Eigen::VectorXd h = (p.proj_w() * x + p.proj_b()).cwiseMax(0.0);
    const double expected = p.pred_u().dot(h) + p.pred_c();
    CHECK(f.tile_predictions[0] == doctest::Approx(expected).epsilon(1e-12));
    CHECK(f.logit == doctest::Approx(expected).epsilon(1e-12));
  }
  auto p = init_mil<double>(8, MilVariant::AbmilIb, 3);
  const MilLayout L(8);
  std::fill(p.flat.begin() + std::ptrdiff_t(L.pred_u), p.flat.begin() + std::ptrdiff_t(L.pred_c), 0.0);
  p.pred_c() = 0.7;
  CHECK(forward<double>(p, random_tiles(6, 8, rng)).logit == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("forward input checks") {
  const auto p = init_mil<double>(4, MilVariant::AbmilIb, 1);
  CHECK_THROWS_AS(forward<double>(p, Matrix<double>(0, 4)), ValidationError);
  CHECK_THROWS_AS(forward<double>(p, Matrix<double>(2, 5)), ValidationError);
}

TEST_CASE("gradients match finite differences") {
  Rng rng(17);
  for (const auto v : kVariants) {
    for (int trial = 0; trial < 2; ++trial) {
      const auto inst = oracle::random_mil_instance(v, 6, rng);
      const double err = oracle::mil_fd_relative_error(inst, 40, rng);
      CHECK_MESSAGE(err < 1e-6, to_string(v) << " relative error " << err);
    }
  }
}

TEST_CASE("saturated correct prediction has a vanishing gradient") {
  auto p = init_mil<double>(4, MilVariant::AbmilIb, 2);
  const MilLayout L(4);
  std::fill(p.flat.begin() + std::ptrdiff_t(L.pred_u), p.flat.begin() + std::ptrdiff_t(L.pred_c), 0.0);
  p.pred_c() = 60;
  Rng rng(1);
  const auto g = backward<double>(p, random_tiles(5, 4, rng), 1);
  double norm = 0;
  for (const double x : g.flat) norm += x * x;
  CHECK(std::sqrt(norm) < 1e-10);
}

TEST_CASE("permutation invariance and score locality") {
  Rng rng(23);
  for (const auto v : kVariants) {
    const auto p = init_mil<double>(8, v, 9);
    const auto tiles = random_tiles(7, 8, rng);
    std::vector<std::size_t> perm(7);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    const auto a = forward<double>(p, tiles);
    const auto b = forward<double>(p, rows_of(tiles, perm));
    CHECK(a.logit == doctest::Approx(b.logit).epsilon(1e-12));
  }
  const auto pf = init_mil<float>(8, MilVariant::AbmilIb, 9);
  Matrix<float> tiles(5, 8);
  for (float& x : tiles.values()) x = float(rng.normal());
  const auto whole = forward<float>(pf, tiles);
  float exp_sum = 0;
  float score_sum = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    Matrix<float> single(1, 8, std::vector<float>(tiles.row(i).begin(), tiles.row(i).end()));
    CHECK(forward<float>(pf, single).decision_scores[0] == whole.decision_scores[i]);
    exp_sum += std::exp(whole.attention_logits[i]);
    score_sum += whole.decision_scores[i];
  }
  CHECK(whole.logit * exp_sum == doctest::Approx(score_sum).epsilon(1e-5));
}

TEST_CASE("attention shift invariance") {
  Rng rng(5);
  auto p = init_mil<double>(8, MilVariant::AbmilIb, 11);
  const auto tiles = random_tiles(4, 8, rng);
  const auto before = forward<double>(p, tiles);
  p.attn_c() += 3.0;
  const auto after = forward<double>(p, tiles);
  CHECK(after.logit == doctest::Approx(before.logit).epsilon(1e-12));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(after.decision_scores[i] == doctest::Approx(before.decision_scores[i] * std::exp(3.0)).epsilon(1e-12));
  }
}

TEST_CASE("optimizer step count") {
  MilTrainConfig cfg;
  CHECK(mil_total_steps(32, cfg) == 16);
  CHECK(mil_total_steps(33, cfg) == 32);
  CHECK(mil_total_steps(144, cfg) == 80);

  Rng rng(2);
  std::vector<Matrix<double>> bags;
  for (int i = 0; i < 32; ++i) bags.push_back(random_tiles(3, 4, rng));
  std::vector<MilExample<double>> train;
  for (int i = 0; i < 32; ++i) train.push_back({&bags[std::size_t(i)], i % 2});
  const auto r = train_mil<double>(train, {}, cfg, 4, MilVariant::AbmilIb);
  CHECK(r.log.optimizer_steps == 16);
  CHECK(r.log.epochs.size() == 16);
}

TEST_CASE("training on separable bags") {
  Rng rng(31);
  std::vector<Matrix<float>> bags;
  std::vector<int> labels;
  for (int i = 0; i < 64; ++i) {
    const int label = i % 2;
    const std::size_t n = 4 + rng.uniform_index(6);
    Matrix<float> m(n, 8);
    for (float& x : m.values()) x = float(rng.normal());
    for (std::size_t t = 0; t < n; ++t) m(t, 0) += label ? 2.0f : -2.0f;
    bags.push_back(std::move(m));
    labels.push_back(label);
  }
  std::vector<MilExample<float>> train;
  for (std::size_t i = 0; i < bags.size(); ++i) train.push_back({&bags[i], labels[i]});
  MilTrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 6;
  cfg.grad_accum_steps = 4;
  cfg.seed = 8;
  const auto r = train_mil<float>(train, train, cfg, 8, MilVariant::AbmilIb);
  for (std::size_t e = 1; e < r.log.epochs.size(); ++e) {
    CHECK(r.log.epochs[e].train_loss < r.log.epochs[e - 1].train_loss);
  }
  CHECK(r.log.epochs.back().train_auroc == 1.0);
  CHECK(r.log.epochs.back().val_auroc == 1.0);

  const auto again = train_mil<float>(train, train, cfg, 8, MilVariant::AbmilIb);
  CHECK(again.params.flat == r.params.flat);

  const auto dir = std::filesystem::temp_directory_path() / "histoprog_test_mil";
  std::filesystem::create_directories(dir);
  write_mil_checkpoint(r.params, dir / "m.milp");
  const auto loaded = read_mil_checkpoint(dir / "m.milp");
  CHECK(loaded.variant == r.params.variant);
  CHECK(loaded.dim == 8);
  CHECK(loaded.flat == r.params.flat);
}

TEST_CASE("non-finite loss aborts training") {
  Matrix<double> bag(2, 4, std::vector<double>{1, 2, 3, 4, 5, 6, 7, std::nan("")});
  std::vector<MilExample<double>> train{{&bag, 1}};
  CHECK_THROWS_AS(train_mil<double>(train, {}, MilTrainConfig{}, 4, MilVariant::AbmilIb), NumericalError);
}
