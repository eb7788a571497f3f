#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "histoprog/stats.hpp"
#include "oracles.hpp"

using namespace histoprog;

namespace {

PatientRecord patient(const std::string& id, const std::string& hospital, int days, int event) {
  PatientRecord p;
  p.patient_id = id;
  p.hospital = hospital;
  p.embedding_path = id + ".emb";
  p.survival_days = days;
  p.event = event;
  return p;
}

// Efron log partial likelihood straight from its definition.
double efron_reference(const std::vector<double>& t, const std::vector<int>& e, const Matrix<double>& X,
                       const std::vector<double>& beta) {
  const std::size_t n = t.size();
  std::vector<double> eta(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < beta.size(); ++j) eta[i] += X(i, j) * beta[j];
  }
  std::set<double> event_times;
  for (std::size_t i = 0; i < n; ++i) {
    if (e[i]) event_times.insert(t[i]);
  }
  double ll = 0;
  for (const double s : event_times) {
    double risk = 0, tied = 0;
    int d = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (t[i] >= s) risk += std::exp(eta[i]);
      if (t[i] == s && e[i]) {
        tied += std::exp(eta[i]);
        ll += eta[i];
        ++d;
      }
    }
    for (int l = 0; l < d; ++l) ll -= std::log(risk - double(l) / d * tied);
  }
  return ll;
}

struct SurvivalData {
  std::vector<double> t;
  std::vector<int> e;
  Matrix<double> X;
};

// Two groups with exponential hazards 1 and hr, uniform censoring tuned to about 20%.
SurvivalData two_group_exponential(std::size_t n, double hr, std::uint64_t seed) {
  Rng rng(seed);
  SurvivalData d{{}, {}, Matrix<double>(n, 1)};
  for (std::size_t i = 0; i < n; ++i) {
    const int g = int(i % 2);
    const double time = rng.exponential(g ? hr : 1.0);
    const double censor = rng.uniform(0.0, 3.3);
    d.X(i, 0) = g;
    d.t.push_back(std::min(time, censor));
    d.e.push_back(time <= censor ? 1 : 0);
  }
  return d;
}

}  // namespace

TEST_CASE("auroc fixtures") {
  CHECK(auroc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
  CHECK(auroc(std::vector<double>{3, 3, 3, 3}, std::vector<int>{1, 0, 1, 0}) == 0.5);
  CHECK_THROWS_WITH(auroc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), doctest::Contains("AUROC undefined"));
  CHECK_THROWS_AS(auroc(std::vector<double>{1, 2}, std::vector<int>{1, 2}), ValidationError);
}

TEST_CASE("auroc equals brute-force pair counting") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(60);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng.uniform_index(6));  // many ties
      y[i] = int(rng.uniform_index(2));
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(auroc(s, y) == oracle::brute_force_auroc(s, y));
    std::vector<double> neg(n), mono(n);
    for (std::size_t i = 0; i < n; ++i) {
      neg[i] = -s[i];
      mono[i] = std::exp(0.3 * s[i]) + 7;
    }
    CHECK(std::abs(auroc(mono, y) - auroc(s, y)) < 1e-12);
    CHECK(std::abs(auroc(neg, y) - (1.0 - auroc(s, y))) < 1e-12);
  }
}

TEST_CASE("hanley-mcneil") {
  auto ci = hanley_mcneil_ci(0.5, 10, 10);
  CHECK(ci.se == doctest::Approx(std::sqrt(0.0175)).epsilon(1e-12));
  CHECK(ci.lo == doctest::Approx(0.2407).epsilon(1e-3));
  CHECK(ci.hi == doctest::Approx(0.7593).epsilon(1e-3));
  ci = hanley_mcneil_ci(1.0, 10, 10);
  CHECK(ci.se == 0.0);
  CHECK(ci.lo == 1.0);
  CHECK(ci.hi == 1.0);
  ci = hanley_mcneil_ci(0.67, 262, 271);
  CHECK(ci.lo == doctest::Approx(0.624).epsilon(2e-3));
  CHECK(ci.hi == doctest::Approx(0.716).epsilon(2e-3));
  CHECK_THROWS_AS(hanley_mcneil_ci(0.7, 0, 5), ValidationError);
  CHECK(hanley_mcneil_ci(0.02, 5, 5).lo == 0.0);
}

TEST_CASE("f1") {
  using G = SurvivalGroup;
  const std::vector<G> truth{G::Longer, G::Longer, G::Longer, G::Shorter, G::Shorter};
  const std::vector<G> pred{G::Longer, G::Longer, G::Shorter, G::Longer, G::Shorter};
  CHECK(f1_score(pred, truth) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_score(truth, truth) == 1.0);
  const std::vector<G> none{G::Shorter, G::Shorter};
  CHECK(f1_score(none, none) == 0.0);
}

TEST_CASE("stratified folds") {
  Cohort c;
  // Hospital A: 10 Shorter; hospital B: 7 Longer, 2 Intermediate, 1 Excluded.
  for (int i = 0; i < 10; ++i) c.patients.push_back(patient("A" + std::to_string(i), "A", 50, 1));
  for (int i = 0; i < 7; ++i) c.patients.push_back(patient("B" + std::to_string(i), "B", 500, 0));
  c.patients.push_back(patient("Bi1", "B", 250, 1));
  c.patients.push_back(patient("Bi2", "B", 260, 1));
  c.patients.push_back(patient("Bx", "B", 20, 0));
  c.hospitals = {"A", "B"};
  const auto f = stratified_kfold(c, 5, 3);
  CHECK(f.fold_of.size() == 17);
  CHECK(f.fold_of.count("Bi1") == 0);
  CHECK(f.fold_of.count("Bx") == 0);
  std::vector<int> a(5, 0), b(5, 0);
  for (const auto& [id, fold] : f.fold_of) (id[0] == 'A' ? a : b)[fold]++;
  CHECK(a == std::vector<int>{2, 2, 2, 2, 2});
  std::sort(b.begin(), b.end());
  CHECK(b == std::vector<int>{1, 1, 1, 2, 2});
  CHECK(f.warnings.size() == 0);
  std::size_t total = 0;
  for (std::size_t k = 0; k < 5; ++k) total += f.patients_in(k).size();
  CHECK(total == 17);
  CHECK(stratified_kfold(c, 5, 3).fold_of == f.fold_of);

  const auto small = stratified_kfold(c, 8, 3);
  CHECK(small.warnings.size() == 1);
}

TEST_CASE("risk group assembly") {
  Cohort c;
  c.patients = {patient("s1", "A", 50, 1), patient("l1", "A", 500, 1), patient("i1", "A", 250, 1),
                patient("x1", "A", 100, 0)};
  FoldAssignment folds;
  folds.k = 3;
  folds.fold_of = {{"s1", 2}, {"l1", 0}};
  std::vector<std::size_t> calls;
  // Model f predicts P(longer) = 0.1 * (f + 1) for everyone.
  const FoldPredictor predict = [&](std::size_t fold, const PatientRecord&) {
    calls.push_back(fold);
    return 0.1 * double(fold + 1) + (fold == 0 ? 0.6 : 0.0);
  };
  const auto r = assemble_risk_groups(c, folds, 3, predict, 42);
  REQUIRE(r.size() == 4);
  CHECK(r[0].model_fold == 2);
  CHECK_FALSE(r[0].random_fold);
  CHECK(r[0].risk == RiskGroup::Higher);  // p = 0.3
  CHECK(r[1].model_fold == 0);
  CHECK(r[1].risk == RiskGroup::Lower);  // p = 0.7
  CHECK(r[2].random_fold);
  CHECK(r[3].random_fold);
  CHECK(r[2].group == SurvivalGroup::Intermediate);
  CHECK(r[3].group == SurvivalGroup::Excluded);
  CHECK(calls.size() == 4);
  const auto again = assemble_risk_groups(c, folds, 3, predict, 42);
  CHECK(again[2].model_fold == r[2].model_fold);
  CHECK(again[3].model_fold == r[3].model_fold);

  // Random choices are spread over all models.
  Cohort many;
  for (int i = 0; i < 300; ++i) many.patients.push_back(patient("i" + std::to_string(i), "A", 250, 1));
  std::vector<int> used(3, 0);
  for (const auto& x : assemble_risk_groups(many, FoldAssignment{3, {}, {}}, 3, predict, 1)) used[x.model_fold]++;
  for (const int u : used) CHECK(u > 70);

  Cohort cv_only;
  cv_only.patients = {c.patients[0], c.patients[1]};
  for (const auto& x : assemble_risk_groups(cv_only, folds, 3, predict, 42)) CHECK_FALSE(x.random_fold);

  FoldAssignment broken = folds;
  broken.fold_of["s1"] = 7;
  CHECK_THROWS_AS(assemble_risk_groups(c, broken, 3, predict, 42), ValidationError);
}

TEST_CASE("kaplan-meier") {
  const std::vector<double> t{1, 2, 3};
  const std::vector<int> e{1, 0, 1};
  const auto km = kaplan_meier(t, e);
  CHECK(km.at(0.5) == 1.0);
  CHECK(km.at(1) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(km.at(2.5) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(km.at(3) == 0.0);
  CHECK(km.times == std::vector<double>{0, 1, 3});
  CHECK(km.at_risk == std::vector<std::size_t>{3, 3, 1});
  CHECK(km.censor_times == std::vector<double>{2});
  REQUIRE(km.median().has_value());
  CHECK(*km.median() == 3.0);

  const std::vector<int> none{0, 0, 0};
  const auto flat = kaplan_meier(t, none);
  CHECK(flat.at(100) == 1.0);
  CHECK_FALSE(flat.median().has_value());
  CHECK_THROWS_AS(kaplan_meier(std::vector<double>{}, std::vector<int>{}), ValidationError);

  // Ties: two deaths among four at t = 5.
  const auto tied = kaplan_meier(std::vector<double>{5, 5, 7, 9}, std::vector<int>{1, 1, 0, 1});
  CHECK(tied.at(5) == doctest::Approx(0.5));
  CHECK(tied.at(9) == 0.0);

  const std::vector<std::string> groups{"a", "b", "a"};
  const auto by = kaplan_meier_by_group(t, e, groups);
  CHECK(by.size() == 2);
  CHECK(by.at("a").at(3) == 0.0);
  CHECK(by.at("a").at(1) == doctest::Approx(0.5));
  CHECK(by.at("b").at(100) == 1.0);
}

TEST_CASE("cox likelihood and score") {
  Rng rng(2);
  const std::size_t n = 60;
  std::vector<double> t(n);
  std::vector<int> e(n);
  Matrix<double> X(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = double(1 + rng.uniform_index(15));  // heavy ties
    e[i] = rng.uniform() < 0.7;
    for (std::size_t j = 0; j < 3; ++j) X(i, j) = rng.normal();
  }
  for (const std::vector<double> beta : {std::vector<double>{0, 0, 0}, std::vector<double>{0.3, -0.7, 0.1}}) {
    const double ll = cox_log_partial_likelihood(t, e, X, beta);
    CHECK(ll == doctest::Approx(efron_reference(t, e, X, beta)).epsilon(1e-12));
    const auto g = cox_score(t, e, X, beta);
    const auto fd = finite_diff_gradient([&](std::span<const double> b) { return cox_log_partial_likelihood(t, e, X, b); },
                                         beta);
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(g[j] - fd[j]) <= 1e-6 * std::max(1.0, std::abs(fd[j])));
  }
}

TEST_CASE("cox fit recovers the maximum") {
  Rng rng(3);
  const std::size_t n = 200;
  std::vector<double> t(n);
  std::vector<int> e(n);
  Matrix<double> X(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = rng.normal();
    t[i] = std::ceil(10 * rng.exponential(std::exp(0.5 * X(i, 0))));
    e[i] = rng.uniform() < 0.8;
  }
  const auto fit = cox_fit(t, e, X, {"x"});
  CHECK(fit.converged);
  // Golden-section search on the reference likelihood.
  double lo = -3, hi = 3;
  const double phi = (std::sqrt(5.0) - 1) / 2;
  for (int it = 0; it < 200; ++it) {
    const double a = hi - phi * (hi - lo), b = lo + phi * (hi - lo);
    if (efron_reference(t, e, X, {a}) > efron_reference(t, e, X, {b})) {
      hi = b;
    } else {
      lo = a;
    }
  }
  CHECK(fit.coefficients[0] == doctest::Approx((lo + hi) / 2).epsilon(1e-6));
  CHECK(fit.log_likelihood == doctest::Approx(efron_reference(t, e, X, fit.coefficients)).epsilon(1e-10));
  for (std::size_t i = 1; i < fit.log_likelihood_trace.size(); ++i) {
    CHECK(fit.log_likelihood_trace[i] >= fit.log_likelihood_trace[i - 1] - 1e-12);
  }
  CHECK(fit.index_of("x") == 0);
  CHECK(fit.hazard_ratios[0] == doctest::Approx(std::exp(fit.coefficients[0])));
  CHECK(fit.ci_lo[0] == doctest::Approx(std::exp(fit.coefficients[0] - 1.96 * fit.standard_errors[0])));
}

TEST_CASE("cox monte carlo and degenerate covariates") {
  const auto d = two_group_exponential(2000, 2.0, 11);
  const double censored = 1.0 - double(std::accumulate(d.e.begin(), d.e.end(), 0)) / 2000.0;
  CHECK(censored > 0.15);
  CHECK(censored < 0.25);
  const auto fit = cox_fit(d.t, d.e, d.X, {"group"});
  CHECK(fit.hazard_ratios[0] >= 1.8);
  CHECK(fit.hazard_ratios[0] <= 2.2);
  CHECK(fit.n_used == 2000);

  Matrix<double> constant(2000, 2);
  for (std::size_t i = 0; i < 2000; ++i) {
    constant(i, 0) = d.X(i, 0);
    constant(i, 1) = 4.0;
  }
  CHECK_THROWS_WITH(cox_fit(d.t, d.e, constant, {"group", "site"}), doctest::Contains("degenerate covariate: site"));

  Matrix<double> collinear(2000, 2);
  for (std::size_t i = 0; i < 2000; ++i) {
    collinear(i, 0) = d.X(i, 0);
    collinear(i, 1) = 2 * d.X(i, 0) + 1;
  }
  CHECK_THROWS_WITH(cox_fit(d.t, d.e, collinear, {"a", "b"}), doctest::Contains("degenerate covariate"));
}

TEST_CASE("adjusted cox analysis") {
  Cohort c;
  Rng rng(5);
  std::vector<RiskGroup> risk;
  for (int i = 0; i < 400; ++i) {
    const bool high = i % 2 == 0;
    auto p = patient("p" + std::to_string(i), "A", 0, 1);
    p.survival_days = 1 + int(rng.exponential(high ? 1.0 / 200 : 1.0 / 500));
    p.age_midpoint = 42.5 + 5.0 * double(rng.uniform_index(8));
    p.sex = rng.uniform() < 0.5 ? Sex::M : Sex::F;
    p.mgmt = i % 10 == 3 ? Mgmt::Unknown : (rng.uniform() < 0.5 ? Mgmt::Methylated : Mgmt::Unmethylated);
    c.patients.push_back(p);
    risk.push_back(high ? RiskGroup::Higher : RiskGroup::Lower);
  }
  const auto a = cox_adjusted_analysis(c, risk);
  CHECK(a.n_dropped_unknown_mgmt == 40);
  CHECK(a.fit.n_used == 360);
  CHECK(a.fit.covariate_names == std::vector<std::string>{"risk", "age_midpoint", "sex", "mgmt"});
  CHECK(a.fit.hazard_ratios[0] > 1.5);
  CHECK(a.fit.ci_lo[0] > 1.0);
  CHECK(a.curves.at("higher").n_subjects == 200);
  CHECK(a.curves.at("lower").n_subjects == 200);
  CHECK_THROWS_AS(cox_adjusted_analysis(c, std::span<const RiskGroup>(risk).first(10)), ValidationError);
}
