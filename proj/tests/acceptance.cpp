// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Usage: acceptance [criterion numbers...] (default: all).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "histoprog/cli.hpp"
#include "histoprog/data_model.hpp"
#include "histoprog/mil.hpp"
#include "histoprog/pipeline.hpp"
#include "histoprog/sae.hpp"
#include "histoprog/stats.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace histoprog;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path find_stage(const fs::path& out, const std::string& stage) {
  for (const auto& e : fs::directory_iterator(out)) {
    if (e.path().filename().string().rfind(stage + "-", 0) == 0) return e.path();
  }
  throw std::runtime_error("no " + stage + " directory under " + out.string());
}

fs::path work_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("histoprog_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

int run_quiet(const std::vector<std::string>& args) {
  std::ostringstream sink;
  auto* old = std::cout.rdbuf(sink.rdbuf());
  const int code = cli::run(args);
  std::cout.rdbuf(old);
  return code;
}

void run_stages(const std::vector<std::string>& stages, const std::vector<std::string>& flags) {
  for (const auto& s : stages) {
    std::vector<std::string> args{s};
    args.insert(args.end(), flags.begin(), flags.end());
    if (const int code = run_quiet(args); code != 0) {
      throw std::runtime_error("command '" + s + "' exited with " + std::to_string(code));
    }
  }
}

// ---------------------------------------------------------------------------

Outcome c1_param_count() {
  const auto n = mil_param_count(1280);
  std::size_t all_equal = 0;
  for (const auto v : {MilVariant::AbmilIb, MilVariant::Abmil, MilVariant::AdditiveMil}) {
    all_equal += init_mil<float>(1280, v, 1).size() == 361218;
  }
  return {n == 361218 && all_equal == 3, "dim 1280 -> " + std::to_string(n) + " parameters (target 361218)"};
}

Outcome c2_hanley_mcneil() {
  const auto ci = hanley_mcneil_ci(0.67, 262, 271);
  const bool ok = std::abs(ci.lo - 0.63) <= 0.01 && std::abs(ci.hi - 0.72) <= 0.01;
  return {ok, "CI(0.67, 262, 271) = (" + fmt("%.4f", ci.lo) + ", " + fmt("%.4f", ci.hi) + "), target (0.63, 0.72) +-0.01"};
}

Outcome c3_gradients() {
  Rng rng(303);
  double worst = 0;
  std::string where;
  for (const auto v : {MilVariant::AbmilIb, MilVariant::Abmil, MilVariant::AdditiveMil}) {
    for (int i = 0; i < 20; ++i) {
      const auto inst = oracle::random_mil_instance(v, 16, rng);
      // Blocks up to 256 entries are checked in full, larger ones at 256 random coordinates.
      const double err = oracle::mil_fd_relative_error(inst, 256, rng);
      if (err > worst) {
        worst = err;
        where = to_string(v);
      }
    }
  }
  return {worst < 1e-6, "60 instances, max relative error " + fmt("%.2e", worst) + " (" + where + "), limit 1e-6"};
}

Outcome c4_decomposition() {
  Rng rng(404);
  double worst = 0;
  std::size_t mismatches = 0, tiles_checked = 0;
  for (int b = 0; b < 100; ++b) {
    const auto params = init_mil<float>(64, MilVariant::AbmilIb, rng.next_u64());
    const std::size_t n = 1 + rng.uniform_index(64);
    Matrix<float> tiles(n, 64);
    for (float& x : tiles.values()) x = float(rng.normal());
    const auto f = forward<float>(params, tiles);
    double exp_sum = 0, score_sum = 0, score_abs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      exp_sum += std::exp(double(f.attention_logits[i]));
      score_sum += f.decision_scores[i];
      score_abs += std::abs(double(f.decision_scores[i]));
      Matrix<float> single(1, 64, std::vector<float>(tiles.row(i).begin(), tiles.row(i).end()));
      mismatches += forward<float>(params, single).decision_scores[0] != f.decision_scores[i];
      ++tiles_checked;
    }
    worst = std::max(worst, std::abs(double(f.logit) * exp_sum - score_sum) / score_abs);
  }
  return {worst < 1e-5 && mismatches == 0, "100 bags: max relative gap " + fmt("%.2e", worst) + " (limit 1e-5), " +
                                               std::to_string(mismatches) + " of " + std::to_string(tiles_checked) +
                                               " singleton scores differ"};
}

Outcome c5_auroc() {
  Rng rng(505);
  std::size_t exact = 0;
  double identity = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.uniform_index(200);
    std::vector<double> s(n), neg(n), mono(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(rng.uniform_index(10)) / 4.0;
      y[i] = int(rng.uniform_index(2));
    }
    y[0] = 0;
    y[n - 1] = 1;
    for (std::size_t i = 0; i < n; ++i) {
      neg[i] = -s[i];
      mono[i] = std::atan(s[i] - 1.0) * 3.0 + 2.0;
    }
    const double a = auroc(s, y);
    exact += a == oracle::brute_force_auroc(s, y);
    identity = std::max({identity, std::abs(auroc(mono, y) - a), std::abs(auroc(neg, y) - (1.0 - a))});
  }
  return {exact == 100 && identity <= 1e-12,
          std::to_string(exact) + "/100 exact brute-force matches, identity error " + fmt("%.1e", identity)};
}

Outcome c6_survival() {
  const auto km = kaplan_meier(std::vector<double>{1, 2, 3}, std::vector<int>{1, 0, 1});
  // Hand product-limit: S(1) = 1 - 1/3, censored at 2, S(3) = S(1) * (1 - 1/1).
  const double s1 = 1.0 - 1.0 / 3.0;
  const bool km_ok = km.at(0.5) == 1.0 && km.at(1) == s1 && km.at(2) == s1 && km.at(3) == 0.0 &&
                     km.times == std::vector<double>{0, 1, 3} && km.at_risk == std::vector<std::size_t>{3, 3, 1} &&
                     km.censor_times == std::vector<double>{2};

  Rng rng(606);
  const std::size_t n = 80;
  std::vector<double> t(n);
  std::vector<int> e(n);
  Matrix<double> X(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = double(1 + rng.uniform_index(30));
    e[i] = rng.uniform() < 0.7;
    for (std::size_t j = 0; j < 3; ++j) X(i, j) = rng.normal();
  }
  const std::vector<double> zero(3, 0.0);
  const auto score = cox_score(t, e, X, zero);
  const auto fd = finite_diff_gradient(
      [&](std::span<const double> b) { return cox_log_partial_likelihood(t, e, X, b); }, zero);
  double rel = 0;
  for (std::size_t j = 0; j < 3; ++j) rel = std::max(rel, std::abs(score[j] - fd[j]) / std::abs(fd[j]));

  // Two groups, hazards 1 and 2, uniform censoring on [0, 3.3] (about 20% censored).
  Rng mc(6060);
  std::vector<double> tt;
  std::vector<int> ee;
  Matrix<double> G(2000, 1);
  std::size_t censored = 0;
  for (std::size_t i = 0; i < 2000; ++i) {
    const int g = int(i % 2);
    const double time = mc.exponential(g ? 2.0 : 1.0);
    const double c = mc.uniform(0.0, 3.3);
    G(i, 0) = g;
    tt.push_back(std::min(time, c));
    ee.push_back(time <= c);
    censored += time > c;
  }
  const auto fit = cox_fit(tt, ee, G, {"group"});
  const double hr = fit.hazard_ratios[0];
  const bool ok = km_ok && rel < 1e-6 && hr >= 1.8 && hr <= 2.2;
  return {ok, std::string("KM fixture ") + (km_ok ? "exact" : "WRONG") + ", score rel err " + fmt("%.1e", rel) +
                  ", HR " + fmt("%.3f", hr) + " in [1.8, 2.2] (" + fmt("%.1f", 100.0 * double(censored) / 2000) +
                  "% censored)"};
}

Outcome c7_sae_structure() {
  Rng rng(707);
  Matrix<float> tiles(20000, 32);
  for (float& x : tiles.values()) x = float(rng.normal() + 0.3);
  const auto init = init_sae<float>(32, 128, 8, tiles, 7);
  SaeTrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.epochs = 2;
  cfg.batch_size = 512;
  cfg.seed = 77;
  double worst_norm = 0;
  std::uint64_t steps = 0;
  auto hook = [&](std::uint64_t, const SaeParams<float>& p) {
    ++steps;
    for (std::size_t j = 0; j < p.n_latents; ++j) {
      double s = 0;
      for (std::size_t d = 0; d < p.dim; ++d) s += double(p.dec_w(d, j)) * p.dec_w(d, j);
      worst_norm = std::max(worst_norm, std::abs(std::sqrt(s) - 1.0));
    }
  };
  const auto a = train_sae(tiles, cfg, init, hook);
  const auto b = train_sae(tiles, cfg, init);

  Matrix<float> probe(10000, 32);
  for (float& x : probe.values()) x = float(2.0 * rng.normal());
  std::size_t bad = 0;
  for (const auto& c : encode_batch(a.params, probe)) {
    bad += c.size() > 8;
    for (const float v : c.activations) bad += !(v > 0.0f);
  }
  const bool same = a.params == b.params && a.log.step_loss == b.log.step_loss;
  return {bad == 0 && worst_norm < 1e-5 && same,
          std::to_string(bad) + " bad codes in 10000, max |norm-1| " + fmt("%.1e", worst_norm) + " over " +
              std::to_string(steps) + " steps, rerun " + (same ? "bit-identical" : "DIFFERS")};
}

Outcome c8_recovery() {
  Rng rng(2026);
  Rng atom_rng = rng.fork(1), tile_rng = rng.fork(2);
  const auto atoms = random_unit_atoms(64, 64, atom_rng);
  const auto planted = generate_planted_tiles(atoms, 500000, 4, 0.01, tile_rng);
  SaeTrainConfig cfg;
  cfg.lr = 1e-3;  // base rate raised from 5e-5: 8 epochs at batch 16384 is only 240 steps
  cfg.epochs = 8;
  cfg.batch_size = 16384;
  cfg.tail_fraction = 0.2;
  cfg.seed = 5;
  const auto r = train_sae(planted.tiles, cfg, init_sae<float>(64, 256, 4, planted.tiles, 3));
  const auto matches = match_dictionary(r.params, atoms);
  const double frac = fraction_matched(matches, 0.9);
  double min_cos = 1;
  for (const auto& m : matches) min_cos = std::min(min_cos, m.cosine);
  return {frac >= 0.9, fmt("%.1f", 100 * frac) + "% of 64 atoms matched at cosine >= 0.9 (min cosine " +
                           fmt("%.3f", min_cos) + "), target >= 90%"};
}

Outcome c9_pipeline() {
  const auto out = work_dir("pipeline") / "out";
  // Desk-scale overrides; everything else is the default configuration.
  const std::vector<std::string> flags{"--out",           out.string(), "--mil-lr",      "5e-4",
                                       "--sae-n-latents", "256",        "--sae-k",       "4",
                                       "--sae-lr",        "1e-3",       "--sae-batch-size", "256"};
  run_stages({"synth", "cv", "score", "sample", "train-sae", "encode", "select", "survival"}, flags);

  const auto cv = json::parse(slurp(find_stage(out, "cv") / artifacts::kCvReport));
  const double auc = cv.at("overall").at("auroc").get<double>();

  const auto truth = read_ground_truth(out / "cohort" / "ground_truth.json");
  const auto sae = read_sae_checkpoint(find_stage(out, "train-sae") / artifacts::kSaeCheckpoint);
  const auto matches = match_dictionary(sae, truth.atoms);
  const auto patterns = json::parse(slurp(find_stage(out, "select") / artifacts::kPatternReport));
  std::map<std::uint32_t, std::pair<std::size_t, std::string>> rank_of;
  for (const auto& p : patterns.at("selected")) {
    rank_of[p.at("latent").get<std::uint32_t>()] = {p.at("rank").get<std::size_t>(),
                                                    p.at("direction").is_null() ? "" : p.at("direction").get<std::string>()};
  }
  std::size_t found = 0;
  std::string planted;
  for (const auto& pa : truth.prognostic_atoms) {
    const auto& m = matches.at(pa.atom);
    const auto it = rank_of.find(m.latent);
    const bool hit = it != rank_of.end() && it->second.first < 8 && it->second.second == to_string(pa.direction);
    found += hit;
    planted += " atom" + std::to_string(pa.atom) + "->L" + std::to_string(m.latent) +
               (it == rank_of.end() ? "@-" : "@" + std::to_string(it->second.first + 1)) + (hit ? "" : "!");
  }

  const auto surv = json::parse(slurp(find_stage(out, "survival") / artifacts::kSurvivalReport));
  double hr = 0, lo = 0, hi = 0;
  for (const auto& c : surv.at("cox").at("covariates")) {
    if (c.at("name") == "risk") {
      hr = c.at("hazard_ratio").get<double>();
      lo = c.at("ci95")[0].get<double>();
      hi = c.at("ci95")[1].get<double>();
    }
  }
  const bool ok = auc >= 0.95 && found == truth.prognostic_atoms.size() && found == 4 && hr > 1 && lo > 1;
  return {ok, "(a) AUROC " + fmt("%.3f", auc) + " (b) " + std::to_string(found) + "/4 planted atoms in top 8 with direction [" +
                  planted.substr(1) + "] (c) risk HR " + fmt("%.2f", hr) + " CI (" + fmt("%.2f", lo) + ", " +
                  fmt("%.2f", hi) + ")"};
}

Outcome c10_null_calibration() {
  std::size_t covered = 0;
  for (std::uint64_t r = 0; r < 20; ++r) {
    SynthSpec spec;
    spec.seed = 1000 + r;
    spec.tiles_min = spec.tiles_max = 1;  // survival fields only matter here
    const auto synth = generate_synthetic_cohort(spec);
    std::vector<RiskGroup> risk;
    for (const auto cls : synth.truth.latent_class) {
      risk.push_back(cls == Direction::Shorter ? RiskGroup::Higher : RiskGroup::Lower);
    }
    Rng shuffle(r);
    shuffle.shuffle(risk.begin(), risk.end());
    const auto fit = cox_adjusted_analysis(synth.cohort, risk).fit;
    const auto i = fit.index_of("risk");
    covered += fit.ci_lo[i] <= 1.0 && 1.0 <= fit.ci_hi[i];
  }
  return {covered >= 18, std::to_string(covered) + "/20 shuffled-label risk CIs contain 1 (need >= 18)"};
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return files;
}

Outcome c11_determinism() {
  const auto out = work_dir("determinism") / "out";
  const std::vector<std::string> flags{
      "--out", out.string(), "--synth-patients-per-hospital", "20", "--synth-tiles-min", "60", "--synth-tiles-max",
      "100", "--mil-epochs", "3", "--mil-lr", "5e-4", "--sae-n-latents", "128", "--sae-k", "4", "--sae-lr", "1e-3",
      "--sae-batch-size", "256", "--sae-epochs", "2", "--selection-n-per-sign", "20000", "--threads", "2"};
  const std::vector<std::string> all{"synth", "cv", "score", "sample", "train-sae", "encode", "select", "survival", "report"};
  run_stages(all, flags);
  const auto first = snapshot(out);
  fs::remove_all(out);
  run_stages(all, flags);
  const auto second = snapshot(out);
  std::size_t differ = 0;
  std::string example;
  for (const auto& [name, bytes] : first) {
    const auto it = second.find(name);
    if (it == second.end() || it->second != bytes) {
      ++differ;
      if (example.empty()) example = " e.g. " + name;
    }
  }
  differ += second.size() > first.size() ? second.size() - first.size() : 0;
  return {differ == 0 && first.size() > 20,
          std::to_string(first.size()) + " artifacts from 9 commands, " + std::to_string(differ) + " differ" + example};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"parameter count", c1_param_count},
      {"Hanley-McNeil interval", c2_hanley_mcneil},
      {"MIL gradient oracle", c3_gradients},
      {"ABMIL-IB decomposition", c4_decomposition},
      {"AUROC oracle", c5_auroc},
      {"survival fixtures", c6_survival},
      {"SAE structure", c7_sae_structure},
      {"dictionary recovery", c8_recovery},
      {"end-to-end pipeline", c9_pipeline},
      {"null calibration", c10_null_calibration},
      {"determinism", c11_determinism},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("%s %2zu %-24s %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
