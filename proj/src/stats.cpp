#include "histoprog/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

namespace histoprog {

std::vector<std::string> FoldAssignment::patients_in(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : fold_of) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

FoldAssignment stratified_kfold(const Cohort& cohort, std::size_t k, std::uint64_t seed,
                                const SurvivalCutoffs& cutoffs) {
  if (k < 2) throw ValidationError("stratified_kfold: k must be >= 2");
  std::map<std::pair<std::string, int>, std::vector<std::string>> strata;
  for (const auto& p : cohort.patients) {
    const auto g = p.group(cutoffs);
    if (g != SurvivalGroup::Shorter && g != SurvivalGroup::Longer) continue;
    strata[{p.hospital, static_cast<int>(g)}].push_back(p.patient_id);
  }
  if (strata.empty()) throw ValidationError("stratified_kfold: no Shorter/Longer patients");

  FoldAssignment out;
  out.k = k;
  const Rng base(seed);
  std::size_t offset = 0;
  for (auto& [key, ids] : strata) {
    const std::string label = key.first + "/" + to_string(static_cast<SurvivalGroup>(key.second));
    if (ids.size() < k) {
      out.warnings.push_back("stratum " + label + " has " + std::to_string(ids.size()) + " patients, fewer than " +
                             std::to_string(k) + " folds");
    }
    std::sort(ids.begin(), ids.end());
    Rng rng = base.fork(fnv1a64(label));
    rng.shuffle(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) out.fold_of[ids[i]] = (offset + i) % k;
    offset = (offset + ids.size()) % k;
  }
  return out;
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ValidationError("auroc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (const int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("auroc: labels must be 0 or 1");
    n_pos += std::size_t(y);
  }
  const std::size_t n = labels.size();
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("AUROC undefined: need both classes");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t(0));
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Sum of doubled midranks of the positives keeps everything integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const std::uint64_t twice_mid = (i + 1) + (j + 1);
    for (std::size_t t = i; t <= j; ++t) {
      if (labels[order[t]] == 1) twice_rank_sum += twice_mid;
    }
    i = j + 1;
  }
  // 2U = 2 * rank_sum - n_pos (n_pos + 1); U counts ties as one half.
  const std::uint64_t twice_u = twice_rank_sum - std::uint64_t(n_pos) * (n_pos + 1);
  return (double(twice_u) / 2.0) / (double(n_pos) * double(n_neg));
}

AurocInterval hanley_mcneil_ci(double auc, std::size_t n_pos, std::size_t n_neg, double level) {
  if (n_pos == 0 || n_neg == 0) throw ValidationError("hanley_mcneil_ci: both class counts must be >= 1");
  if (!(auc >= 0.0 && auc <= 1.0)) throw ValidationError("hanley_mcneil_ci: auc must lie in [0, 1]");
  if (!(level > 0.0 && level < 1.0)) throw ValidationError("hanley_mcneil_ci: level must lie in (0, 1)");
  const double a = auc;
  const double q1 = a / (2.0 - a);
  const double q2 = 2.0 * a * a / (1.0 + a);
  const double var = (a * (1.0 - a) + (double(n_pos) - 1.0) * (q1 - a * a) + (double(n_neg) - 1.0) * (q2 - a * a)) /
                     (double(n_pos) * double(n_neg));
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 1.0 - (1.0 - level) / 2.0);
  AurocInterval ci;
  ci.se = std::sqrt(std::max(var, 0.0));
  ci.lo = std::clamp(a - z * ci.se, 0.0, 1.0);
  ci.hi = std::clamp(a + z * ci.se, 0.0, 1.0);
  return ci;
}

double f1_score(std::span<const SurvivalGroup> predictions, std::span<const SurvivalGroup> labels,
                SurvivalGroup positive) {
  if (predictions.size() != labels.size()) throw ValidationError("f1_score: length mismatch");
  if (predictions.empty()) throw ValidationError("f1_score: empty input");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const bool pp = predictions[i] == positive;
    const bool lp = labels[i] == positive;
    tp += pp && lp;
    fp += pp && !lp;
    fn += !pp && lp;
  }
  const double denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2 * tp / denom;
}

std::string to_string(RiskGroup r) { return r == RiskGroup::Higher ? "higher" : "lower"; }

std::vector<RiskAssignment> assemble_risk_groups(const Cohort& cohort, const FoldAssignment& folds,
                                                 std::size_t n_models, const FoldPredictor& predict,
                                                 std::uint64_t seed, const SurvivalCutoffs& cutoffs,
                                                 double threshold) {
  if (folds.k == 0 || n_models < folds.k) {
    throw ValidationError("assemble_risk_groups: expected " + std::to_string(folds.k) + " fold models, got " +
                          std::to_string(n_models));
  }
  const Rng base(seed);
  std::vector<RiskAssignment> out;
  out.reserve(cohort.patients.size());
  for (const auto& p : cohort.patients) {
    RiskAssignment r;
    r.patient_id = p.patient_id;
    r.group = p.group(cutoffs);
    if (r.group == SurvivalGroup::Shorter || r.group == SurvivalGroup::Longer) {
      const auto it = folds.fold_of.find(p.patient_id);
      if (it == folds.fold_of.end()) {
        throw ValidationError("assemble_risk_groups: patient " + p.patient_id + " has no fold");
      }
      r.model_fold = it->second;
      if (r.model_fold >= n_models) {
        throw ValidationError("assemble_risk_groups: no model for fold " + std::to_string(r.model_fold) +
                              " (patient " + p.patient_id + ")");
      }
    } else {
      Rng rng = base.fork(fnv1a64(p.patient_id));
      r.model_fold = std::size_t(rng.uniform_index(folds.k));
      r.random_fold = true;
    }
    r.p_longer = predict(r.model_fold, p);
    r.risk = r.p_longer >= threshold ? RiskGroup::Lower : RiskGroup::Higher;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Kaplan-Meier

double SurvivalCurve::at(double t) const {
  if (times.empty()) return 1.0;
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return survival_prob[std::size_t(it - times.begin()) - 1];
}

std::optional<double> SurvivalCurve::median() const {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (survival_prob[i] <= 0.5) return times[i];
  }
  return std::nullopt;
}

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events) {
  if (times.size() != events.size()) throw ValidationError("kaplan_meier: times and events differ in length");
  if (times.empty()) throw ValidationError("kaplan_meier: empty group");
  std::vector<std::size_t> order(times.size());
  std::iota(order.begin(), order.end(), std::size_t(0));
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] >= 0.0) || !std::isfinite(times[i])) throw ValidationError("kaplan_meier: times must be >= 0");
    if (events[i] != 0 && events[i] != 1) throw ValidationError("kaplan_meier: events must be 0 or 1");
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] < times[b]; });

  SurvivalCurve c;
  c.n_subjects = times.size();
  c.times.push_back(0.0);
  c.survival_prob.push_back(1.0);
  c.at_risk.push_back(times.size());
  c.n_events.push_back(0);
  double s = 1.0;
  std::size_t at_risk = times.size();
  for (std::size_t i = 0; i < order.size();) {
    const double t = times[order[i]];
    std::size_t d = 0, total = 0;
    while (i + total < order.size() && times[order[i + total]] == t) {
      if (events[order[i + total]] == 1) {
        ++d;
      } else {
        c.censor_times.push_back(t);
      }
      ++total;
    }
    if (d > 0) {
      s *= 1.0 - double(d) / double(at_risk);
      if (t == 0.0) {
        c.survival_prob[0] = s;
        c.at_risk[0] = at_risk;
        c.n_events[0] = d;
      } else {
        c.times.push_back(t);
        c.survival_prob.push_back(s);
        c.at_risk.push_back(at_risk);
        c.n_events.push_back(d);
      }
    }
    at_risk -= total;
    i += total;
  }
  return c;
}

std::map<std::string, SurvivalCurve> kaplan_meier_by_group(std::span<const double> times,
                                                           std::span<const int> events,
                                                           std::span<const std::string> groups) {
  if (groups.size() != times.size() || events.size() != times.size()) throw ValidationError("kaplan_meier_by_group: length mismatch");
  std::map<std::string, std::pair<std::vector<double>, std::vector<int>>> split;
  for (std::size_t i = 0; i < times.size(); ++i) {
    auto& [t, e] = split[groups[i]];
    t.push_back(times[i]);
    e.push_back(events[i]);
  }
  std::map<std::string, SurvivalCurve> out;
  for (const auto& [g, te] : split) out.emplace(g, kaplan_meier(te.first, te.second));
  return out;
}

}  // namespace histoprog
