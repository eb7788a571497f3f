#pragma once

// Classification metrics, stratified cross-validation, risk-group assembly,
// Kaplan-Meier curves and Cox proportional-hazards regression.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "histoprog/data_model.hpp"
#include "histoprog/numerics.hpp"

namespace histoprog {

// ---------------------------------------------------------------------------
// Cross-validation folds

struct FoldAssignment {
  std::size_t k = 0;
  std::map<std::string, std::size_t> fold_of;  // CV-eligible patients only
  std::vector<std::string> warnings;

  std::vector<std::string> patients_in(std::size_t fold) const;
};

/// Stratifies Shorter/Longer patients by (hospital, group). Each stratum is
/// sorted by id, shuffled by the seed and dealt round-robin; the starting fold
/// rotates from stratum to stratum so overall fold sizes stay balanced.
FoldAssignment stratified_kfold(const Cohort& cohort, std::size_t k, std::uint64_t seed,
                                const SurvivalCutoffs& cutoffs = {});

// ---------------------------------------------------------------------------
// Classification metrics

/// Mann-Whitney AUROC via midranks. Labels are 0/1; both classes required.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct AurocInterval {
  double se = 0;
  double lo = 0;
  double hi = 0;
};

AurocInterval hanley_mcneil_ci(double auc, std::size_t n_pos, std::size_t n_neg, double level = 0.95);

/// F1 of `positive` against the rest; 0 when precision + recall is 0.
double f1_score(std::span<const SurvivalGroup> predictions, std::span<const SurvivalGroup> labels,
                SurvivalGroup positive = SurvivalGroup::Longer);

// ---------------------------------------------------------------------------
// Risk groups

enum class RiskGroup { Higher, Lower };  // Higher = predicted Shorter
std::string to_string(RiskGroup r);

struct RiskAssignment {
  std::string patient_id;
  SurvivalGroup group = SurvivalGroup::Shorter;
  std::size_t model_fold = 0;
  bool random_fold = false;  // scored by a randomly chosen fold model
  double p_longer = 0;
  RiskGroup risk = RiskGroup::Higher;
};

/// Returns P(longer) for a patient under the model trained for `fold`.
using FoldPredictor = std::function<double(std::size_t fold, const PatientRecord& patient)>;

/// CV patients are scored by their own test-fold model; Intermediate and
/// Excluded patients by a fold model drawn uniformly per patient from the seed.
std::vector<RiskAssignment> assemble_risk_groups(const Cohort& cohort, const FoldAssignment& folds,
                                                 std::size_t n_models, const FoldPredictor& predict,
                                                 std::uint64_t seed, const SurvivalCutoffs& cutoffs = {},
                                                 double threshold = 0.5);

// ---------------------------------------------------------------------------
// Kaplan-Meier

struct SurvivalCurve {
  // First point is (0, 1.0); the rest are the distinct event times.
  std::vector<double> times;
  std::vector<double> survival_prob;
  std::vector<std::size_t> at_risk;
  std::vector<std::size_t> n_events;
  std::vector<double> censor_times;  // sorted, with multiplicity
  std::size_t n_subjects = 0;

  /// Right-continuous step value S(t).
  double at(double t) const;
  /// Smallest time with S(t) <= 0.5, if reached.
  std::optional<double> median() const;
};

SurvivalCurve kaplan_meier(std::span<const double> times, std::span<const int> events);

/// One curve per distinct label, keyed by label.
std::map<std::string, SurvivalCurve> kaplan_meier_by_group(std::span<const double> times,
                                                           std::span<const int> events,
                                                           std::span<const std::string> groups);

// ---------------------------------------------------------------------------
// Cox proportional hazards (Efron ties)

struct CoxFit {
  std::vector<std::string> covariate_names;
  std::vector<double> coefficients;
  std::vector<double> hazard_ratios;
  std::vector<double> standard_errors;
  std::vector<double> ci_lo;  // exp(beta - 1.96 se)
  std::vector<double> ci_hi;
  double log_likelihood = 0;
  std::vector<double> log_likelihood_trace;  // one entry per accepted iterate, starting at beta = 0
  std::size_t n_used = 0;
  std::size_t n_events = 0;
  std::size_t iterations = 0;
  bool converged = false;
  std::string diagnostics;

  std::size_t index_of(const std::string& name) const;
};

/// Efron log partial likelihood; X is n x p.
double cox_log_partial_likelihood(std::span<const double> times, std::span<const int> events,
                                  const Matrix<double>& X, std::span<const double> beta);

/// Gradient of cox_log_partial_likelihood with respect to beta.
std::vector<double> cox_score(std::span<const double> times, std::span<const int> events,
                              const Matrix<double>& X, std::span<const double> beta);

CoxFit cox_fit(std::span<const double> times, std::span<const int> events, const Matrix<double>& X,
               const std::vector<std::string>& names);

struct AdjustedCox {
  CoxFit fit;
  std::map<std::string, SurvivalCurve> curves;  // keyed by "higher" / "lower"
  std::size_t n_dropped_unknown_mgmt = 0;
};

/// Covariates risk (Higher = 1), age_midpoint, sex (M = 1), mgmt (methylated = 1);
/// patients with unknown MGMT are dropped from the fit. `risk` is aligned
/// with cohort.patients. KM curves use every patient.
AdjustedCox cox_adjusted_analysis(const Cohort& cohort, std::span<const RiskGroup> risk);
AdjustedCox cox_adjusted_analysis(const Cohort& cohort, std::span<const RiskAssignment> risk);

}  // namespace histoprog
