#include <algorithm>
#include <cmath>
#include <numeric>

#include "histoprog/stats.hpp"

namespace histoprog {

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct CoxEval {
  double ll = 0;
  Vec grad;
  Mat hess;
};

void check_inputs(std::span<const double> times, std::span<const int> events, const Matrix<double>& X) {
  if (times.size() != events.size() || times.size() != X.rows()) {
    throw ValidationError("cox: times, events and covariate rows differ in length");
  }
  if (times.empty()) throw ValidationError("cox: no subjects");
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!std::isfinite(times[i]) || times[i] < 0) throw ValidationError("cox: times must be finite and >= 0");
    if (events[i] != 0 && events[i] != 1) throw ValidationError("cox: events must be 0 or 1");
  }
  if (!X.all_finite()) throw ValidationError("cox: covariates must be finite");
}

// Efron log partial likelihood with optional gradient and Hessian.
CoxEval evaluate(std::span<const double> times, std::span<const int> events, const Mat& X, const Vec& beta,
                 bool derivatives) {
  const Eigen::Index n = X.rows();
  const Eigen::Index p = X.cols();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return times[a] > times[b]; });

  const Vec eta = X * beta;
  CoxEval out;
  out.grad = Vec::Zero(p);
  out.hess = Mat::Zero(p, p);
  double s0 = 0;
  Vec s1 = Vec::Zero(p);
  Mat s2 = Mat::Zero(p, p);

  for (std::size_t i = 0; i < order.size();) {
    const double t = times[order[i]];
    std::size_t j = i;
    double d0 = 0;
    Vec d1 = Vec::Zero(p);
    Mat d2 = Mat::Zero(p, p);
    std::size_t deaths = 0;
    while (j < order.size() && times[order[j]] == t) {
      const Eigen::Index r = order[j];
      const double w = std::exp(eta[r]);
      const Vec x = X.row(r).transpose();
      s0 += w;
      if (derivatives) {
        s1 += w * x;
        s2 += w * x * x.transpose();
      }
      if (events[r] == 1) {
        ++deaths;
        out.ll += eta[r];
        d0 += w;
        if (derivatives) {
          out.grad += x;
          d1 += w * x;
          d2 += w * x * x.transpose();
        }
      }
      ++j;
    }
    for (std::size_t l = 0; l < deaths; ++l) {
      const double f = double(l) / double(deaths);
      const double den = s0 - f * d0;
      out.ll -= std::log(den);
      if (derivatives) {
        const Vec num1 = s1 - f * d1;
        const Mat num2 = s2 - f * d2;
        out.grad -= num1 / den;
        out.hess -= num2 / den - num1 * num1.transpose() / (den * den);
      }
    }
    i = j;
  }
  return out;
}

Mat to_eigen(const Matrix<double>& X) { return X.map(); }

}  // namespace

std::size_t CoxFit::index_of(const std::string& name) const {
  const auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
  if (it == covariate_names.end()) throw ValidationError("no covariate named " + name);
  return std::size_t(it - covariate_names.begin());
}

double cox_log_partial_likelihood(std::span<const double> times, std::span<const int> events,
                                  const Matrix<double>& X, std::span<const double> beta) {
  check_inputs(times, events, X);
  if (beta.size() != X.cols()) throw ValidationError("cox: beta length does not match covariates");
  return evaluate(times, events, to_eigen(X), Eigen::Map<const Vec>(beta.data(), Eigen::Index(beta.size())), false)
      .ll;
}

std::vector<double> cox_score(std::span<const double> times, std::span<const int> events, const Matrix<double>& X,
                              std::span<const double> beta) {
  check_inputs(times, events, X);
  if (beta.size() != X.cols()) throw ValidationError("cox: beta length does not match covariates");
  const auto e =
      evaluate(times, events, to_eigen(X), Eigen::Map<const Vec>(beta.data(), Eigen::Index(beta.size())), true);
  return {e.grad.data(), e.grad.data() + e.grad.size()};
}

CoxFit cox_fit(std::span<const double> times, std::span<const int> events, const Matrix<double>& X,
               const std::vector<std::string>& names) {
  check_inputs(times, events, X);
  if (names.size() != X.cols()) throw ValidationError("cox_fit: one name per covariate required");
  const auto n_events = std::size_t(std::count(events.begin(), events.end(), 1));
  if (n_events == 0) throw ValidationError("cox_fit: no events");

  Mat x = to_eigen(X);
  const Eigen::Index p = x.cols();
  for (Eigen::Index c = 0; c < p; ++c) {
    const double lo = x.col(c).minCoeff();
    const double hi = x.col(c).maxCoeff();
    if (lo == hi) throw ValidationError("degenerate covariate: " + names[std::size_t(c)] + " is constant");
  }
  // Centering leaves the partial likelihood unchanged and keeps exp() tame.
  x.rowwise() -= x.colwise().mean();

  CoxFit fit;
  fit.covariate_names = names;
  fit.n_used = times.size();
  fit.n_events = n_events;

  Vec beta = Vec::Zero(p);
  CoxEval cur = evaluate(times, events, x, beta, true);
  fit.log_likelihood_trace.push_back(cur.ll);
  for (std::size_t iter = 0; iter < 100; ++iter) {
    const Mat info = -cur.hess;
    Eigen::FullPivLU<Mat> lu(info);
    if (!lu.isInvertible()) {
      const Mat kernel = lu.kernel();
      Eigen::Index worst = 0;
      kernel.col(0).cwiseAbs().maxCoeff(&worst);
      throw ValidationError("degenerate covariate: information matrix is singular along " +
                            names[std::size_t(worst)]);
    }
    const Vec step = lu.solve(cur.grad);
    double scale = 1.0;
    CoxEval next;
    Vec candidate;
    for (int halvings = 0;; ++halvings) {
      candidate = beta + scale * step;
      next = evaluate(times, events, x, candidate, true);
      if (std::isfinite(next.ll) && next.ll >= cur.ll) break;
      if (halvings == 40) {
        fit.diagnostics = "step halving failed to increase the partial likelihood";
        next = cur;
        candidate = beta;
        break;
      }
      scale *= 0.5;
    }
    const double delta = next.ll - cur.ll;
    beta = candidate;
    cur = std::move(next);
    fit.log_likelihood_trace.push_back(cur.ll);
    fit.iterations = iter + 1;
    if (std::abs(delta) < 1e-9) {
      fit.converged = fit.diagnostics.empty();
      break;
    }
  }
  if (!fit.converged && fit.diagnostics.empty()) fit.diagnostics = "no convergence after 100 Newton iterations";

  const Mat info = -cur.hess;
  Eigen::FullPivLU<Mat> lu(info);
  if (!lu.isInvertible()) throw ValidationError("degenerate covariate: information matrix is singular at the optimum");
  const Mat cov = lu.inverse();
  fit.log_likelihood = cur.ll;
  for (Eigen::Index c = 0; c < p; ++c) {
    const double b = beta[c];
    const double se = std::sqrt(std::max(cov(c, c), 0.0));
    fit.coefficients.push_back(b);
    fit.hazard_ratios.push_back(std::exp(b));
    fit.standard_errors.push_back(se);
    fit.ci_lo.push_back(std::exp(b - 1.96 * se));
    fit.ci_hi.push_back(std::exp(b + 1.96 * se));
  }
  return fit;
}

AdjustedCox cox_adjusted_analysis(const Cohort& cohort, std::span<const RiskGroup> risk) {
  if (risk.size() != cohort.patients.size()) {
    throw ValidationError("cox_adjusted_analysis: one risk label per patient required");
  }
  AdjustedCox out;
  std::vector<double> times, all_times;
  std::vector<int> events, all_events;
  std::vector<std::string> labels;
  std::vector<double> values;
  for (std::size_t i = 0; i < cohort.patients.size(); ++i) {
    const auto& pt = cohort.patients[i];
    all_times.push_back(pt.survival_days);
    all_events.push_back(pt.event);
    labels.push_back(to_string(risk[i]));
    if (pt.excluded_from_cox()) {
      ++out.n_dropped_unknown_mgmt;
      continue;
    }
    times.push_back(pt.survival_days);
    events.push_back(pt.event);
    values.push_back(risk[i] == RiskGroup::Higher ? 1.0 : 0.0);
    values.push_back(pt.age_midpoint);
    values.push_back(pt.sex == Sex::M ? 1.0 : 0.0);
    values.push_back(pt.mgmt == Mgmt::Methylated ? 1.0 : 0.0);
  }
  if (times.empty()) throw ValidationError("cox_adjusted_analysis: every patient has unknown MGMT status");
  const Matrix<double> X(times.size(), 4, std::move(values));
  out.fit = cox_fit(times, events, X, {"risk", "age_midpoint", "sex", "mgmt"});
  out.curves = kaplan_meier_by_group(all_times, all_events, labels);
  return out;
}

AdjustedCox cox_adjusted_analysis(const Cohort& cohort, std::span<const RiskAssignment> risk) {
  std::vector<RiskGroup> labels;
  for (std::size_t i = 0; i < risk.size(); ++i) {
    if (i < cohort.patients.size() && risk[i].patient_id != cohort.patients[i].patient_id) {
      throw ValidationError("cox_adjusted_analysis: risk assignments are not aligned with the cohort");
    }
    labels.push_back(risk[i].risk);
  }
  return cox_adjusted_analysis(cohort, std::span<const RiskGroup>(labels));
}

}  // namespace histoprog
