#include "relspray/cohort.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "relspray/errors.hpp"

namespace relspray {

LogisticFit fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                         const std::vector<std::string>& names, int max_iter, double tol) {
  const std::size_t n = x.size();
  if (n == 0 || y.size() != n) throw DataError("logistic regression needs matching, non-empty x and y");
  const std::size_t p = x.front().size() + 1;
  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd Y(n);
  for (std::size_t i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    for (std::size_t j = 1; j < p; ++j) X(i, j) = x[i][j - 1];
    Y(i) = y[i];
  }
  auto separation_error = [&](const Eigen::VectorXd& beta) {
    // The covariate contributing most to the linear predictor's spread.
    std::size_t worst = 1;
    double best = -1.0;
    for (std::size_t j = 1; j < p; ++j) {
      const double sd = std::sqrt((X.col(j).array() - X.col(j).mean()).square().mean());
      const double c = std::abs(beta(j)) * sd;
      if (c > best) {
        best = c;
        worst = j;
      }
    }
    const std::string name = worst - 1 < names.size() ? names[worst - 1] : "x" + std::to_string(worst);
    return NumericError("logistic regression diverged (perfect separation) on covariate '" + name + "'");
  };

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  LogisticFit fit;
  for (int it = 1; it <= max_iter; ++it) {
    const Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd mu(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
      mu(i) = 1.0 / (1.0 + std::exp(-eta(i)));
      w(i) = mu(i) * (1.0 - mu(i));
    }
    if (w.maxCoeff() < 1e-12) throw separation_error(beta);
    const Eigen::MatrixXd H = X.transpose() * w.asDiagonal() * X;
    const Eigen::VectorXd g = X.transpose() * (Y - mu);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) throw separation_error(beta);
    const Eigen::VectorXd delta = ldlt.solve(g);
    if (!delta.allFinite()) throw separation_error(beta);
    beta += delta;
    fit.iterations = it;
    // Fitted probabilities pinned at 0/1 mean the MLE is at infinity.
    if (beta.cwiseAbs().maxCoeff() > 1e6 || (X * beta).cwiseAbs().maxCoeff() > 30.0) throw separation_error(beta);
    if (delta.cwiseAbs().maxCoeff() < tol) {
      fit.coefficients.assign(beta.data(), beta.data() + p);
      return fit;
    }
  }
  throw separation_error(beta);
}

namespace {

std::vector<double> covariates(const SubjectRecord& s) { return {s.age, s.sex == Sex::M ? 1.0 : 0.0}; }

double logit_of(const LogisticFit& f, const SubjectRecord& s) {
  const auto c = covariates(s);
  return f.coefficients[0] + f.coefficients[1] * c[0] + f.coefficients[2] * c[1];
}

}  // namespace

MatchResult propensity_match(const std::vector<SubjectRecord>& cases, const std::vector<SubjectRecord>& controls,
                             bool with_replacement) {
  if (cases.empty() || controls.empty()) throw DataError("propensity matching needs cases and controls");
  if (!with_replacement && controls.size() < cases.size())
    throw DataError("fewer controls than cases; matching without replacement impossible");
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (const auto& s : cases) {
    x.push_back(covariates(s));
    y.push_back(1);
  }
  for (const auto& s : controls) {
    x.push_back(covariates(s));
    y.push_back(0);
  }

  MatchResult res;
  // Constant covariates leave the design rank deficient; drop them (their
  // coefficient is unidentifiable and the logits are then constant in them).
  std::vector<int> keep;
  for (int j = 0; j < 2; ++j) {
    bool constant = true;
    for (const auto& r : x)
      if (r[j] != x.front()[j]) constant = false;
    if (!constant) keep.push_back(j);
  }
  const std::vector<std::string> all_names{"age", "sex"};
  std::vector<std::vector<double>> xr(x.size());
  std::vector<std::string> names;
  for (int j : keep) names.push_back(all_names[j]);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (int j : keep) xr[i].push_back(x[i][j]);
  const LogisticFit reduced = fit_logistic(xr, y, names);
  res.model.iterations = reduced.iterations;
  res.model.coefficients = {reduced.coefficients[0], 0.0, 0.0};
  for (std::size_t k = 0; k < keep.size(); ++k) res.model.coefficients[keep[k] + 1] = reduced.coefficients[k + 1];

  for (const auto& s : cases) res.case_logits.push_back(logit_of(res.model, s));
  for (const auto& s : controls) res.control_logits.push_back(logit_of(res.model, s));

  std::vector<bool> used(controls.size(), false);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    std::size_t best = controls.size();
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < controls.size(); ++j) {
      if (!with_replacement && used[j]) continue;
      const double d = std::abs(res.case_logits[i] - res.control_logits[j]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    used[best] = true;
    res.pairs.push_back({i, best, best_d});
  }
  return res;
}

std::vector<SplitPlan> make_splits(const std::vector<SubjectRecord>& subjects, SplitRatios ratios, int n_repeats,
                                   std::uint64_t seed) {
  if (ratios.train + ratios.val + ratios.test != 100 || ratios.train < 0 || ratios.val < 0 || ratios.test < 0)
    throw ConfigError("split ratios must be non-negative and sum to 100");
  std::set<std::string> ids;
  for (const auto& s : subjects) {
    if (s.scan_ids.empty()) throw DataError("subject " + s.subject_id + " has no scans");
    if (!ids.insert(s.subject_id).second) throw DataError("duplicate subject id " + s.subject_id);
  }
  std::array<std::vector<std::size_t>, 2> by_class;
  for (std::size_t i = 0; i < subjects.size(); ++i) by_class[static_cast<int>(subjects[i].group)].push_back(i);
  for (int c = 0; c < 2; ++c)
    if (!by_class[c].empty() && by_class[c].size() < 3)
      throw DataError(std::string("class ") + (c ? "AD" : "NC") + " has fewer than 3 subjects");
  if (by_class[0].empty() && by_class[1].empty()) throw DataError("no subjects to split");

  std::vector<SplitPlan> plans;
  for (int r = 0; r < n_repeats; ++r) {
    SplitPlan plan;
    plan.repeat_index = r;
    plan.seed = seed;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(r), 0x5b1u};
    std::mt19937_64 rng(seq);
    for (int c = 0; c < 2; ++c) {
      std::vector<std::size_t> idx = by_class[c];
      // Fisher-Yates with an explicit bounded draw so the permutation does not
      // depend on the standard library's shuffle.
      for (std::size_t i = idx.size(); i > 1; --i) {
        const std::uint64_t bound = i;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % bound;
        std::uint64_t v;
        do v = rng(); while (v >= limit);
        std::swap(idx[i - 1], idx[v % bound]);
      }
      const std::size_t n = idx.size();
      const std::size_t n_val = n * static_cast<std::size_t>(ratios.val) / 100;
      const std::size_t n_test = n * static_cast<std::size_t>(ratios.test) / 100;
      const std::size_t n_train = n - n_val - n_test;
      for (std::size_t k = 0; k < n; ++k) {
        auto& dst = k < n_train ? plan.train : (k < n_train + n_val ? plan.val : plan.test);
        for (const auto& scan : subjects[idx[k]].scan_ids) dst.push_back(scan);
      }
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

double auc_mann_whitney(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * (double(i) + double(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double n_pos = 0, n_neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == 1) {
      n_pos += 1;
      rank_sum += rank[i];
    } else {
      n_neg += 1;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw DataError("AUC undefined: only one class present");
  return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold) {
  if (scores.size() != labels.size() || scores.empty()) throw DataError("scores and labels must be non-empty and aligned");
  Metrics m;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool pred = scores[i] >= threshold;
    if (labels[i] == 1) (pred ? m.tp : m.fn)++;
    else (pred ? m.fp : m.tn)++;
  }
  m.auc = auc_mann_whitney(scores, labels);
  m.accuracy = double(m.tp + m.tn) / double(m.tp + m.fp + m.tn + m.fn);
  m.sensitivity = double(m.tp) / double(m.tp + m.fn);
  m.specificity = double(m.tn) / double(m.tn + m.fp);
  return m;
}

double percentile(std::vector<double> v, double q) {
  if (v.empty()) throw DataError("percentile of empty set");
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double f = pos - double(lo);
  return v[lo] + (v[hi] - v[lo]) * f;
}

Summary summarize(const std::vector<double>& v) {
  if (v.size() < 2) throw DataError("aggregation needs at least 2 runs");
  Summary s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.sd = std::sqrt(ss / double(v.size() - 1));
  s.lo = percentile(v, 0.025);
  s.hi = percentile(v, 0.975);
  return s;
}

AggregateMetrics aggregate_runs(const std::vector<Metrics>& runs) {
  std::vector<double> a, se, sp, auc;
  for (const auto& m : runs) {
    a.push_back(m.accuracy);
    se.push_back(m.sensitivity);
    sp.push_back(m.specificity);
    auc.push_back(m.auc);
  }
  return {summarize(a), summarize(se), summarize(sp), summarize(auc)};
}

std::string format_percent(const Summary& s) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.1f±%.1f%% [%.1f%%, %.1f%%]", 100 * s.mean, 100 * s.sd, 100 * s.lo, 100 * s.hi);
  return buf;
}

std::string format_fraction(const Summary& s) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f±%.2f [%.2f, %.2f]", s.mean, s.sd, s.lo, s.hi);
  return buf;
}

}  // namespace relspray
