#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "relspray/relaxometry.hpp"

namespace relspray {

enum class Sex { M, F };

struct SubjectRecord {
  std::string subject_id;
  ClassLabel group = ClassLabel::NC;
  double age = 0.0;
  Sex sex = Sex::F;
  std::vector<std::string> scan_ids;
};

struct LogisticFit {
  std::vector<double> coefficients;  // intercept first
  int iterations = 0;
};

/// Newton-Raphson / IRLS logistic regression. `x` is row-major n x p without
/// the intercept column. Converges when max |delta beta| < tol. Throws
/// NumericError naming the offending covariate on (quasi-)perfect separation.
LogisticFit fit_logistic(const std::vector<std::vector<double>>& x, const std::vector<int>& y,
                         const std::vector<std::string>& names, int max_iter = 100, double tol = 1e-8);

struct MatchPair {
  std::size_t case_index;
  std::size_t control_index;
  double distance;  // |logit_case - logit_control|
};

struct MatchResult {
  LogisticFit model;
  std::vector<double> case_logits, control_logits;
  std::vector<MatchPair> pairs;  // one per case, in case order
};

/// Greedy nearest-logit matching on P(case | age, sex). Cases are processed in
/// input order; ties go to the lowest control index.
MatchResult propensity_match(const std::vector<SubjectRecord>& cases, const std::vector<SubjectRecord>& controls,
                             bool with_replacement = false);

struct SplitRatios {
  int train = 70, val = 15, test = 15;
};

struct SplitPlan {
  int repeat_index = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> train, val, test;  // scan ids
};

/// Subject-grouped, class-balanced random splits. Per class, val and test get
/// floor(n * ratio / 100) subjects and train takes the remainder.
std::vector<SplitPlan> make_splits(const std::vector<SubjectRecord>& subjects, SplitRatios ratios = {},
                                   int n_repeats = 10, std::uint64_t seed = 0);

struct Metrics {
  double accuracy = 0, sensitivity = 0, specificity = 0, auc = 0;
  std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;
};

/// Mann-Whitney AUC with ties counted as 1/2. Throws DataError for single-class input.
double auc_mann_whitney(const std::vector<double>& scores, const std::vector<int>& labels);

/// score >= threshold predicts the positive class.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold = 0.5);

struct Summary {
  double mean = 0, sd = 0, lo = 0, hi = 0;
};

struct AggregateMetrics {
  Summary accuracy, sensitivity, specificity, auc;
};

/// Linear-interpolated percentile (numpy "linear"), q in [0, 1].
double percentile(std::vector<double> values, double q);
Summary summarize(const std::vector<double>& values);
AggregateMetrics aggregate_runs(const std::vector<Metrics>& runs);

/// "64.2±6.5% [53.5%, 76.9%]"
std::string format_percent(const Summary& s);
/// "0.77±0.06 [0.65, 0.85]"
std::string format_fraction(const Summary& s);

}  // namespace relspray
