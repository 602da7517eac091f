#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "relspray/cohort.hpp"
#include "relspray/dataset.hpp"
#include "relspray/errors.hpp"

using namespace relspray;

namespace {

SubjectRecord subj(const std::string& id, ClassLabel g, double age, Sex s, int scans = 1) {
  SubjectRecord r;
  r.subject_id = id;
  r.group = g;
  r.age = age;
  r.sex = s;
  for (int i = 0; i < scans; ++i) r.scan_ids.push_back(id + "_s" + std::to_string(i));
  return r;
}

double auc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        den += 1;
        num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return num / den;
}

double loglik(const std::vector<double>& x, const std::vector<int>& y, double b0, double b1) {
  double l = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = b0 + b1 * x[i];
    l += y[i] * z - std::log1p(std::exp(z));
  }
  return l;
}

}  // namespace

TEST_SUITE("cohort") {
  TEST_CASE("identical covariates give zero distances") {
    std::vector<SubjectRecord> cases, controls;
    for (int i = 0; i < 3; ++i) cases.push_back(subj("c" + std::to_string(i), ClassLabel::AD, 70, Sex::F));
    for (int i = 0; i < 5; ++i) controls.push_back(subj("n" + std::to_string(i), ClassLabel::NC, 70, Sex::F));
    const MatchResult m = propensity_match(cases, controls);
    REQUIRE(m.pairs.size() == 3);
    for (const auto& p : m.pairs) CHECK(p.distance == doctest::Approx(0.0));
    CHECK(m.pairs[0].control_index == 0);
    CHECK(m.pairs[1].control_index == 1);
  }

  TEST_CASE("greedy matching equals a brute-force greedy oracle") {
    std::vector<SubjectRecord> cases{subj("c0", ClassLabel::AD, 75, Sex::F), subj("c1", ClassLabel::AD, 68, Sex::M),
                                     subj("c2", ClassLabel::AD, 81, Sex::F), subj("c3", ClassLabel::AD, 72, Sex::M)};
    std::vector<SubjectRecord> controls;
    const double ages[] = {60, 66, 70, 73, 77, 80, 64, 71};
    for (int i = 0; i < 8; ++i)
      controls.push_back(subj("n" + std::to_string(i), ClassLabel::NC, ages[i], i % 2 ? Sex::M : Sex::F));
    const MatchResult m = propensity_match(cases, controls);
    std::vector<bool> used(8, false);
    for (std::size_t c = 0; c < 4; ++c) {
      double best = std::numeric_limits<double>::infinity();
      std::size_t arg = 0;
      for (std::size_t j = 0; j < 8; ++j) {
        if (used[j]) continue;
        const double d = std::abs(m.case_logits[c] - m.control_logits[j]);
        if (d < best) {
          best = d;
          arg = j;
        }
      }
      used[arg] = true;
      CHECK(m.pairs[c].control_index == arg);
      CHECK(m.pairs[c].distance == doctest::Approx(best));
    }
  }

  TEST_CASE("logistic MLE matches a grid search") {
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    const std::vector<int> y{0, 0, 1, 0, 1, 1};
    std::vector<std::vector<double>> X;
    for (double v : x) X.push_back({v});
    const LogisticFit f = fit_logistic(X, y, {"x"});
    double best = -1e300, b0b = 0, b1b = 0;
    for (double b0 = -8; b0 <= 2; b0 += 0.01)
      for (double b1 = 0; b1 <= 3; b1 += 0.005) {
        const double l = loglik(x, y, b0, b1);
        if (l > best) {
          best = l;
          b0b = b0;
          b1b = b1;
        }
      }
    // Refine the grid optimum locally and compare likelihoods and coefficients.
    for (double step = 0.001; step >= 1e-6; step /= 10)
      for (int it = 0; it < 200; ++it) {
        bool moved = false;
        for (auto [d0, d1] : {std::pair{step, 0.0}, {-step, 0.0}, {0.0, step}, {0.0, -step}}) {
          const double l = loglik(x, y, b0b + d0, b1b + d1);
          if (l > best) {
            best = l;
            b0b += d0;
            b1b += d1;
            moved = true;
          }
        }
        if (!moved) break;
      }
    CHECK(std::abs(f.coefficients[0] - b0b) < 1e-4);
    CHECK(std::abs(f.coefficients[1] - b1b) < 1e-4);
  }

  TEST_CASE("perfect separation names the covariate") {
    std::vector<std::vector<double>> X{{1}, {2}, {3}, {4}};
    try {
      fit_logistic(X, {0, 0, 1, 1}, {"age"});
      FAIL("expected separation error");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("age") != std::string::npos);
    }
  }

  TEST_CASE("rescaling age leaves the matched pairs unchanged") {
    std::mt19937 rng(9);
    std::normal_distribution<double> a(70, 8);
    std::vector<SubjectRecord> cases, controls;
    for (int i = 0; i < 15; ++i) cases.push_back(subj("c" + std::to_string(i), ClassLabel::AD, a(rng) + 3, i % 3 ? Sex::F : Sex::M));
    for (int i = 0; i < 40; ++i) controls.push_back(subj("n" + std::to_string(i), ClassLabel::NC, a(rng), i % 2 ? Sex::F : Sex::M));
    const MatchResult m1 = propensity_match(cases, controls);
    for (auto& s : cases) s.age *= 12.0;
    for (auto& s : controls) s.age *= 12.0;
    const MatchResult m2 = propensity_match(cases, controls);
    for (std::size_t i = 0; i < cases.size(); ++i) CHECK(m1.pairs[i].control_index == m2.pairs[i].control_index);
  }

  TEST_CASE("matching with replacement may reuse controls") {
    std::vector<SubjectRecord> cases{subj("c0", ClassLabel::AD, 70, Sex::F), subj("c1", ClassLabel::AD, 70.1, Sex::F)};
    std::vector<SubjectRecord> controls{subj("n0", ClassLabel::NC, 70, Sex::F), subj("n1", ClassLabel::NC, 50, Sex::F),
                                        subj("n2", ClassLabel::NC, 60, Sex::F), subj("n3", ClassLabel::NC, 79, Sex::F)};
    const MatchResult m = propensity_match(cases, controls, true);
    CHECK(m.pairs[0].control_index == m.pairs[1].control_index);
  }

  TEST_CASE("splits of 20 subjects are 14/3/3") {
    std::vector<SubjectRecord> s;
    for (int i = 0; i < 20; ++i) s.push_back(subj("s" + std::to_string(i), ClassLabel::NC, 60, Sex::F));
    const auto plans = make_splits(s, {}, 3, 1);
    for (const auto& p : plans) {
      CHECK(p.train.size() == 14);
      CHECK(p.val.size() == 3);
      CHECK(p.test.size() == 3);
    }
  }

  TEST_CASE("splits keep subjects together, are disjoint, exhaustive and reproducible") {
    std::vector<SubjectRecord> s;
    for (int i = 0; i < 30; ++i)
      s.push_back(subj("s" + std::to_string(i), i % 2 ? ClassLabel::AD : ClassLabel::NC, 60, Sex::F, 1 + i % 3));
    const auto a = make_splits(s, {}, 10, 5);
    const auto b = make_splits(s, {}, 10, 5);
    for (std::size_t r = 0; r < a.size(); ++r) {
      CHECK(a[r].train == b[r].train);
      CHECK(a[r].test == b[r].test);
      std::map<std::string, int> part;
      auto put = [&](const std::vector<std::string>& ids, int p) {
        for (const auto& id : ids) {
          CHECK(part.count(id) == 0);
          part[id] = p;
        }
      };
      put(a[r].train, 0);
      put(a[r].val, 1);
      put(a[r].test, 2);
      std::size_t total = 0;
      for (const auto& sub : s) {
        total += sub.scan_ids.size();
        std::set<int> where;
        for (const auto& id : sub.scan_ids) where.insert(part.at(id));
        CHECK(where.size() == 1);
      }
      CHECK(part.size() == total);
    }
    CHECK(a[0].test != a[1].test);
  }

  TEST_CASE("split errors") {
    std::vector<SubjectRecord> s{subj("a", ClassLabel::NC, 1, Sex::F), subj("b", ClassLabel::NC, 1, Sex::F)};
    CHECK_THROWS(make_splits(s, {}, 1, 0));
    CHECK_THROWS_AS(make_splits(s, {50, 30, 30}, 1, 0), ConfigError);
  }

  TEST_CASE("metrics on a perfect ranking") {
    const Metrics m = compute_metrics({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0});
    CHECK(m.accuracy == 1.0);
    CHECK(m.sensitivity == 1.0);
    CHECK(m.specificity == 1.0);
    CHECK(m.auc == 1.0);
  }

  TEST_CASE("AUC with ties and the pairwise oracle") {
    CHECK(auc_mann_whitney({0.6, 0.4, 0.6, 0.4}, {1, 0, 0, 1}) == doctest::Approx(0.5));
    std::mt19937 rng(2);
    for (int n : {5, 17, 60, 200}) {
      std::vector<double> s;
      std::vector<int> y;
      std::uniform_int_distribution<int> q(0, 9);
      for (int i = 0; i < n; ++i) {
        s.push_back(q(rng) / 10.0);
        y.push_back(i % 3 == 0 ? 1 : 0);
      }
      const double a = auc_mann_whitney(s, y);
      CHECK(a == auc_pairs(s, y));
      std::vector<double> r;
      for (double v : s) r.push_back(-v);
      CHECK(auc_mann_whitney(r, y) == doctest::Approx(1.0 - a).epsilon(1e-12));
    }
    CHECK_THROWS_AS(auc_mann_whitney({0.1, 0.2}, {1, 1}), DataError);
  }

  TEST_CASE("count identities") {
    std::mt19937 rng(4);
    std::uniform_real_distribution<double> u;
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < 50; ++i) {
      s.push_back(u(rng));
      y.push_back(u(rng) < 0.4);
    }
    const Metrics m = compute_metrics(s, y);
    CHECK(m.accuracy == doctest::Approx(double(m.tp + m.tn) / (m.tp + m.tn + m.fp + m.fn)));
    CHECK(m.sensitivity == doctest::Approx(double(m.tp) / (m.tp + m.fn)));
    CHECK(m.specificity == doctest::Approx(double(m.tn) / (m.tn + m.fp)));
  }

  TEST_CASE("aggregation") {
    const Summary s = summarize({0.6, 0.7, 0.8});
    CHECK(s.mean == doctest::Approx(0.7));
    CHECK(s.sd == doctest::Approx(0.1));
    const Summary flat = summarize(std::vector<double>(10, 0.8));
    CHECK(flat.sd == doctest::Approx(0.0));
    CHECK(flat.lo == doctest::Approx(0.8));
    CHECK(flat.hi == doctest::Approx(0.8));
    CHECK(percentile({1, 2, 3, 4}, 0.5) == doctest::Approx(2.5));
    CHECK(format_percent({0.642, 0.065, 0.535, 0.769}) == "64.2±6.5% [53.5%, 76.9%]");
    CHECK(format_fraction({0.77, 0.06, 0.65, 0.85}) == "0.77±0.06 [0.65, 0.85]");
  }

  TEST_CASE("simulated cohort is balanced, matched and deterministic") {
    CohortConfig cfg;
    cfg.n_per_class = 20;
    const Cohort a = simulate_cohort(cfg, 3);
    const Cohort b = simulate_cohort(cfg, 3);
    REQUIRE(a.scans.size() == 40);
    int ad = 0;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < a.scans.size(); ++i) {
      ad += a.scans[i].group == ClassLabel::AD;
      ids.insert(a.scans[i].subject_id);
      CHECK(a.scans[i].phantom_seed == b.scans[i].phantom_seed);
      CHECK(a.scans[i].age == b.scans[i].age);
    }
    CHECK(ad == 20);
    CHECK(ids.size() == 40);
  }
}
