#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "relspray/errors.hpp"
#include "relspray/spray.hpp"

using namespace relspray;

namespace {

std::vector<double> blobs(const std::vector<std::vector<double>>& centers, int per, double sd, unsigned seed,
                          std::vector<int>& truth) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0, sd);
  std::vector<double> x;
  truth.clear();
  for (int i = 0; i < per; ++i)
    for (std::size_t c = 0; c < centers.size(); ++c) {
      for (double v : centers[c]) x.push_back(v + n(rng));
      truth.push_back(static_cast<int>(c));
    }
  return x;
}

// Random graph made of disjoint components, each a random connected graph on >= 2 vertices.
AffinityGraph random_graph(std::mt19937& rng, int& components) {
  std::uniform_int_distribution<int> nc(1, 4), sz(2, 6);
  std::uniform_real_distribution<double> u(0.05, 1.0), coin(0, 1);
  components = nc(rng);
  std::vector<int> sizes;
  std::size_t n = 0;
  for (int c = 0; c < components; ++c) {
    sizes.push_back(sz(rng));
    n += sizes.back();
  }
  AffinityGraph g;
  g.n = n;
  g.w.assign(n * n, 0.0);
  std::size_t base = 0;
  for (int s : sizes) {
    for (int i = 1; i < s; ++i) {
      std::uniform_int_distribution<int> pick(0, i - 1);
      const std::size_t a = base + i, b = base + pick(rng);
      g.w[a * n + b] = g.w[b * n + a] = u(rng);
    }
    for (int i = 0; i < s; ++i)
      for (int j = i + 1; j < s; ++j)
        if (coin(rng) < 0.3) g.w[(base + i) * n + base + j] = g.w[(base + j) * n + base + i] = u(rng);
    base += s;
  }
  // Shuffle vertex order so components are interleaved.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> w(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) w[perm[i] * n + perm[j]] = g.w[i * n + j];
  g.w = w;
  return g;
}

std::vector<int> cluster_points(const std::vector<double>& x, std::size_t n, std::size_t d, int knn, unsigned seed,
                                int* k_out = nullptr) {
  const AffinityGraph g = build_affinity(x, n, d, knn);
  const SpectralDecomposition sd = spectral_decompose(g);
  const int k = eigengap_select(sd.eigen.values, 10);
  if (k_out) *k_out = k;
  return spectral_cluster(sd, k, seed).labels;
}

SampleInfo info(const std::string& id, ClassLabel g, Outcome o) { return {id, g, o}; }

}  // namespace

TEST_SUITE("spray") {
  TEST_CASE("two points at unit distance have affinity exp(-1)") {
    const std::vector<double> x{0.0, 0.0, 1.0, 0.0};
    const AffinityGraph g = build_affinity(x, 2, 2, 1);
    CHECK(g.sigma == doctest::Approx(1.0));
    CHECK(g.w[1] == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
    CHECK(g.w[2] == g.w[1]);
    CHECK(g.w[0] == 0.0);
  }

  TEST_CASE("affinity is symmetric with a zero diagonal") {
    std::vector<int> t;
    const auto x = blobs({{0, 0, 0}, {3, 3, 3}}, 15, 1.0, 1, t);
    const AffinityGraph g = build_affinity(x, 30, 3, 4);
    for (std::size_t i = 0; i < 30; ++i) {
      CHECK(g.w[i * 30 + i] == 0.0);
      int nz = 0;
      for (std::size_t j = 0; j < 30; ++j) {
        CHECK(g.w[i * 30 + j] == g.w[j * 30 + i]);
        nz += g.w[i * 30 + j] > 0;
      }
      CHECK(nz >= 4);
    }
  }

  TEST_CASE("separated groups give a block-diagonal affinity") {
    std::vector<int> t;
    const auto x = blobs({{0, 0}, {100, 0}}, 6, 0.5, 2, t);
    const AffinityGraph g = build_affinity(x, 12, 2, 3);
    for (std::size_t i = 0; i < 12; ++i)
      for (std::size_t j = 0; j < 12; ++j)
        if (t[i] != t[j]) CHECK(g.w[i * 12 + j] == 0.0);
  }

  TEST_CASE("triangle spectrum") {
    AffinityGraph g;
    g.n = 3;
    g.w = {0, 1, 1, 1, 0, 1, 1, 1, 0};
    const auto sd = spectral_decompose(g);
    CHECK(std::abs(sd.eigen.values[0]) < 1e-10);
    CHECK(std::abs(sd.eigen.values[1] - 1.5) < 1e-10);
    CHECK(std::abs(sd.eigen.values[2] - 1.5) < 1e-10);
  }

  TEST_CASE("random graphs: spectrum in [0, 2] and zero multiplicity equals components") {
    std::mt19937 rng(12345);
    for (int t = 0; t < 50; ++t) {
      int comps = 0;
      const AffinityGraph g = random_graph(rng, comps);
      const auto sd = spectral_decompose(g);
      int zeros = 0;
      for (double v : sd.eigen.values) {
        CHECK(v >= -1e-10);
        CHECK(v <= 2.0 + 1e-10);
        zeros += std::abs(v) < 1e-8;
      }
      CHECK(zeros == comps);
    }
  }

  TEST_CASE("Jacobi agrees with power iteration and satisfies A v = lambda v") {
    const std::size_t n = 12;
    std::mt19937 rng(3);
    std::normal_distribution<double> nd;
    std::vector<double> b(n * n), a(n * n, 0.0);
    for (auto& v : b) v = nd(rng);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < n; ++k) a[i * n + j] += b[i * n + k] * b[j * n + k];
    const auto e = jacobi_eigen(a, n);
    std::vector<double> v(n, 1.0);
    double lambda = 0;
    for (int it = 0; it < 5000; ++it) {
      std::vector<double> w(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) w[i] += a[i * n + j] * v[j];
      double norm = 0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      lambda = norm;
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
    }
    CHECK(e.values.back() == doctest::Approx(lambda).epsilon(1e-8));
    CHECK(std::is_sorted(e.values.begin(), e.values.end()));
    for (std::size_t j = 0; j < n; ++j) {
      double res = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double av = 0;
        for (std::size_t k = 0; k < n; ++k) av += a[i * n + k] * e.vectors[j * n + k];
        res = std::max(res, std::abs(av - e.values[j] * e.vectors[j * n + i]));
      }
      CHECK(res < 1e-9);
    }
  }

  TEST_CASE("eigengap selection") {
    CHECK(eigengap_select(std::vector<double>{0, 0, 0.9, 1.0, 1.1, 1.2}, 4) == 2);
    CHECK(eigengap_select(std::vector<double>{0, 0, 0, 0.8, 0.9, 1.0}, 4) == 3);
    CHECK(eigengap_select(std::vector<double>{0, 0.25, 0.5, 0.75, 1.0, 1.25}, 4) == 2);
    CHECK(eigengap_select(std::vector<double>{0, 0.01, 0.02, 0.9}, 10) == 3);
  }

  TEST_CASE("two cliques are recovered exactly") {
    std::vector<int> t;
    const auto x = blobs({{0, 0, 0}, {10, 10, 10}}, 10, 0.3, 4, t);
    int k = 0;
    const auto labels = cluster_points(x, 20, 3, 5, 1, &k);
    CHECK(k == 2);
    CHECK(adjusted_rand_index(labels, t) == doctest::Approx(1.0));
  }

  TEST_CASE("three blobs over ten seeds") {
    for (unsigned seed = 0; seed < 10; ++seed) {
      std::vector<int> t;
      const auto x = blobs({{0, 0, 0, 0}, {8, 0, 0, 0}, {0, 8, 0, 0}}, 20, 1.0, 100 + seed, t);
      int k = 0;
      const auto labels = cluster_points(x, 60, 4, 10, seed, &k);
      CHECK(k == 3);
      CHECK(adjusted_rand_index(labels, t) >= 0.95);
    }
  }

  TEST_CASE("permuting the points permutes the labels") {
    std::vector<int> t;
    const auto x = blobs({{0, 0}, {8, 0}, {0, 8}}, 10, 0.8, 5, t);
    const auto a = cluster_points(x, 30, 2, 6, 2);
    std::vector<std::size_t> perm(30);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(9));
    std::vector<double> y;
    for (std::size_t i : perm) y.insert(y.end(), x.begin() + 2 * i, x.begin() + 2 * i + 2);
    const auto b = cluster_points(y, 30, 2, 6, 2);
    std::vector<int> back(30);
    for (std::size_t i = 0; i < 30; ++i) back[perm[i]] = b[i];
    CHECK(adjusted_rand_index(a, back) == doctest::Approx(1.0));
  }

  TEST_CASE("adjusted Rand index") {
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {1, 1, 0, 0}) == doctest::Approx(1.0));
    CHECK(adjusted_rand_index({0, 0, 1, 1}, {0, 1, 0, 1}) == doctest::Approx(-0.5));
    CHECK(adjusted_rand_index({0, 0, 0, 1, 1, 1}, {0, 0, 1, 1, 2, 2}) == doctest::Approx(0.242424).epsilon(1e-4));
  }

  TEST_CASE("isolated vertices are reported") {
    AffinityGraph g;
    g.n = 3;
    g.w = {0, 1, 0, 1, 0, 0, 0, 0, 0};
    const std::vector<std::string> ids{"a", "b", "lonely"};
    try {
      normalized_laplacian(g, &ids);
      FAIL("expected an error");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("lonely") != std::string::npos);
    }
  }

  TEST_CASE("heatmap preparation is invariant to scale and flags zero rows") {
    const Grid g = Grid::make({8, 8, 8}, {1, 1, 1});
    std::vector<Volume3D> h(3, Volume3D(g));
    std::mt19937 rng(6);
    std::uniform_real_distribution<double> u(0, 1);
    for (auto& v : h[0].data) v = u(rng);
    h[1] = h[0];
    for (auto& v : h[1].data) v *= 42.0;
    const std::vector<SampleInfo> man{info("a", ClassLabel::NC, Outcome::TN), info("b", ClassLabel::AD, Outcome::TP),
                                      info("c", ClassLabel::AD, Outcome::FN)};
    const DataMatrix m = prepare_heatmaps(h, man, Space::Native, 2.0);
    CHECK(m.rows == 3);
    CHECK(m.cols == 64);
    double s = 0;
    for (std::size_t j = 0; j < m.cols; ++j) {
      CHECK(m.row(0)[j] == doctest::Approx(m.row(1)[j]).epsilon(1e-12));
      s += std::abs(m.row(0)[j]);
    }
    CHECK(s == doctest::Approx(1.0));
    CHECK(m.zero_row[2]);
    std::vector<std::size_t> kept;
    const DataMatrix d = drop_zero_rows(m, &kept);
    CHECK(d.rows == 2);
    CHECK(kept == std::vector<std::size_t>{0, 1});
  }

  TEST_CASE("cluster means and composition") {
    const Grid g = Grid::make({2, 2, 2}, {1, 1, 1});
    std::vector<Volume3D> h;
    for (double v : {1.0, 3.0, 10.0}) h.emplace_back(g, v);
    const std::vector<SampleInfo> man{info("a", ClassLabel::NC, Outcome::TN), info("b", ClassLabel::AD, Outcome::TP),
                                      info("c", ClassLabel::AD, Outcome::FN)};
    const ClusterMeans cm = cluster_mean_heatmaps(h, {0, 0, 1}, 2, man);
    CHECK(cm.means[0].data[0] == doctest::Approx(2.0));
    CHECK(cm.means[1].data[5] == doctest::Approx(10.0));
    CHECK(cm.composition[0][0][static_cast<int>(Outcome::TN)] == 1);
    CHECK(cm.composition[0][1][static_cast<int>(Outcome::TP)] == 1);
    CHECK(cm.composition[1][1][static_cast<int>(Outcome::FN)] == 1);
    int total = 0;
    for (const auto& c : cm.composition)
      for (const auto& row : c)
        for (int v : row) total += v;
    CHECK(total == 3);
  }

  TEST_CASE("outcomes and names") {
    CHECK(outcome_of(1, 1) == Outcome::TP);
    CHECK(outcome_of(0, 1) == Outcome::FP);
    CHECK(outcome_of(0, 0) == Outcome::TN);
    CHECK(outcome_of(1, 0) == Outcome::FN);
    CHECK(parse_outcome("FN") == Outcome::FN);
    CHECK_THROWS_AS(parse_outcome("XX"), DataError);
    CHECK(parse_space("warped") == Space::Warped);
    CHECK_THROWS_AS(parse_space("mni"), ConfigError);
  }

  TEST_CASE("silhouette of well separated blobs is high") {
    std::vector<int> t;
    const auto x = blobs({{0, 0}, {20, 0}}, 10, 0.5, 7, t);
    CHECK(silhouette(x, 20, 2, t) > 0.9);
  }
}
