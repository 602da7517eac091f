#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "relspray/errors.hpp"
#include "relspray/relevance.hpp"
#include "relspray/training.hpp"

using namespace relspray;

namespace {

ArchSpec small_arch() {
  ArchSpec a;
  a.input = {8, 8, 8};
  a.blocks = 2;
  a.channels = 3;
  a.hidden = 6;
  return a;
}

std::vector<double> rand_pos(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

NetworkParams<double> positive_net(unsigned seed, double bias) {
  auto p = NetworkParams<double>::he_uniform(small_arch(), seed);
  for (auto& w : p.weights)
    for (auto& x : w) x = std::abs(x);
  for (auto& b : p.biases)
    for (auto& x : b) x = bias;
  return p;
}

double sum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

LinearLayer dense(int in, int out) {
  LinearLayer l;
  l.kind = LayerKind::Dense;
  l.in_units = in;
  l.out_units = out;
  return l;
}

double guided_of(const NetworkParams<double>& p, const std::vector<double>& x, int target,
                 const std::vector<double>& mask) {
  const auto c = forward<double>(p, x);
  return relevance_guided_loss(propagate_relevance<double>(p, c, target, {}).input, mask);
}

}  // namespace

TEST_SUITE("relevance") {
  TEST_CASE("dense z+ splits relevance by positive contribution") {
    const std::vector<double> x{1.0, 3.0}, w{1.0, 1.0}, b{0.0}, r{1.0};
    const auto out = lrp_layer<double>(dense(2, 1), x, w, b, r, {});
    CHECK(out[0] == doctest::Approx(0.25).epsilon(1e-8));
    CHECK(out[1] == doctest::Approx(0.75).epsilon(1e-8));
  }

  TEST_CASE("inputs with only negative weights receive nothing") {
    const std::vector<double> x{1.0, 2.0, 0.5}, w{0.5, -1.0, 2.0}, b{0.0}, r{1.0};
    const auto out = lrp_layer<double>(dense(3, 1), x, w, b, r, {});
    CHECK(out[1] == 0.0);
    CHECK(out[0] + out[2] == doctest::Approx(1.0).epsilon(1e-8));
  }

  TEST_CASE("units without positive evidence pass on nothing") {
    const std::vector<double> x{1.0, 1.0}, w{-1.0, -1.0}, b{0.0}, r{1.0};
    const auto out = lrp_layer<double>(dense(2, 1), x, w, b, r, {});
    CHECK(out[0] == 0.0);
    CHECK(out[1] == 0.0);
  }

  TEST_CASE("convolutional z+ matches an explicit contribution table") {
    const auto g = ConvGeometry::same(1, 2, {4, 4, 4}, 2);
    LinearLayer l;
    l.kind = LayerKind::DownConv3;
    l.conv = g;
    const auto x = rand_pos(g.in_size(), 1);
    std::mt19937 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> w(g.weight_count()), b(2, 0.0), r(g.out_size());
    for (auto& v : w) v = u(rng);
    for (auto& v : r) v = std::abs(u(rng));
    // Build z_jk = x_j w+_jk explicitly.
    std::vector<std::vector<double>> z(g.out_size(), std::vector<double>(g.in_size(), 0.0));
    for (int o = 0; o < 2; ++o)
      for (int oz = 0; oz < g.out.z; ++oz)
        for (int oy = 0; oy < g.out.y; ++oy)
          for (int ox = 0; ox < g.out.x; ++ox) {
            const std::size_t k = (static_cast<std::size_t>(o) * g.out.z + oz) * g.out.y * g.out.x + oy * g.out.x + ox;
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iz = oz * 2 + kz - 1, iy = oy * 2 + ky - 1, ix = ox * 2 + kx - 1;
                  if (ix < 0 || iy < 0 || iz < 0 || ix >= 4 || iy >= 4 || iz >= 4) continue;
                  const std::size_t j = (static_cast<std::size_t>(iz) * 4 + iy) * 4 + ix;
                  z[k][j] += x[j] * std::max(0.0, w[(static_cast<std::size_t>(o) * 3 + kz) * 9 + ky * 3 + kx]);
                }
          }
    std::vector<double> want(g.in_size(), 0.0);
    for (std::size_t k = 0; k < z.size(); ++k) {
      const double zk = sum(z[k]);
      if (zk <= 0) continue;
      for (std::size_t j = 0; j < want.size(); ++j) want[j] += z[k][j] / (zk + 1e-9) * r[k];
    }
    const auto got = lrp_layer<double>(l, x, w, b, r, {});
    for (std::size_t j = 0; j < want.size(); ++j) CHECK(std::abs(got[j] - want[j]) < 1e-12);
  }

  TEST_CASE("conservation on a bias-free positive network") {
    for (unsigned seed = 1; seed <= 5; ++seed) {
      const auto p = positive_net(seed, 0.0);
      const auto x = rand_pos(512, seed + 10);
      const auto c = forward<double>(p, x);
      const auto rr = propagate_relevance<double>(p, c, 1, {});
      CHECK(std::abs(sum(rr.input) - 1.0) < 1e-6);
      for (const auto& layer : rr.per_layer) CHECK(std::abs(sum(layer) - 1.0) < 1e-6);
    }
  }

  TEST_CASE("negative biases only absorb relevance") {
    for (unsigned seed = 1; seed <= 5; ++seed) {
      auto p = NetworkParams<double>::he_uniform(small_arch(), seed, -0.05);
      const auto x = rand_pos(512, seed + 20);
      const auto c = forward<double>(p, x);
      const auto rr = propagate_relevance<double>(p, c, c.predicted(), {});
      CHECK(sum(rr.input) <= 1.0 + 1e-9);
      for (double v : rr.input) CHECK(v >= 0.0);
    }
  }

  TEST_CASE("relevance is invariant to positive input scaling without biases") {
    const auto p = positive_net(3, 0.0);
    const auto x = rand_pos(512, 4);
    auto y = x;
    for (auto& v : y) v *= 7.5;
    const auto a = propagate_relevance<double>(p, forward<double>(p, x), 0, {}).input;
    const auto b = propagate_relevance<double>(p, forward<double>(p, y), 0, {}).input;
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
  }

  TEST_CASE("guided loss values") {
    const std::vector<double> r{0.5, 0.5, -1.0, 0.0}, in{1, 1, 1, 1}, out{0, 0, 0, 0}, half{1, 0, 0, 0};
    CHECK(relevance_guided_loss(r, in) == doctest::Approx(0.0));
    CHECK(relevance_guided_loss(r, out) == doctest::Approx(1.0));
    CHECK(relevance_guided_loss(r, half) == doctest::Approx(0.5));
    CHECK_THROWS_AS(relevance_guided_loss(r, std::vector<double>{1.0}), DataError);
  }

  TEST_CASE("guided loss gradient matches finite differences") {
    const ArchSpec arch = small_arch();
    auto p = NetworkParams<double>::he_uniform(arch, 11, -0.01);
    const auto x = rand_pos(512, 12);
    std::vector<double> mask(512);
    for (std::size_t i = 0; i < 512; ++i) mask[i] = (i / 64) % 2 ? 1.0 : 0.0;
    const int target = 1;
    const auto c = forward<double>(p, x);
    auto grads = NetworkParams<double>::zeros(arch);
    auto gg = guided_loss_gradient<double>(p, c, target, mask, {}, 1.0, grads);
    CHECK(gg.loss == doctest::Approx(guided_of(p, x, target, mask)).epsilon(1e-12));
    std::vector<double> gl(2, 0.0);
    for (int k = 0; k < 2; ++k) gl[k] += gg.logits[k];
    backward<double>(p, c, gl, grads, &gg.injected);

    const double h = 1e-6;
    double worst = 0;
    int checked = 0;
    for (std::size_t l = 0; l < p.layers.size(); ++l)
      for (std::size_t i = 0; i < p.weights[l].size(); i += 1 + p.weights[l].size() / 17) {
        const double w0 = p.weights[l][i];
        if (std::abs(w0) < 1e-3) continue;  // sign flips would cross a kink
        p.weights[l][i] = w0 + h;
        const double lp = guided_of(p, x, target, mask);
        p.weights[l][i] = w0 - h;
        const double lm = guided_of(p, x, target, mask);
        p.weights[l][i] = w0;
        const double fd = (lp - lm) / (2 * h);
        const double an = grads.weights[l][i];
        worst = std::max(worst, std::abs(fd - an) / std::max(1e-5, std::abs(fd) + std::abs(an)));
        ++checked;
      }
    CHECK(checked > 20);
    CHECK(worst < 1e-4);
  }

  TEST_CASE("variant B heatmaps vanish outside the mask") {
    const auto p = NetworkParams<double>::he_uniform(small_arch(), 5, -0.01);
    Sample s;
    s.scan_id = "x";
    const auto raw = rand_pos(512, 6);
    s.input.assign(raw.begin(), raw.end());
    s.brain_mask.resize(512);
    for (std::size_t i = 0; i < 512; ++i) s.brain_mask[i] = i % 3 ? 1.f : 0.f;
    Volume3D in(Grid::make({8, 8, 8}, {1, 1, 1}));
    const auto xb = network_input<double>(s, Variant::B);
    in.data = xb;
    const Heatmap h = lrp_heatmap(p, in, -1, {});
    for (std::size_t i = 0; i < 512; ++i)
      if (s.brain_mask[i] == 0.f) CHECK(h.relevance.data[i] == 0.0);
  }

  TEST_CASE("configuration checks") {
    RelevanceConfig c;
    c.alpha = 2.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.beta = 1.0;
    CHECK_NOTHROW(c.validate());
    const auto p = positive_net(1, 0.0);
    const auto cache = forward<double>(p, rand_pos(512, 1));
    CHECK_THROWS_AS(propagate_relevance<double>(p, cache, 5, {}), DataError);
  }
}
