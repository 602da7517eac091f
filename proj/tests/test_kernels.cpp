#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "relspray/kernels.hpp"
#include "relspray/parallel.hpp"
#include "relspray/reference.hpp"

using namespace relspray;

namespace {

template <class T>
std::vector<T> randv(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

// Direct evaluation from the definition with explicit zero padding.
std::vector<double> naive_conv(const ConvGeometry& g, const std::vector<double>& in, const std::vector<double>& w,
                               const std::vector<double>& b) {
  std::vector<double> out(g.out_size());
  auto at = [&](int c, int z, int y, int x) {
    if (x < 0 || y < 0 || z < 0 || x >= g.in.x || y >= g.in.y || z >= g.in.z) return 0.0;
    return in[((static_cast<std::size_t>(c) * g.in.z + z) * g.in.y + y) * g.in.x + x];
  };
  for (int o = 0; o < g.out_ch; ++o)
    for (int z = 0; z < g.out.z; ++z)
      for (int y = 0; y < g.out.y; ++y)
        for (int x = 0; x < g.out.x; ++x) {
          double s = b[o];
          for (int c = 0; c < g.in_ch; ++c)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx)
                  s += w[(((static_cast<std::size_t>(o) * g.in_ch + c) * 3 + kz) * 3 + ky) * 3 + kx] *
                       at(c, z * g.stride + kz - 1, y * g.stride + ky - 1, x * g.stride + kx - 1);
          out[((static_cast<std::size_t>(o) * g.out.z + z) * g.out.y + y) * g.out.x + x] = s;
        }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_SUITE("kernels") {
  TEST_CASE("output extents for stride 1 and 2") {
    CHECK(ConvGeometry::same(1, 2, {7, 6, 5}, 1).out == Shape3{7, 6, 5});
    CHECK(ConvGeometry::same(1, 2, {7, 6, 5}, 2).out == Shape3{4, 3, 3});
    CHECK(ConvGeometry::same(3, 4, {8, 8, 8}, 2).weight_count() == 4 * 3 * 27);
  }

  TEST_CASE("forward matches the definition for both strides") {
    for (int stride : {1, 2}) {
      const auto g = ConvGeometry::same(2, 3, {5, 6, 7}, stride);
      const auto in = randv<double>(g.in_size(), 1), w = randv<double>(g.weight_count(), 2),
                 b = randv<double>(3, 3);
      const auto want = naive_conv(g, in, w, b);
      std::vector<double> got(g.out_size()), refo(g.out_size());
      conv3d_forward(g, in.data(), w.data(), b.data(), got.data());
      ref::conv3d_forward(g, in.data(), w.data(), b.data(), refo.data());
      for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(std::abs(got[i] - want[i]) < 1e-12);
        CHECK(std::abs(refo[i] - want[i]) < 1e-12);
      }
    }
  }

  TEST_CASE("centre-tap kernel is the identity") {
    const auto g = ConvGeometry::same(1, 1, {4, 5, 6}, 1);
    std::vector<double> w(27, 0.0);
    w[13] = 1.0;
    const auto in = randv<double>(g.in_size(), 4);
    std::vector<double> out(g.out_size());
    conv3d_forward<double>(g, in.data(), w.data(), nullptr, out.data());
    CHECK(out == in);
  }

  TEST_CASE("backward data is the adjoint of forward") {
    for (int stride : {1, 2}) {
      const auto g = ConvGeometry::same(2, 3, {6, 5, 4}, stride);
      const auto x = randv<double>(g.in_size(), 5), w = randv<double>(g.weight_count(), 6),
                 y = randv<double>(g.out_size(), 7);
      std::vector<double> ax(g.out_size()), aty(g.in_size());
      conv3d_forward<double>(g, x.data(), w.data(), nullptr, ax.data());
      conv3d_backward_data<double>(g, y.data(), w.data(), aty.data());
      CHECK(dot(ax, y) == doctest::Approx(dot(x, aty)).epsilon(1e-12));
    }
  }

  TEST_CASE("backward weights matches finite differences of the linear map") {
    const auto g = ConvGeometry::same(2, 2, {5, 4, 3}, 2);
    const auto x = randv<double>(g.in_size(), 8), w = randv<double>(g.weight_count(), 9),
               gy = randv<double>(g.out_size(), 10);
    std::vector<double> gw(g.weight_count(), 0.0), gb(2, 0.0);
    conv3d_backward_weights<double>(g, x.data(), gy.data(), gw.data(), gb.data());
    // The map is linear in w, so dL/dw_i = <conv(x, e_i), gy>.
    for (std::size_t i = 0; i < gw.size(); i += 7) {
      std::vector<double> e(g.weight_count(), 0.0), out(g.out_size());
      e[i] = 1.0;
      conv3d_forward<double>(g, x.data(), e.data(), nullptr, out.data());
      CHECK(gw[i] == doctest::Approx(dot(out, gy)).epsilon(1e-12));
    }
    double s0 = 0, s1 = 0;
    for (std::size_t i = 0; i < g.out.size(); ++i) {
      s0 += gy[i];
      s1 += gy[g.out.size() + i];
    }
    CHECK(gb[0] == doctest::Approx(s0));
    CHECK(gb[1] == doctest::Approx(s1));
  }

  TEST_CASE("parallel kernels match the reference and do not depend on the thread count") {
    const auto g = ConvGeometry::same(3, 4, {9, 8, 7}, 2);
    const auto x = randv<float>(g.in_size(), 11), w = randv<float>(g.weight_count(), 12),
               b = randv<float>(4, 13), gy = randv<float>(g.out_size(), 14);
    std::vector<float> f0(g.out_size()), d0(g.in_size()), w0(g.weight_count(), 0.f), b0(4, 0.f);
    ref::conv3d_forward(g, x.data(), w.data(), b.data(), f0.data());
    ref::conv3d_backward_data(g, gy.data(), w.data(), d0.data());
    ref::conv3d_backward_weights(g, x.data(), gy.data(), w0.data(), b0.data());
    auto close = [](const std::vector<float>& a, const std::vector<float>& b) {
      for (std::size_t i = 0; i < a.size(); ++i)
        if (std::abs(a[i] - b[i]) > 1e-5f * (1.f + std::abs(b[i]))) return false;
      return true;
    };
    std::vector<float> f1, d1, w1, b1;
    for (int t : {1, 2, 4}) {
      set_threads(t);
      std::vector<float> f(g.out_size()), d(g.in_size()), ww(g.weight_count(), 0.f), bb(4, 0.f);
      conv3d_forward(g, x.data(), w.data(), b.data(), f.data());
      conv3d_backward_data(g, gy.data(), w.data(), d.data());
      conv3d_backward_weights(g, x.data(), gy.data(), ww.data(), bb.data());
      CHECK(close(f, f0));
      CHECK(close(d, d0));
      CHECK(close(ww, w0));
      CHECK(close(bb, b0));
      if (t == 1) {
        f1 = f;
        d1 = d;
        w1 = ww;
        b1 = bb;
      } else {
        CHECK(f == f1);
        CHECK(d == d1);
        CHECK(ww == w1);
        CHECK(bb == b1);
      }
    }
    set_threads(0);
  }

  TEST_CASE("dense forward and adjoints") {
    const int n = 5, m = 3;
    const auto x = randv<double>(n, 15), w = randv<double>(n * m, 16), b = randv<double>(m, 17),
               gy = randv<double>(m, 18);
    std::vector<double> y(m), gx(n), gw(n * m, 0.0), gb(m, 0.0);
    dense_forward(n, m, x.data(), w.data(), b.data(), y.data());
    for (int o = 0; o < m; ++o) {
      double s = b[o];
      for (int i = 0; i < n; ++i) s += w[o * n + i] * x[i];
      CHECK(y[o] == doctest::Approx(s));
    }
    dense_backward_data(n, m, gy.data(), w.data(), gx.data());
    dense_backward_weights(n, m, x.data(), gy.data(), gw.data(), gb.data());
    for (int i = 0; i < n; ++i) {
      double s = 0;
      for (int o = 0; o < m; ++o) s += w[o * n + i] * gy[o];
      CHECK(gx[i] == doctest::Approx(s));
    }
    for (int o = 0; o < m; ++o) {
      CHECK(gb[o] == gy[o]);
      for (int i = 0; i < n; ++i) CHECK(gw[o * n + i] == doctest::Approx(gy[o] * x[i]));
    }
  }
}
