#include <cmath>
#include <random>

#include "doctest.h"
#include "relspray/errors.hpp"
#include "relspray/volume.hpp"

using namespace relspray;

namespace {

// Nested linear interpolation in grid coordinates: x, then y, then z.
double oracle_trilinear(const Volume3D& v, double x, double y, double z) {
  auto lerp = [](double a, double b, double t) { return a + (b - a) * t; };
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y)),
            z0 = static_cast<int>(std::floor(z));
  const double tx = x - x0, ty = y - y0, tz = z - z0;
  double zz[2];
  for (int dz = 0; dz < 2; ++dz) {
    double yy[2];
    for (int dy = 0; dy < 2; ++dy) yy[dy] = lerp(v(x0, y0 + dy, z0 + dz), v(x0 + 1, y0 + dy, z0 + dz), tx);
    zz[dz] = lerp(yy[0], yy[1], ty);
  }
  return lerp(zz[0], zz[1], tz);
}

Volume3D random_volume(const Grid& g, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Volume3D v(g);
  for (double& x : v.data) x = u(rng);
  return v;
}

}  // namespace

TEST_SUITE("volume") {
  TEST_CASE("sampling at a node returns the node value") {
    const Grid g = Grid::make({4, 5, 6}, {1.0, 2.0, 0.5}, {3.0, -1.0, 2.0});
    const Volume3D v = random_volume(g, 1);
    for (int k = 0; k < 6; ++k)
      for (int j = 0; j < 5; ++j)
        for (int i = 0; i < 4; ++i) CHECK(trilinear_sample(v, g.world(i, j, k)) == v(i, j, k));
  }

  TEST_CASE("midpoint between 0 and 1 along x is 0.5") {
    Volume3D v(Grid::make({2, 1, 1}, {1, 1, 1}));
    v(1, 0, 0) = 1.0;
    CHECK(TrilinearSampler(v).at_voxel(0.5, 0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("trilinear matches the nested lerp oracle on random interior points") {
    const Grid g = Grid::make({4, 4, 4}, {1, 1, 1});
    const Volume3D v = random_volume(g, 2);
    TrilinearSampler s(v);
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.0, 2.999);
    for (int t = 0; t < 500; ++t) {
      const double x = u(rng), y = u(rng), z = u(rng);
      CHECK(std::abs(s.at_voxel(x, y, z) - oracle_trilinear(v, x, y, z)) < 1e-12);
    }
  }

  TEST_CASE("trilinear is exact on affine fields") {
    const Grid g = Grid::make({6, 7, 5}, {1.5, 1.0, 2.0}, {-4, 2, 1});
    Volume3D v(g);
    auto f = [](const Vec3& p) { return 0.3 * p[0] - 1.2 * p[1] + 0.7 * p[2] + 4.0; };
    for (int k = 0; k < 5; ++k)
      for (int j = 0; j < 7; ++j)
        for (int i = 0; i < 6; ++i) v(i, j, k) = f(g.world(i, j, k));
    std::mt19937 rng(4);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    for (int t = 0; t < 200; ++t) {
      const Vec3 p = g.world(0, 0, 0);
      const Vec3 q{p[0] + u(rng) * 5 * 1.5, p[1] + u(rng) * 6 * 1.0, p[2] + u(rng) * 4 * 2.0};
      CHECK(std::abs(trilinear_sample(v, q) - f(q)) < 1e-10);
    }
  }

  TEST_CASE("points outside the lattice return the outside value") {
    const Volume3D v(Grid::make({3, 3, 3}, {1, 1, 1}), 5.0);
    CHECK(trilinear_sample(v, {-0.5, 1, 1}) == 0.0);
    CHECK(trilinear_sample(v, {1, 1, 2.5}, -3.0) == -3.0);
  }

  TEST_CASE("identity resample onto the same grid is the identity") {
    const Grid g = Grid::make({5, 4, 3}, {1, 1, 1}, {1, 2, 3});
    const Volume3D v = random_volume(g, 5);
    CHECK(resample(v, g, AffineTransform::identity()).data == v.data);
  }

  TEST_CASE("translation by one voxel shifts the data") {
    const Grid g = Grid::make({6, 3, 3}, {1, 1, 1});
    const Volume3D v = random_volume(g, 6);
    const Volume3D out = resample(v, g, AffineTransform::translation({1.0, 0, 0}));
    for (int k = 0; k < 3; ++k)
      for (int j = 0; j < 3; ++j) {
        CHECK(out(0, j, k) == 0.0);
        for (int i = 1; i < 6; ++i) CHECK(out(i, j, k) == doctest::Approx(v(i - 1, j, k)).epsilon(1e-14));
      }
  }

  TEST_CASE("translation there and back restores the interior") {
    const Grid g = Grid::make({8, 8, 8}, {1, 1, 1});
    const Volume3D v = random_volume(g, 7);
    const Vec3 t{1.0, -2.0, 1.0};
    const Volume3D back = resample(resample(v, g, AffineTransform::translation(t)), g,
                                   AffineTransform::translation({-t[0], -t[1], -t[2]}));
    for (int k = 2; k < 6; ++k)
      for (int j = 2; j < 6; ++j)
        for (int i = 2; i < 6; ++i) CHECK(std::abs(back(i, j, k) - v(i, j, k)) < 1e-10);
  }

  TEST_CASE("downsampling a smooth blob preserves its mass") {
    const Grid g = Grid::make({32, 32, 32}, {1, 1, 1});
    Volume3D v(g);
    const double s = 4.0;
    for (int k = 0; k < 32; ++k)
      for (int j = 0; j < 32; ++j)
        for (int i = 0; i < 32; ++i) {
          const double dx = i - 15.5, dy = j - 15.5, dz = k - 15.5;
          v(i, j, k) = std::exp(-(dx * dx + dy * dy + dz * dz) / (2 * s * s));
        }
    const double analytic = std::pow(2 * M_PI * s * s, 1.5);
    const Grid coarse = downsampled_grid(g, 2.0);
    CHECK(coarse.dims == std::array<int, 3>{16, 16, 16});
    const Volume3D d = resample(v, coarse, AffineTransform::identity());
    CHECK(std::abs(v.sum() * g.voxel_volume() - analytic) / analytic < 0.05);
    CHECK(std::abs(d.sum() * coarse.voxel_volume() - analytic) / analytic < 0.05);
  }

  TEST_CASE("zero displacement equals identity resampling") {
    const Grid g = Grid::make({5, 5, 5}, {1, 1, 1});
    const Volume3D v = random_volume(g, 8);
    CHECK(apply_displacement(v, DisplacementField::zeros(g)).data == resample(v, g, AffineTransform::identity()).data);
  }

  TEST_CASE("uniform displacement of minus one voxel matches the shift") {
    const Grid g = Grid::make({6, 4, 4}, {1, 1, 1});
    const Volume3D v = random_volume(g, 9);
    DisplacementField f = DisplacementField::zeros(g);
    for (double& x : f.dx.data) x = -1.0;
    const Volume3D a = apply_displacement(v, f);
    const Volume3D b = resample(v, g, AffineTransform::translation({1.0, 0, 0}));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data[i] == doctest::Approx(b.data[i]).epsilon(1e-14));
  }

  TEST_CASE("sinusoidal displacement on a ramp matches the analytic composition") {
    const Grid g = Grid::make({12, 12, 12}, {1, 1, 1});
    Volume3D ramp(g);
    for (int k = 0; k < 12; ++k)
      for (int j = 0; j < 12; ++j)
        for (int i = 0; i < 12; ++i) ramp(i, j, k) = 2.0 * i - 0.5 * j + 1.5 * k;
    DisplacementField f = DisplacementField::zeros(g);
    for (int k = 0; k < 12; ++k)
      for (int j = 0; j < 12; ++j)
        for (int i = 0; i < 12; ++i) {
          const std::size_t idx = g.index(i, j, k);
          f.dx.data[idx] = 0.4 * std::sin(0.5 * j);
          f.dy.data[idx] = 0.3 * std::cos(0.4 * k);
          f.dz.data[idx] = 0.2 * std::sin(0.3 * i);
        }
    const Volume3D out = apply_displacement(ramp, f);
    for (int k = 1; k < 11; ++k)
      for (int j = 1; j < 11; ++j)
        for (int i = 1; i < 11; ++i) {
          const std::size_t idx = g.index(i, j, k);
          const double want = 2.0 * (i + f.dx.data[idx]) - 0.5 * (j + f.dy.data[idx]) + 1.5 * (k + f.dz.data[idx]);
          CHECK(std::abs(out(i, j, k) - want) < 1e-6);
        }
  }

  TEST_CASE("singular affine is rejected") {
    Mat4 m = identity4();
    m[1][1] = 0.0;
    CHECK_THROWS_AS(inverse(m), NumericError);
    AffineTransform t{m};
    CHECK_THROWS(t.validate());
  }

  TEST_CASE("mismatched displacement components are rejected") {
    DisplacementField f = DisplacementField::zeros(Grid::make({3, 3, 3}, {1, 1, 1}));
    f.dz = Volume3D(Grid::make({3, 3, 4}, {1, 1, 1}));
    CHECK_THROWS(f.validate());
  }
}
