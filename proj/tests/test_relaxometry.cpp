#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "relspray/errors.hpp"
#include "relspray/parallel.hpp"
#include "relspray/reference.hpp"
#include "relspray/relaxometry.hpp"

using namespace relspray;

namespace {

std::vector<double> tes() {
  std::vector<double> t;
  for (int i = 1; i <= 6; ++i) t.push_back(4.92e-3 * i);
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double roi_mean(const Volume3D& v, const Volume3D& mask) {
  double s = 0;
  int n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask.data[i] > 0.5) {
      s += v.data[i];
      ++n;
    }
  return s / n;
}

}  // namespace

TEST_SUITE("relaxometry") {
  TEST_CASE("flat signal gives zero decay") {
    const std::vector<double> s(6, 100.0);
    const VoxelFit f = fit_r2star_voxel(s, tes());
    CHECK(f.valid);
    CHECK(std::abs(f.r2star) < 1e-12);
    CHECK(f.s0 == doctest::Approx(100.0).epsilon(1e-12));
  }

  TEST_CASE("noiseless closed form is recovered") {
    const auto t = tes();
    for (double r2 : {5.0, 20.0, 50.0, 120.0, 200.0}) {
      std::vector<double> s;
      for (double ti : t) s.push_back(1000.0 * std::exp(-ti * r2));
      const VoxelFit f = fit_r2star_voxel(s, t);
      CHECK(std::abs(f.r2star - r2) / r2 < 1e-6);
      CHECK(std::abs(f.s0 - 1000.0) / 1000.0 < 1e-6);
      CHECK(f.r_squared == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  TEST_CASE("scaling the signal scales s0 only") {
    const auto t = tes();
    std::mt19937 rng(1);
    std::normal_distribution<double> n(0, 5);
    std::vector<double> s;
    for (double ti : t) s.push_back(800 * std::exp(-ti * 40) + n(rng));
    const VoxelFit a = fit_r2star_voxel(s, t);
    for (double& x : s) x *= 3.5;
    const VoxelFit b = fit_r2star_voxel(s, t);
    CHECK(std::abs(a.r2star - b.r2star) < 1e-9);
    CHECK(std::abs(b.s0 - 3.5 * a.s0) < 1e-9 * b.s0);
  }

  TEST_CASE("non-positive samples invalidate the voxel") {
    std::vector<double> s{100, 90, 80, 70, 60, 0};
    CHECK_FALSE(fit_r2star_voxel(s, tes()).valid);
    s[5] = -1;
    CHECK_FALSE(fit_r2star_voxel(s, tes()).valid);
  }

  TEST_CASE("degenerate inputs throw") {
    CHECK_THROWS_AS(fit_r2star_voxel(std::vector<double>{1, 2}, std::vector<double>{0.01, 0.01}), ConfigError);
    CHECK_THROWS_AS(fit_r2star_voxel(std::vector<double>{1, 2, 3}, std::vector<double>{0.01, 0.02}), ConfigError);
    CHECK_THROWS_AS(fit_r2star_voxel(std::vector<double>{1}, std::vector<double>{0.01}), ConfigError);
  }

  TEST_CASE("nonlinear refinement agrees on noiseless data") {
    const auto t = tes();
    std::vector<double> s;
    for (double ti : t) s.push_back(700 * std::exp(-ti * 33));
    FitOptions o;
    o.nonlinear_refine = true;
    const VoxelFit f = fit_r2star_voxel(s, t, o);
    CHECK(std::abs(f.r2star - 33) < 1e-6);
  }

  TEST_CASE("noiseless phantom: exact signals and ROI means") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.noise_sigma = 0.0;
    spec.rois[0].r2star = 30.0;
    spec.rois[1].r2star = 50.0;
    spec.rois[0].class_delta = spec.rois[1].class_delta = 0.0;
    const Phantom ph = generate_phantom(spec, ClassLabel::NC, 11);
    for (std::size_t e = 0; e < spec.echo_times.size(); ++e)
      for (std::size_t v = 0; v < ph.truth.r2star.size(); v += 97)
        CHECK(ph.series.volumes[e].data[v] ==
              doctest::Approx(ph.truth.s0.data[v] * std::exp(-spec.echo_times[e] * ph.truth.r2star.data[v]))
                  .epsilon(1e-12));
    const R2StarMap fit = fit_r2star_map(ph.series, &ph.head_mask);
    // Each ganglion separately, via a mask of voxels whose true value matches.
    for (double want : {30.0, 50.0}) {
      Volume3D m(ph.truth.r2star.grid);
      for (std::size_t v = 0; v < m.size(); ++v) m.data[v] = ph.truth.r2star.data[v] == want ? 1.0 : 0.0;
      CHECK(std::abs(roi_mean(fit.r2star, m) - want) / want < 0.01);
    }
  }

  TEST_CASE("two percent noise: median absolute error below five percent over 20 seeds") {
    PhantomSpec spec = PhantomSpec::standard();
    for (unsigned seed = 0; seed < 20; ++seed) {
      const Phantom ph = generate_phantom(spec, seed % 2 ? ClassLabel::AD : ClassLabel::NC, 100 + seed);
      const R2StarMap fit = fit_r2star_map(ph.series, &ph.brain_mask);
      std::vector<double> rel;
      for (std::size_t v = 0; v < fit.r2star.size(); ++v)
        if (ph.brain_mask.data[v] > 0.5)
          rel.push_back(std::abs(fit.r2star.data[v] - ph.truth.r2star.data[v]) / ph.truth.r2star.data[v]);
      CHECK(median(rel) < 0.05);
    }
  }

  TEST_CASE("parallel map equals the serial reference for any thread count") {
    const Phantom ph = generate_phantom(PhantomSpec::standard(), ClassLabel::AD, 5);
    const R2StarMap want = ref::fit_r2star_map(ph.series, &ph.head_mask);
    for (int threads : {1, 2, 3}) {
      set_threads(threads);
      const R2StarMap got = fit_r2star_map(ph.series, &ph.head_mask);
      CHECK(got.r2star.data == want.r2star.data);
      CHECK(got.s0.data == want.s0.data);
      CHECK(got.valid_mask.data == want.valid_mask.data);
    }
    set_threads(0);
  }

  TEST_CASE("outside the mask is zero filled and invalid") {
    const Phantom ph = generate_phantom(PhantomSpec::standard(), ClassLabel::NC, 6);
    const R2StarMap fit = fit_r2star_map(ph.series, &ph.brain_mask);
    for (std::size_t v = 0; v < fit.r2star.size(); ++v)
      if (ph.brain_mask.data[v] < 0.5) {
        CHECK(fit.r2star.data[v] == 0.0);
        CHECK(fit.valid_mask.data[v] == 0.0);
      }
    Volume3D wrong(Grid::make({4, 4, 4}, {1, 1, 1}));
    CHECK_THROWS(fit_r2star_map(ph.series, &wrong));
  }

  TEST_CASE("phantom is deterministic in its seed") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.jitter = {1.5, 0.05, 5.0, 1.0};
    spec.confound.enabled = true;
    const Phantom a = generate_phantom(spec, ClassLabel::AD, 42);
    const Phantom b = generate_phantom(spec, ClassLabel::AD, 42);
    for (std::size_t e = 0; e < a.series.volumes.size(); ++e) CHECK(a.series.volumes[e].data == b.series.volumes[e].data);
    CHECK(a.to_reference.dx.data == b.to_reference.dx.data);
    CHECK(a.brain_mask.data == b.brain_mask.data);
    const Phantom c = generate_phantom(spec, ClassLabel::AD, 43);
    CHECK(c.series.volumes[0].data != a.series.volumes[0].data);
  }

  TEST_CASE("the reference displacement undoes the subject jitter") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.jitter.translation = 1.5;
    spec.jitter.scale = 0.05;
    spec.jitter.rotation_deg = 5.0;
    spec.jitter.warp_amplitude = 1.0;
    const Volume3D ref = reference_masks(spec).brain;
    auto dice = [](const Volume3D& a, const Volume3D& b) {
      double both = 0, sum = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a.data[i] > 0.5, y = b.data[i] > 0.5;
        both += x && y;
        sum += x + y;
      }
      return 2.0 * both / sum;
    };
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const Phantom ph = generate_phantom(spec, ClassLabel::NC, seed);
      const double native = dice(ph.brain_mask, ref);
      const double warped = dice(apply_displacement(ph.brain_mask, ph.to_reference), ref);
      CHECK(warped > 0.95);
      CHECK(warped > native);
    }
  }

  TEST_CASE("class delta raises the ganglia truth by exactly delta") {
    PhantomSpec spec = PhantomSpec::standard();
    const Phantom nc = generate_phantom(spec, ClassLabel::NC, 1);
    const Phantom ad = generate_phantom(spec, ClassLabel::AD, 1);
    CHECK(roi_mean(ad.truth.r2star, ad.roi_mask) - roi_mean(nc.truth.r2star, nc.roi_mask) ==
          doctest::Approx(15.0).epsilon(1e-12));
  }

  TEST_CASE("confound offset separates the shell patch between classes") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.confound.enabled = true;
    PhantomSpec off = spec;
    off.confound.enabled = false;
    double d = 0;
    for (int i = 0; i < 25; ++i) {
      const Phantom a = generate_phantom(spec, ClassLabel::AD, 300 + i);
      const Phantom n = generate_phantom(spec, ClassLabel::NC, 400 + i);
      d += roi_mean(a.truth.r2star, a.confound_mask) - roi_mean(n.truth.r2star, n.confound_mask);
      const Phantom plain = generate_phantom(off, ClassLabel::AD, 300 + i);
      CHECK(roi_mean(a.truth.r2star, a.confound_mask) - roi_mean(plain.truth.r2star, a.confound_mask) ==
            doctest::Approx(spec.confound.offset).epsilon(1e-9));
    }
    CHECK(d / 25 == doctest::Approx(spec.confound.offset).epsilon(1e-9));
  }

  TEST_CASE("guidance mask contains the brain mask") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.guidance_dilation = 2;
    const Phantom ph = generate_phantom(spec, ClassLabel::NC, 3);
    double extra = 0;
    for (std::size_t v = 0; v < ph.brain_mask.size(); ++v) {
      if (ph.brain_mask.data[v] > 0.5) CHECK(ph.guidance_mask.data[v] > 0.5);
      extra += ph.guidance_mask.data[v] - ph.brain_mask.data[v];
    }
    CHECK(extra > 0);
  }

  TEST_CASE("invalid specs are rejected") {
    PhantomSpec spec = PhantomSpec::standard();
    spec.rois[0].center = {14.0, 0.0, 0.0};
    CHECK_THROWS_AS(generate_phantom(spec, ClassLabel::NC, 1), ConfigError);
    spec = PhantomSpec::standard();
    spec.noise_sigma = -1;
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }
}
