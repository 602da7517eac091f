#include "relspray/relaxometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "relspray/errors.hpp"

namespace relspray {

void MultiEchoSeries::validate() const {
  if (echo_times.size() < 2) throw DataError("multi-echo series needs at least 2 echoes");
  if (volumes.size() != echo_times.size())
    throw DataError("multi-echo series has " + std::to_string(volumes.size()) + " volumes for " +
                    std::to_string(echo_times.size()) + " echo times");
  for (std::size_t i = 1; i < echo_times.size(); ++i)
    if (!(echo_times[i] > echo_times[i - 1])) throw DataError("echo times must be strictly increasing");
  for (const auto& v : volumes) {
    v.validate();
    if (!v.grid.same_as(volumes.front().grid)) throw DataError("echo volumes do not share a grid");
  }
}

namespace {

struct LineFit {
  double intercept, slope, r_squared;
};

LineFit weighted_log_fit(std::span<const double> s, std::span<const double> t) {
  const std::size_t n = s.size();
  double sw = 0.0, st = 0.0, sy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = s[i] * s[i];
    sw += w;
    st += w * t[i];
    sy += w * std::log(s[i]);
  }
  const double tm = st / sw, ym = sy / sw;
  double stt = 0.0, sty = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = s[i] * s[i];
    const double dt = t[i] - tm, dy = std::log(s[i]) - ym;
    stt += w * dt * dt;
    sty += w * dt * dy;
    syy += w * dy * dy;
  }
  const double slope = sty / stt;
  const double intercept = ym - slope * tm;
  double rss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = std::log(s[i]) - (intercept + slope * t[i]);
    rss += s[i] * s[i] * r * r;
  }
  const double r2 = syy > 0.0 ? std::clamp(1.0 - rss / syy, 0.0, 1.0) : 1.0;
  return {intercept, slope, r2};
}

// Levenberg-Marquardt on sum (S_i - s0 exp(-t_i r))^2.
void refine(std::span<const double> s, std::span<const double> t, VoxelFit& fit, int max_iter) {
  auto cost = [&](double s0, double r) {
    double c = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double e = s[i] - s0 * std::exp(-t[i] * r);
      c += e * e;
    }
    return c;
  };
  double s0 = fit.s0, r = fit.r2star, lambda = 1e-3;
  double c = cost(s0, r);
  for (int it = 0; it < max_iter; ++it) {
    double a00 = 0, a01 = 0, a11 = 0, g0 = 0, g1 = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double e = std::exp(-t[i] * r);
      const double res = s[i] - s0 * e;
      const double j0 = e, j1 = -s0 * t[i] * e;
      a00 += j0 * j0;
      a01 += j0 * j1;
      a11 += j1 * j1;
      g0 += j0 * res;
      g1 += j1 * res;
    }
    bool improved = false;
    for (int tries = 0; tries < 10 && !improved; ++tries) {
      const double b00 = a00 * (1 + lambda), b11 = a11 * (1 + lambda);
      const double det = b00 * b11 - a01 * a01;
      if (det == 0.0) break;
      const double d0 = (b11 * g0 - a01 * g1) / det;
      const double d1 = (b00 * g1 - a01 * g0) / det;
      const double nc = cost(s0 + d0, r + d1);
      if (nc < c) {
        s0 += d0;
        r += d1;
        const double rel = std::abs(c - nc) / std::max(c, 1e-300);
        c = nc;
        lambda = std::max(lambda * 0.3, 1e-12);
        improved = true;
        if (rel < 1e-14) it = max_iter;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= double(s.size());
  double tss = 0.0;
  for (double v : s) tss += (v - mean) * (v - mean);
  fit.s0 = s0;
  fit.r2star = r;
  fit.r_squared = tss > 0.0 ? std::clamp(1.0 - c / tss, 0.0, 1.0) : 1.0;
}

}  // namespace

VoxelFit fit_r2star_voxel(std::span<const double> signal, std::span<const double> echo_times, const FitOptions& opts) {
  if (signal.size() != echo_times.size()) throw ConfigError("signal and echo-time lengths differ");
  if (signal.size() < 2) throw ConfigError("R2* fit needs at least 2 echoes");
  const auto [lo, hi] = std::minmax_element(echo_times.begin(), echo_times.end());
  if (*hi - *lo <= 0.0) throw ConfigError("degenerate echo spacing: all echo times are equal");

  VoxelFit fit;
  for (double v : signal)
    if (!(v > 0.0) || !std::isfinite(v)) return fit;
  const LineFit lf = weighted_log_fit(signal, echo_times);
  fit.s0 = std::exp(lf.intercept);
  fit.r2star = -lf.slope;
  fit.r_squared = lf.r_squared;
  fit.valid = std::isfinite(fit.s0) && std::isfinite(fit.r2star);
  if (fit.valid && opts.nonlinear_refine) refine(signal, echo_times, fit, opts.max_refine_iterations);
  return fit;
}

R2StarMap fit_r2star_map(const MultiEchoSeries& series, const Volume3D* mask, const FitOptions& opts) {
  series.validate();
  const Grid& g = series.grid();
  if (mask) {
    mask->validate();
    if (!mask->grid.same_as(g)) throw DataError("mask grid does not match the multi-echo series");
  }
  const std::size_t n = g.voxel_count();
  const std::size_t ne = series.echo_times.size();
  R2StarMap out{Volume3D(g), Volume3D(g), Volume3D(g), Volume3D(g)};
  // Validate the echo times once so the parallel loop cannot throw.
  {
    std::vector<double> probe(ne, 1.0);
    (void)fit_r2star_voxel(probe, series.echo_times, {});
  }
  const auto nn = static_cast<std::int64_t>(n);
#pragma omp parallel
  {
    std::vector<double> sig(ne);
#pragma omp for schedule(static)
    for (std::int64_t i = 0; i < nn; ++i) {
      if (mask && mask->data[i] == 0.0) continue;
      for (std::size_t e = 0; e < ne; ++e) sig[e] = series.volumes[e].data[i];
      const VoxelFit f = fit_r2star_voxel(sig, series.echo_times, opts);
      if (!f.valid) continue;
      out.r2star.data[i] = f.r2star;
      out.s0.data[i] = f.s0;
      out.r_squared.data[i] = f.r_squared;
      out.valid_mask.data[i] = 1.0;
    }
  }
  return out;
}

bool Ellipsoid::contains(const Vec3& p) const {
  double s = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double d = (p[a] - center[a]) / radii[a];
    s += d * d;
  }
  return s <= 1.0;
}

PhantomSpec PhantomSpec::standard() {
  PhantomSpec s;
  for (int i = 1; i <= 6; ++i) s.echo_times.push_back(4.92e-3 * i);
  s.rois = {Ellipsoid{{-5.0, 0.0, 0.0}, {3.5, 4.0, 3.0}, 30.0, 15.0},
            Ellipsoid{{5.0, 0.0, 0.0}, {3.5, 4.0, 3.0}, 30.0, 15.0}};
  return s;
}

void PhantomSpec::validate() const {
  Grid::make(dims, spacing).validate();
  if (echo_times.size() < 2) throw ConfigError("phantom needs at least 2 echo times");
  for (std::size_t i = 1; i < echo_times.size(); ++i)
    if (!(echo_times[i] > echo_times[i - 1])) throw ConfigError("phantom echo times must be strictly increasing");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (!(s0_value > 0.0)) throw ConfigError("s0_value must be positive");
  if (shell_thickness < 0.0) throw ConfigError("shell_thickness must be >= 0");
  auto check = [&](const Ellipsoid& e, const std::string& what) {
    for (int a = 0; a < 3; ++a) {
      if (!(e.radii[a] > 0.0)) throw ConfigError(what + " radii must be positive");
      const double half = 0.5 * (dims[a] - 1) * spacing[a];
      if (std::abs(e.center[a]) + e.radii[a] > half + 1e-9)
        throw ConfigError(what + " extends outside the volume bounds");
    }
  };
  Ellipsoid head = brain;
  for (int a = 0; a < 3; ++a) head.radii[a] += shell_thickness;
  check(head, "head");
  for (const auto& r : rois) check(r, "ROI");
  if (confound.enabled) {
    if (!(confound.radius > 0.0)) throw ConfigError("confound radius must be positive");
    if (confound.prevalence_ad < 0 || confound.prevalence_ad > 1 || confound.prevalence_nc < 0 ||
        confound.prevalence_nc > 1)
      throw ConfigError("confound prevalence must lie in [0, 1]");
  }
  if (jitter.translation < 0 || jitter.scale < 0 || jitter.scale >= 0.5 || jitter.warp_amplitude < 0)
    throw ConfigError("invalid geometry jitter");
}

namespace {

Grid phantom_grid(const PhantomSpec& s) {
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = -0.5 * (s.dims[a] - 1) * s.spacing[a];
  return Grid::make(s.dims, s.spacing, origin);
}

// Reference -> subject: q = A p + delta(p).
struct SubjectGeometry {
  Mat4 affine = identity4();
  Mat4 affine_inv = identity4();
  double amp = 0.0;
  Vec3 wavelength{1, 1, 1};

  Vec3 delta(const Vec3& p) const {
    if (amp == 0.0) return {0, 0, 0};
    constexpr double tau = 2.0 * std::numbers::pi;
    return {amp * std::sin(tau * p[1] / wavelength[1]), amp * std::sin(tau * p[2] / wavelength[2]),
            amp * std::sin(tau * p[0] / wavelength[0])};
  }
  Vec3 forward(const Vec3& p) const {
    Vec3 q = apply_point(affine, p);
    const Vec3 d = delta(p);
    for (int a = 0; a < 3; ++a) q[a] += d[a];
    return q;
  }
  Vec3 inverse(const Vec3& q) const {
    Vec3 p = apply_point(affine_inv, q);
    if (amp == 0.0) return p;
    for (int it = 0; it < 60; ++it) {
      const Vec3 d = delta(p);
      const Vec3 np = apply_point(affine_inv, {q[0] - d[0], q[1] - d[1], q[2] - d[2]});
      const double change = std::abs(np[0] - p[0]) + std::abs(np[1] - p[1]) + std::abs(np[2] - p[2]);
      p = np;
      if (change < 1e-13) break;
    }
    return p;
  }
};

enum Tissue : int { kOutside = 0, kShell = 1, kBrain = 2 };

struct Anatomy {
  const PhantomSpec& spec;
  Ellipsoid head;
  explicit Anatomy(const PhantomSpec& s) : spec(s), head(s.brain) {
    for (int a = 0; a < 3; ++a) head.radii[a] += s.shell_thickness;
  }
  int tissue(const Vec3& p) const {
    if (spec.brain.contains(p)) return kBrain;
    if (head.contains(p)) return kShell;
    return kOutside;
  }
  int roi(const Vec3& p) const {
    for (std::size_t r = 0; r < spec.rois.size(); ++r)
      if (spec.rois[r].contains(p)) return static_cast<int>(r);
    return -1;
  }
  bool in_confound_patch(const Vec3& p) const {
    if (tissue(p) != kShell) return false;
    double d2 = 0.0;
    for (int a = 0; a < 3; ++a) d2 += (p[a] - spec.confound.center[a]) * (p[a] - spec.confound.center[a]);
    return d2 <= spec.confound.radius * spec.confound.radius;
  }
};

Volume3D dilate(const Volume3D& m, std::size_t iters) {
  Volume3D cur = m;
  const auto& d = m.grid.dims;
  for (std::size_t it = 0; it < iters; ++it) {
    Volume3D next = cur;
    for (int k = 0; k < d[2]; ++k)
      for (int j = 0; j < d[1]; ++j)
        for (int i = 0; i < d[0]; ++i) {
          if (cur(i, j, k) != 0.0) continue;
          const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : nb) {
            const int x = i + o[0], y = j + o[1], z = k + o[2];
            if (x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2]) continue;
            if (cur(x, y, z) != 0.0) {
              next(i, j, k) = 1.0;
              break;
            }
          }
        }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec, ClassLabel label, std::uint64_t seed) {
  spec.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(label), 0x5eedu};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  SubjectGeometry geo;
  {
    const auto& j = spec.jitter;
    const double th = j.rotation_deg * unit(rng) * std::numbers::pi / 180.0;
    const Vec3 sc{1.0 + j.scale * unit(rng), 1.0 + j.scale * unit(rng), 1.0 + j.scale * unit(rng)};
    const Vec3 tr{j.translation * unit(rng), j.translation * unit(rng), j.translation * unit(rng)};
    Mat4 m = identity4();
    const double c = std::cos(th), s = std::sin(th);
    m[0][0] = c * sc[0];
    m[0][1] = -s * sc[1];
    m[1][0] = s * sc[0];
    m[1][1] = c * sc[1];
    m[2][2] = sc[2];
    for (int a = 0; a < 3; ++a) m[a][3] = tr[a];
    geo.affine = m;
    geo.affine_inv = inverse(m);
    geo.amp = j.warp_amplitude;
    for (int a = 0; a < 3; ++a) geo.wavelength[a] = spec.dims[a] * spec.spacing[a];
  }
  const bool ad = label == ClassLabel::AD;
  bool confound = false;
  if (spec.confound.enabled) {
    const double prev = ad ? spec.confound.prevalence_ad : spec.confound.prevalence_nc;
    confound = u01(rng) < prev;
  }

  const Grid g = phantom_grid(spec);
  const Anatomy anat(spec);
  Phantom ph;
  ph.confound = confound;
  ph.truth = {Volume3D(g), Volume3D(g), Volume3D(g), Volume3D(g)};
  ph.brain_mask = Volume3D(g);
  ph.roi_mask = Volume3D(g);
  ph.confound_mask = Volume3D(g);
  ph.head_mask = Volume3D(g);

  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t idx = g.index(i, j, k);
        const Vec3 p = geo.inverse(g.world(i, j, k));
        const int t = anat.tissue(p);
        if (t == kOutside) continue;
        double r2 = 0.0;
        if (t == kBrain) {
          r2 = spec.brain.r2star + (ad ? spec.brain.class_delta : 0.0);
          ph.brain_mask.data[idx] = 1.0;
          const int r = anat.roi(p);
          if (r >= 0) {
            r2 = spec.rois[r].r2star + (ad ? spec.rois[r].class_delta : 0.0);
            ph.roi_mask.data[idx] = 1.0;
          }
        } else {
          r2 = spec.shell_r2star;
          if (spec.confound.enabled && anat.in_confound_patch(p)) {
            ph.confound_mask.data[idx] = 1.0;
            if (confound) r2 += spec.confound.offset;
          }
        }
        ph.head_mask.data[idx] = 1.0;
        ph.truth.r2star.data[idx] = r2;
        ph.truth.s0.data[idx] = spec.s0_value;
        ph.truth.r_squared.data[idx] = 1.0;
        ph.truth.valid_mask.data[idx] = 1.0;
      }
  ph.guidance_mask = dilate(ph.brain_mask, spec.guidance_dilation);

  ph.series.echo_times = spec.echo_times;
  std::normal_distribution<double> noise(0.0, 1.0);
  for (double te : spec.echo_times) {
    Volume3D v(g);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v.data[i] = ph.truth.s0.data[i] * std::exp(-te * ph.truth.r2star.data[i]);
      if (spec.noise_sigma > 0.0) v.data[i] += spec.noise_sigma * noise(rng);
    }
    ph.series.volumes.push_back(std::move(v));
  }

  ph.to_reference = DisplacementField::zeros(g);
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t idx = g.index(i, j, k);
        const Vec3 p = g.world(i, j, k);
        const Vec3 q = geo.forward(p);
        ph.to_reference.dx.data[idx] = q[0] - p[0];
        ph.to_reference.dy.data[idx] = q[1] - p[1];
        ph.to_reference.dz.data[idx] = q[2] - p[2];
      }
  return ph;
}

ReferenceMasks reference_masks(const PhantomSpec& spec) {
  spec.validate();
  const Grid g = phantom_grid(spec);
  const Anatomy anat(spec);
  ReferenceMasks m{Volume3D(g), Volume3D(g), Volume3D(g), Volume3D(g)};
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t idx = g.index(i, j, k);
        const Vec3 p = g.world(i, j, k);
        const int t = anat.tissue(p);
        if (t != kOutside) m.head.data[idx] = 1.0;
        if (t == kBrain) m.brain.data[idx] = 1.0;
        if (t == kBrain && anat.roi(p) >= 0) m.roi.data[idx] = 1.0;
        if (spec.confound.enabled && anat.in_confound_patch(p)) m.confound.data[idx] = 1.0;
      }
  return m;
}

}  // namespace relspray
