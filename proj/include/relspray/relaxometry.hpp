#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "relspray/volume.hpp"

namespace relspray {

/// Echo-time indexed signal volumes on a shared grid. Echo times in seconds.
struct MultiEchoSeries {
  std::vector<double> echo_times;
  std::vector<Volume3D> volumes;

  void validate() const;
  const Grid& grid() const { return volumes.front().grid; }
};

struct R2StarMap {
  Volume3D r2star;     // 1/s
  Volume3D s0;         // signal units
  Volume3D r_squared;  // [0, 1]
  Volume3D valid_mask;
};

struct VoxelFit {
  double s0 = 0.0;
  double r2star = 0.0;
  double r_squared = 0.0;
  bool valid = false;
};

struct FitOptions {
  /// Levenberg-Marquardt refinement of the mono-exponential in the signal
  /// domain, started from the log-linear solution.
  bool nonlinear_refine = false;
  int max_refine_iterations = 30;
};

/// Weighted (S^2) log-linear least squares for S(t) = s0 exp(-t R2*).
/// Any non-positive sample marks the voxel invalid. Throws ConfigError on
/// length mismatch, fewer than two echoes, or identical echo times.
VoxelFit fit_r2star_voxel(std::span<const double> signal, std::span<const double> echo_times,
                          const FitOptions& opts = {});

/// Voxelwise fit over the mask (or everything). Output is independent of the
/// thread count.
R2StarMap fit_r2star_map(const MultiEchoSeries& series, const Volume3D* mask = nullptr, const FitOptions& opts = {});

enum class ClassLabel { NC = 0, AD = 1 };

struct Ellipsoid {
  Vec3 center{0, 0, 0};  // mm, reference space relative to the grid centre
  Vec3 radii{1, 1, 1};   // mm
  double r2star = 0.0;   // NC-class value, 1/s
  double class_delta = 0.0;  // added for class AD

  bool contains(const Vec3& p) const;
};

struct ConfoundSpec {
  bool enabled = false;
  /// Added to the R2* of the confound patch (non-brain shell, near `center`).
  double offset = 20.0;
  Vec3 center{0.0, 14.0, 0.0};
  double radius = 6.0;
  /// Probability that a subject of each class carries the confound.
  double prevalence_nc = 0.0;
  double prevalence_ad = 1.0;
};

struct GeometryJitter {
  double translation = 0.0;  // mm, uniform in [-t, t] per axis
  double scale = 0.0;        // uniform in [1-s, 1+s] per axis
  double rotation_deg = 0.0; // about z, uniform in [-r, r]
  double warp_amplitude = 0.0;  // mm, smooth sinusoidal nonlinear component
};

struct PhantomSpec {
  std::array<int, 3> dims{32, 32, 32};
  Vec3 spacing{1.0, 1.0, 1.0};
  std::vector<double> echo_times;  // seconds
  double s0_value = 1000.0;
  double noise_sigma = 20.0;
  Ellipsoid brain{{0, 0, 0}, {11, 12, 10}, 20.0, 0.0};
  double shell_thickness = 3.0;  // mm, head = brain radii + thickness
  double shell_r2star = 15.0;
  std::vector<Ellipsoid> rois;   // basal-ganglia analogues
  ConfoundSpec confound;
  GeometryJitter jitter;
  std::size_t guidance_dilation = 0;  // voxels

  /// 6 echoes at 4.92 ms spacing and two symmetric ganglia with a 15/s AD increase.
  static PhantomSpec standard();
  void validate() const;
};

struct Phantom {
  MultiEchoSeries series;
  R2StarMap truth;
  Volume3D brain_mask;
  Volume3D guidance_mask;
  Volume3D roi_mask;       // union of the ganglia ellipsoids
  Volume3D confound_mask;  // where the confound would be planted
  Volume3D head_mask;
  bool confound = false;
  /// Reference (template) space -> subject space, sampled on the reference grid.
  DisplacementField to_reference;
};

/// Deterministic in (spec, label, seed).
Phantom generate_phantom(const PhantomSpec& spec, ClassLabel label, std::uint64_t seed);

/// Reference-space masks (no jitter), for warped-space summaries.
struct ReferenceMasks {
  Volume3D brain, roi, confound, head;
};
ReferenceMasks reference_masks(const PhantomSpec& spec);

}  // namespace relspray
