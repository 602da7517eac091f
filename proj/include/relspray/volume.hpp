#pragma once

#include <array>
#include <cstddef>
#include <vector>

namespace relspray {

using Vec3 = std::array<double, 3>;
using Mat4 = std::array<std::array<double, 4>, 4>;

Mat4 identity4();
Mat4 multiply(const Mat4& a, const Mat4& b);
Mat4 inverse(const Mat4& m);  // throws NumericError when |det| <= 1e-12
double determinant(const Mat4& m);
Vec3 apply_point(const Mat4& m, const Vec3& p);

/// Voxel lattice: dimensions, spacing in mm, and the voxel-index to world (mm)
/// affine. Voxel (i, j, k) sits at grid_to_world * [i, j, k, 1].
struct Grid {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Mat4 grid_to_world = identity4();

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
  }
  Vec3 world(int i, int j, int k) const;
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }

  void validate() const;
  bool same_as(const Grid& other, double tol = 1e-9) const;

  /// Axis-aligned grid with the given spacing whose voxel centres are placed
  /// at origin + spacing * index.
  static Grid make(std::array<int, 3> dims, Vec3 spacing, Vec3 origin = {0.0, 0.0, 0.0});
};

/// Dense scalar volume, x-fastest.
struct Volume3D {
  Grid grid;
  std::vector<double> data;

  Volume3D() = default;
  explicit Volume3D(const Grid& g, double fill = 0.0);

  double& operator()(int i, int j, int k) { return data[grid.index(i, j, k)]; }
  double operator()(int i, int j, int k) const { return data[grid.index(i, j, k)]; }
  std::size_t size() const { return data.size(); }

  void validate() const;
  double sum() const;
};

/// World-to-world (mm) affine map.
struct AffineTransform {
  Mat4 matrix = identity4();

  static AffineTransform identity() { return {}; }
  static AffineTransform translation(const Vec3& t);
  AffineTransform inverse() const;
  void validate() const;
};

/// Displacement in mm defined on a target grid; component volumes share that grid.
struct DisplacementField {
  Volume3D dx, dy, dz;

  static DisplacementField zeros(const Grid& g);
  const Grid& grid() const { return dx.grid; }
  void validate() const;
};

/// Trilinear interpolation of a volume at world coordinates. Points outside the
/// node lattice return `outside`. Precomputes the inverse grid affine.
class TrilinearSampler {
 public:
  explicit TrilinearSampler(const Volume3D& vol, double outside = 0.0);
  double at_world(const Vec3& p) const;
  double at_voxel(double x, double y, double z) const;

 private:
  const Volume3D* vol_;
  Mat4 world_to_grid_;
  double outside_;
};

double trilinear_sample(const Volume3D& vol, const Vec3& world_point, double outside = 0.0);

/// Pull resampling: output voxel v gets vol at transform^-1(target.world(v)).
Volume3D resample(const Volume3D& vol, const Grid& target, const AffineTransform& transform,
                  double outside = 0.0);

/// Output on the field's grid; voxel v is sampled at world(v) + displacement(v).
Volume3D apply_displacement(const Volume3D& vol, const DisplacementField& field, double outside = 0.0);

/// Grid covering the same field of view at a coarser isotropic spacing.
Grid downsampled_grid(const Grid& g, double target_spacing);

}  // namespace relspray
