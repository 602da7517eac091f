#include "relspray/volume.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "relspray/errors.hpp"

namespace relspray {

Mat4 identity4() {
  Mat4 m{};
  for (int i = 0; i < 4; ++i) m[i][i] = 1.0;
  return m;
}

Mat4 multiply(const Mat4& a, const Mat4& b) {
  Mat4 r{};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double s = 0.0;
      for (int k = 0; k < 4; ++k) s += a[i][k] * b[k][j];
      r[i][j] = s;
    }
  return r;
}

double determinant(const Mat4& m) {
  // Laplace expansion via 2x2 minors.
  const double s0 = m[0][0] * m[1][1] - m[1][0] * m[0][1];
  const double s1 = m[0][0] * m[1][2] - m[1][0] * m[0][2];
  const double s2 = m[0][0] * m[1][3] - m[1][0] * m[0][3];
  const double s3 = m[0][1] * m[1][2] - m[1][1] * m[0][2];
  const double s4 = m[0][1] * m[1][3] - m[1][1] * m[0][3];
  const double s5 = m[0][2] * m[1][3] - m[1][2] * m[0][3];
  const double c5 = m[2][2] * m[3][3] - m[3][2] * m[2][3];
  const double c4 = m[2][1] * m[3][3] - m[3][1] * m[2][3];
  const double c3 = m[2][1] * m[3][2] - m[3][1] * m[2][2];
  const double c2 = m[2][0] * m[3][3] - m[3][0] * m[2][3];
  const double c1 = m[2][0] * m[3][2] - m[3][0] * m[2][2];
  const double c0 = m[2][0] * m[3][1] - m[3][0] * m[2][1];
  return s0 * c5 - s1 * c4 + s2 * c3 + s3 * c2 - s4 * c1 + s5 * c0;
}

Mat4 inverse(const Mat4& m) {
  if (std::abs(determinant(m)) <= 1e-12) throw NumericError("affine matrix is not invertible");
  // Gauss-Jordan with partial pivoting.
  Mat4 a = m;
  Mat4 inv = identity4();
  for (int col = 0; col < 4; ++col) {
    int piv = col;
    for (int r = col + 1; r < 4; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    std::swap(a[col], a[piv]);
    std::swap(inv[col], inv[piv]);
    const double d = a[col][col];
    for (int j = 0; j < 4; ++j) {
      a[col][j] /= d;
      inv[col][j] /= d;
    }
    for (int r = 0; r < 4; ++r) {
      if (r == col) continue;
      const double f = a[r][col];
      if (f == 0.0) continue;
      for (int j = 0; j < 4; ++j) {
        a[r][j] -= f * a[col][j];
        inv[r][j] -= f * inv[col][j];
      }
    }
  }
  return inv;
}

Vec3 apply_point(const Mat4& m, const Vec3& p) {
  return {m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
          m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
          m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3]};
}

Vec3 Grid::world(int i, int j, int k) const {
  return apply_point(grid_to_world, {double(i), double(j), double(k)});
}

void Grid::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0) throw DataError("grid dimension " + std::to_string(a) + " must be positive");
    if (!(spacing[a] > 0.0)) throw DataError("grid spacing " + std::to_string(a) + " must be positive");
  }
  if (std::abs(determinant(grid_to_world)) <= 1e-12) throw DataError("grid_to_world affine is singular");
}

bool Grid::same_as(const Grid& o, double tol) const {
  if (dims != o.dims) return false;
  for (int a = 0; a < 3; ++a)
    if (std::abs(spacing[a] - o.spacing[a]) > tol) return false;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (std::abs(grid_to_world[i][j] - o.grid_to_world[i][j]) > tol) return false;
  return true;
}

Grid Grid::make(std::array<int, 3> dims, Vec3 spacing, Vec3 origin) {
  Grid g;
  g.dims = dims;
  g.spacing = spacing;
  g.grid_to_world = identity4();
  for (int a = 0; a < 3; ++a) {
    g.grid_to_world[a][a] = spacing[a];
    g.grid_to_world[a][3] = origin[a];
  }
  return g;
}

Volume3D::Volume3D(const Grid& g, double fill) : grid(g), data(g.voxel_count(), fill) {}

void Volume3D::validate() const {
  grid.validate();
  if (data.size() != grid.voxel_count())
    throw DataError("volume data length " + std::to_string(data.size()) + " does not match dims product " +
                    std::to_string(grid.voxel_count()));
}

double Volume3D::sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

AffineTransform AffineTransform::translation(const Vec3& t) {
  AffineTransform a;
  for (int i = 0; i < 3; ++i) a.matrix[i][3] = t[i];
  return a;
}

AffineTransform AffineTransform::inverse() const { return {relspray::inverse(matrix)}; }

void AffineTransform::validate() const {
  const auto& r = matrix[3];
  if (r[0] != 0.0 || r[1] != 0.0 || r[2] != 0.0 || r[3] != 1.0)
    throw DataError("affine transform last row must be [0 0 0 1]");
  if (std::abs(determinant(matrix)) <= 1e-12) throw NumericError("affine transform is not invertible");
}

DisplacementField DisplacementField::zeros(const Grid& g) {
  return {Volume3D(g), Volume3D(g), Volume3D(g)};
}

void DisplacementField::validate() const {
  dx.validate();
  dy.validate();
  dz.validate();
  if (!dx.grid.same_as(dy.grid) || !dx.grid.same_as(dz.grid))
    throw DataError("displacement field components are defined on different grids");
}

TrilinearSampler::TrilinearSampler(const Volume3D& vol, double outside)
    : vol_(&vol), world_to_grid_(relspray::inverse(vol.grid.grid_to_world)), outside_(outside) {}

double TrilinearSampler::at_world(const Vec3& p) const {
  const Vec3 g = apply_point(world_to_grid_, p);
  return at_voxel(g[0], g[1], g[2]);
}

namespace {

// Snap coordinates within this distance of the lattice boundary onto it so that
// round-off in grid->world->grid does not push boundary nodes out of bounds.
constexpr double kEdgeTol = 1e-9;

inline bool locate(double c, int n, int& i0, double& f) {
  if (c < -kEdgeTol || c > (n - 1) + kEdgeTol) return false;
  if (n == 1) {
    i0 = 0;
    f = 0.0;
    return true;
  }
  c = std::clamp(c, 0.0, double(n - 1));
  i0 = std::min(static_cast<int>(std::floor(c)), n - 2);
  f = c - i0;
  return true;
}

}  // namespace

double TrilinearSampler::at_voxel(double x, double y, double z) const {
  const auto& d = vol_->grid.dims;
  int i, j, k;
  double fx, fy, fz;
  if (!locate(x, d[0], i, fx) || !locate(y, d[1], j, fy) || !locate(z, d[2], k, fz)) return outside_;
  const int di = d[0] > 1 ? 1 : 0;
  const std::size_t sj = d[1] > 1 ? static_cast<std::size_t>(d[0]) : 0;
  const std::size_t sk = d[2] > 1 ? static_cast<std::size_t>(d[0]) * d[1] : 0;
  const double* p = vol_->data.data() + vol_->grid.index(i, j, k);
  const double c00 = p[0] * (1 - fx) + p[di] * fx;
  const double c10 = p[sj] * (1 - fx) + p[sj + di] * fx;
  const double c01 = p[sk] * (1 - fx) + p[sk + di] * fx;
  const double c11 = p[sk + sj] * (1 - fx) + p[sk + sj + di] * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

double trilinear_sample(const Volume3D& vol, const Vec3& world_point, double outside) {
  return TrilinearSampler(vol, outside).at_world(world_point);
}

Volume3D resample(const Volume3D& vol, const Grid& target, const AffineTransform& transform, double outside) {
  vol.validate();
  target.validate();
  // voxel -> world (target) -> world (source) -> voxel (source) in one matrix
  const Mat4 pull = multiply(inverse(vol.grid.grid_to_world), multiply(inverse(transform.matrix), target.grid_to_world));
  TrilinearSampler sampler(vol, outside);
  Volume3D out(target);
  const int nx = target.dims[0], ny = target.dims[1], nz = target.dims[2];
#pragma omp parallel for schedule(static)
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const Vec3 g = apply_point(pull, {double(i), double(j), double(k)});
        out.data[target.index(i, j, k)] = sampler.at_voxel(g[0], g[1], g[2]);
      }
  return out;
}

Volume3D apply_displacement(const Volume3D& vol, const DisplacementField& field, double outside) {
  vol.validate();
  field.validate();
  const Grid& target = field.grid();
  TrilinearSampler sampler(vol, outside);
  Volume3D out(target);
  const int nx = target.dims[0], ny = target.dims[1], nz = target.dims[2];
#pragma omp parallel for schedule(static)
  for (int k = 0; k < nz; ++k)
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const std::size_t idx = target.index(i, j, k);
        Vec3 p = target.world(i, j, k);
        p[0] += field.dx.data[idx];
        p[1] += field.dy.data[idx];
        p[2] += field.dz.data[idx];
        out.data[idx] = sampler.at_world(p);
      }
  return out;
}

Grid downsampled_grid(const Grid& g, double target_spacing) {
  g.validate();
  if (!(target_spacing > 0.0)) throw ConfigError("target spacing must be positive");
  Grid out;
  out.grid_to_world = identity4();
  Vec3 origin{g.grid_to_world[0][3], g.grid_to_world[1][3], g.grid_to_world[2][3]};
  for (int a = 0; a < 3; ++a) {
    const double extent = g.dims[a] * g.spacing[a];
    out.dims[a] = std::max(1, static_cast<int>(std::ceil(extent / target_spacing - 1e-9)));
    out.spacing[a] = target_spacing;
    const double shift = 0.5 * (target_spacing - g.spacing[a]);
    for (int r = 0; r < 3; ++r) {
      const double dir = g.grid_to_world[r][a] / g.spacing[a];
      out.grid_to_world[r][a] = dir * target_spacing;
      origin[r] += dir * shift;
    }
  }
  for (int r = 0; r < 3; ++r) out.grid_to_world[r][3] = origin[r];
  return out;
}

}  // namespace relspray
