#include "relspray/reference.hpp"

#include <algorithm>

namespace relspray::ref {

namespace {

inline std::size_t at(const Shape3& s, int c, int z, int y, int x) {
  return ((static_cast<std::size_t>(c) * s.z + z) * s.y + y) * s.x + x;
}

inline std::size_t wat(const ConvGeometry& g, int co, int ci, int kz, int ky, int kx) {
  return (((static_cast<std::size_t>(co) * g.in_ch + ci) * 3 + kz) * 3 + ky) * 3 + kx;
}

}  // namespace

template <class T>
void conv3d_forward(const ConvGeometry& g, const T* in, const T* w, const T* bias, T* out) {
  for (int co = 0; co < g.out_ch; ++co)
    for (int oz = 0; oz < g.out.z; ++oz)
      for (int oy = 0; oy < g.out.y; ++oy)
        for (int ox = 0; ox < g.out.x; ++ox) {
          T acc = bias ? bias[co] : T(0);
          for (int ci = 0; ci < g.in_ch; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iz = oz * g.stride + kz - 1, iy = oy * g.stride + ky - 1, ix = ox * g.stride + kx - 1;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= g.in.z || iy >= g.in.y || ix >= g.in.x) continue;
                  acc += w[wat(g, co, ci, kz, ky, kx)] * in[at(g.in, ci, iz, iy, ix)];
                }
          out[at(g.out, co, oz, oy, ox)] = acc;
        }
}

template <class T>
void conv3d_backward_data(const ConvGeometry& g, const T* gout, const T* w, T* gin) {
  std::fill(gin, gin + g.in_size(), T(0));
  for (int co = 0; co < g.out_ch; ++co)
    for (int oz = 0; oz < g.out.z; ++oz)
      for (int oy = 0; oy < g.out.y; ++oy)
        for (int ox = 0; ox < g.out.x; ++ox)
          for (int ci = 0; ci < g.in_ch; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iz = oz * g.stride + kz - 1, iy = oy * g.stride + ky - 1, ix = ox * g.stride + kx - 1;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= g.in.z || iy >= g.in.y || ix >= g.in.x) continue;
                  gin[at(g.in, ci, iz, iy, ix)] += w[wat(g, co, ci, kz, ky, kx)] * gout[at(g.out, co, oz, oy, ox)];
                }
}

template <class T>
void conv3d_backward_weights(const ConvGeometry& g, const T* in, const T* gout, T* gw, T* gb) {
  for (int co = 0; co < g.out_ch; ++co)
    for (int oz = 0; oz < g.out.z; ++oz)
      for (int oy = 0; oy < g.out.y; ++oy)
        for (int ox = 0; ox < g.out.x; ++ox) {
          const T go = gout[at(g.out, co, oz, oy, ox)];
          if (gb) gb[co] += go;
          for (int ci = 0; ci < g.in_ch; ++ci)
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const int iz = oz * g.stride + kz - 1, iy = oy * g.stride + ky - 1, ix = ox * g.stride + kx - 1;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= g.in.z || iy >= g.in.y || ix >= g.in.x) continue;
                  gw[wat(g, co, ci, kz, ky, kx)] += go * in[at(g.in, ci, iz, iy, ix)];
                }
        }
}

template void conv3d_forward<float>(const ConvGeometry&, const float*, const float*, const float*, float*);
template void conv3d_forward<double>(const ConvGeometry&, const double*, const double*, const double*, double*);
template void conv3d_backward_data<float>(const ConvGeometry&, const float*, const float*, float*);
template void conv3d_backward_data<double>(const ConvGeometry&, const double*, const double*, double*);
template void conv3d_backward_weights<float>(const ConvGeometry&, const float*, const float*, float*, float*);
template void conv3d_backward_weights<double>(const ConvGeometry&, const double*, const double*, double*, double*);

R2StarMap fit_r2star_map(const MultiEchoSeries& series, const Volume3D* mask, const FitOptions& opts) {
  series.validate();
  const Grid& g = series.grid();
  R2StarMap out{Volume3D(g), Volume3D(g), Volume3D(g), Volume3D(g)};
  std::vector<double> sig(series.echo_times.size());
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    if (mask && mask->data[i] == 0.0) continue;
    for (std::size_t e = 0; e < sig.size(); ++e) sig[e] = series.volumes[e].data[i];
    const VoxelFit f = fit_r2star_voxel(sig, series.echo_times, opts);
    if (!f.valid) continue;
    out.r2star.data[i] = f.r2star;
    out.s0.data[i] = f.s0;
    out.r_squared.data[i] = f.r_squared;
    out.valid_mask.data[i] = 1.0;
  }
  return out;
}

std::vector<double> pairwise_sq_distances(const std::vector<double>& x, std::size_t n, std::size_t m) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) {
        const double diff = x[i * m + k] - x[j * m + k];
        s += diff * diff;
      }
      d[i * n + j] = s;
    }
  return d;
}

}  // namespace relspray::ref
