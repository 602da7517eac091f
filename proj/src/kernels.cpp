#include "relspray/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace relspray {

ConvGeometry ConvGeometry::same(int in_ch, int out_ch, Shape3 in, int stride) {
  ConvGeometry g;
  g.in_ch = in_ch;
  g.out_ch = out_ch;
  g.in = in;
  g.stride = stride;
  g.out = {(in.x + stride - 1) / stride, (in.y + stride - 1) / stride, (in.z + stride - 1) / stride};
  return g;
}

namespace {

// Zero-padded copy of a [c][z][y][x] tensor with each z-plane split into s x s
// phases: phase (py, px) holds padded rows py, py + s, ... and columns px, px + s, ...
// Every tap of a stride-s convolution then reads one contiguous run per plane.
template <class T>
struct Phases {
  int s = 1, pz = 0, hy = 0, hx = 0;
  std::vector<T> data;

  std::size_t plane() const { return static_cast<std::size_t>(hy) * hx; }
  std::size_t offset(int c, int z, int py, int px) const {
    return (((static_cast<std::size_t>(c) * pz + z) * s + py) * s + px) * plane();
  }
  const T* ptr(int c, int z, int py, int px) const { return data.data() + offset(c, z, py, px); }
};

template <class T>
Phases<T> make_phases(const T* in, int ch, Shape3 n, int s) {
  Phases<T> p;
  p.s = s;
  p.pz = n.z + 2;
  p.hy = (n.y + 2 + s - 1) / s;
  p.hx = (n.x + 2 + s - 1) / s;
  p.data.assign(static_cast<std::size_t>(ch) * p.pz * s * s * p.plane(), T(0));
#pragma omp parallel for collapse(2) schedule(static)
  for (int c = 0; c < ch; ++c)
    for (int z = 0; z < n.z; ++z) {
      const T* src = in + (static_cast<std::size_t>(c) * n.z + z) * n.y * n.x;
      for (int y = 0; y < n.y; ++y) {
        const int Y = y + 1;
        for (int x = 0; x < n.x; ++x) {
          const int X = x + 1;
          p.data[p.offset(c, z + 1, Y % s, X % s) + static_cast<std::size_t>(Y / s) * p.hx + X / s] =
              src[static_cast<std::size_t>(y) * n.x + x];
        }
      }
    }
  return p;
}

template <class T>
inline void axpy(T* __restrict y, const T* __restrict x, T a, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

template <class T>
void conv3d_forward(const ConvGeometry& g, const T* in, const T* w, const T* bias, T* out) {
  const int s = g.stride;
  const Shape3 ni = g.in, no = g.out;
  const Phases<T> ph = make_phases(in, g.in_ch, ni, s);
  const int R = ph.hx;
  const std::size_t L = static_cast<std::size_t>(no.y - 1) * R + no.x;
#pragma omp parallel
  {
    std::vector<T> buf(L);
#pragma omp for collapse(2) schedule(static)
    for (int co = 0; co < g.out_ch; ++co)
      for (int oz = 0; oz < no.z; ++oz) {
        std::fill(buf.begin(), buf.end(), T(0));
        for (int ci = 0; ci < g.in_ch; ++ci) {
          const T* wk = w + (static_cast<std::size_t>(co) * g.in_ch + ci) * 27;
          for (int kz = 0; kz < 3; ++kz)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const T* src = ph.ptr(ci, oz * s + kz, ky % s, kx % s) + (ky / s) * R + kx / s;
                axpy(buf.data(), src, wk[(kz * 3 + ky) * 3 + kx], L);
              }
        }
        const T b = bias ? bias[co] : T(0);
        T* op = out + (static_cast<std::size_t>(co) * no.z + oz) * no.y * no.x;
        for (int oy = 0; oy < no.y; ++oy)
          for (int ox = 0; ox < no.x; ++ox) op[oy * no.x + ox] = buf[static_cast<std::size_t>(oy) * R + ox] + b;
      }
  }
}

template <class T>
void conv3d_backward_data(const ConvGeometry& g, const T* gout, const T* w, T* gin) {
  const int s = g.stride;
  const Shape3 ni = g.in, no = g.out;
  const std::size_t in_plane = static_cast<std::size_t>(ni.x) * ni.y;
  if (s == 1) {
    // gin(p) = sum_k w[k] gout(p + 1 - k), read from the padded gradient.
    const Phases<T> gp = make_phases(gout, g.out_ch, no, 1);
    const int R = gp.hx;
    const std::size_t L = static_cast<std::size_t>(ni.y - 1) * R + ni.x;
#pragma omp parallel
    {
      std::vector<T> buf(L);
#pragma omp for collapse(2) schedule(static)
      for (int ci = 0; ci < g.in_ch; ++ci)
        for (int iz = 0; iz < ni.z; ++iz) {
          std::fill(buf.begin(), buf.end(), T(0));
          for (int co = 0; co < g.out_ch; ++co) {
            const T* wk = w + (static_cast<std::size_t>(co) * g.in_ch + ci) * 27;
            for (int kz = 0; kz < 3; ++kz)
              for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                  const T* src = gp.ptr(co, iz + 2 - kz, 0, 0) + (2 - ky) * R + (2 - kx);
                  axpy(buf.data(), src, wk[(kz * 3 + ky) * 3 + kx], L);
                }
          }
          T* dst = gin + (static_cast<std::size_t>(ci) * ni.z + iz) * in_plane;
          for (int y = 0; y < ni.y; ++y)
            for (int x = 0; x < ni.x; ++x) dst[y * ni.x + x] = buf[static_cast<std::size_t>(y) * R + x];
        }
    }
    return;
  }

  // Stride 2: input position 2a + p receives taps k with p + 1 - k even, from
  // output a + (p + 1 - k) / 2. The gradient gets one extra zero row and column.
  const int R = no.x + 1;
  const std::size_t eplane = static_cast<std::size_t>(no.y + 1) * R;
  std::vector<T> ge(static_cast<std::size_t>(g.out_ch) * no.z * eplane, T(0));
  for (int c = 0; c < g.out_ch; ++c)
    for (int z = 0; z < no.z; ++z)
      for (int y = 0; y < no.y; ++y)
        for (int x = 0; x < no.x; ++x)
          ge[(static_cast<std::size_t>(c) * no.z + z) * eplane + static_cast<std::size_t>(y) * R + x] =
              gout[((static_cast<std::size_t>(c) * no.z + z) * no.y + y) * no.x + x];
#pragma omp parallel
  {
    std::vector<T> buf(eplane);
#pragma omp for collapse(2) schedule(static)
    for (int ci = 0; ci < g.in_ch; ++ci)
      for (int iz = 0; iz < ni.z; ++iz) {
        T* dst = gin + (static_cast<std::size_t>(ci) * ni.z + iz) * in_plane;
        for (int py = 0; py < 2; ++py)
          for (int px = 0; px < 2; ++px) {
            const int na = (ni.y - py + 1) / 2, nb = (ni.x - px + 1) / 2;
            if (na <= 0 || nb <= 0) continue;
            const std::size_t L = static_cast<std::size_t>(na - 1) * R + nb;
            std::fill(buf.begin(), buf.begin() + L, T(0));
            for (int co = 0; co < g.out_ch; ++co) {
              const T* wk = w + (static_cast<std::size_t>(co) * g.in_ch + ci) * 27;
              for (int kz = 0; kz < 3; ++kz) {
                const int num = iz + 1 - kz;
                if (num < 0 || num % 2 != 0 || num / 2 >= no.z) continue;
                const T* plane = ge.data() + (static_cast<std::size_t>(co) * no.z + num / 2) * eplane;
                for (int ky = 0; ky < 3; ++ky) {
                  const int ny_ = py + 1 - ky;
                  if (ny_ < 0 || ny_ % 2 != 0) continue;
                  for (int kx = 0; kx < 3; ++kx) {
                    const int nx_ = px + 1 - kx;
                    if (nx_ < 0 || nx_ % 2 != 0) continue;
                    axpy(buf.data(), plane + (ny_ / 2) * R + nx_ / 2, wk[(kz * 3 + ky) * 3 + kx], L);
                  }
                }
              }
            }
            for (int a = 0; a < na; ++a)
              for (int b = 0; b < nb; ++b)
                dst[static_cast<std::size_t>(2 * a + py) * ni.x + 2 * b + px] = buf[static_cast<std::size_t>(a) * R + b];
          }
      }
  }
}

template <class T>
void conv3d_backward_weights(const ConvGeometry& g, const T* in, const T* gout, T* gw, T* gb) {
  const int s = g.stride;
  const Shape3 ni = g.in, no = g.out;
  if (gb) {
    for (int co = 0; co < g.out_ch; ++co) {
      const T* op = gout + static_cast<std::size_t>(co) * no.size();
      T acc = 0;
      for (std::size_t i = 0; i < no.size(); ++i) acc += op[i];
      gb[co] += acc;
    }
  }
  const Phases<T> ph = make_phases(in, g.in_ch, ni, s);
  const int R = ph.hx;
  const std::size_t L = static_cast<std::size_t>(no.y - 1) * R + no.x;
  // Output gradient in the same row layout; padding columns stay zero.
  std::vector<T> go(static_cast<std::size_t>(g.out_ch) * no.z * L, T(0));
  for (int c = 0; c < g.out_ch; ++c)
    for (int z = 0; z < no.z; ++z)
      for (int y = 0; y < no.y; ++y)
        for (int x = 0; x < no.x; ++x)
          go[(static_cast<std::size_t>(c) * no.z + z) * L + static_cast<std::size_t>(y) * R + x] =
              gout[((static_cast<std::size_t>(c) * no.z + z) * no.y + y) * no.x + x];
#pragma omp parallel for collapse(2) schedule(static)
  for (int co = 0; co < g.out_ch; ++co)
    for (int ci = 0; ci < g.in_ch; ++ci) {
      T acc[27] = {};
      for (int oz = 0; oz < no.z; ++oz) {
        const T* gp = go.data() + (static_cast<std::size_t>(co) * no.z + oz) * L;
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const T* src = ph.ptr(ci, oz * s + kz, ky % s, kx % s) + (ky / s) * R + kx / s;
              acc[(kz * 3 + ky) * 3 + kx] += dot(gp, src, L);
            }
      }
      T* gk = gw + (static_cast<std::size_t>(co) * g.in_ch + ci) * 27;
      for (int k = 0; k < 27; ++k) gk[k] += acc[k];
    }
}

template <class T>
void dense_forward(int in_n, int out_n, const T* x, const T* w, const T* b, T* y) {
#pragma omp parallel for schedule(static) if (static_cast<long>(in_n) * out_n > 65536)
  for (int o = 0; o < out_n; ++o) {
    const T* row = w + static_cast<std::size_t>(o) * in_n;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (int i = 0; i < in_n; ++i) acc += row[i] * x[i];
    y[o] = acc + (b ? b[o] : T(0));
  }
}

template <class T>
void dense_backward_data(int in_n, int out_n, const T* gy, const T* w, T* gx) {
  std::fill(gx, gx + in_n, T(0));
  for (int o = 0; o < out_n; ++o) {
    const T* row = w + static_cast<std::size_t>(o) * in_n;
    const T go = gy[o];
#pragma omp simd
    for (int i = 0; i < in_n; ++i) gx[i] += go * row[i];
  }
}

template <class T>
void dense_backward_weights(int in_n, int out_n, const T* x, const T* gy, T* gw, T* gb) {
#pragma omp parallel for schedule(static) if (static_cast<long>(in_n) * out_n > 65536)
  for (int o = 0; o < out_n; ++o) {
    T* row = gw + static_cast<std::size_t>(o) * in_n;
    const T go = gy[o];
#pragma omp simd
    for (int i = 0; i < in_n; ++i) row[i] += go * x[i];
  }
  if (gb)
    for (int o = 0; o < out_n; ++o) gb[o] += gy[o];
}

#define RELSPRAY_INSTANTIATE(T)                                                                 \
  template void conv3d_forward<T>(const ConvGeometry&, const T*, const T*, const T*, T*);       \
  template void conv3d_backward_data<T>(const ConvGeometry&, const T*, const T*, T*);          \
  template void conv3d_backward_weights<T>(const ConvGeometry&, const T*, const T*, T*, T*);   \
  template void dense_forward<T>(int, int, const T*, const T*, const T*, T*);                  \
  template void dense_backward_data<T>(int, int, const T*, const T*, T*);                      \
  template void dense_backward_weights<T>(int, int, const T*, const T*, T*, T*);

RELSPRAY_INSTANTIATE(float)
RELSPRAY_INSTANTIATE(double)

#undef RELSPRAY_INSTANTIATE

}  // namespace relspray
