#pragma once

#include <cstddef>

namespace relspray {

struct Shape3 {
  int x = 1, y = 1, z = 1;
  std::size_t size() const { return static_cast<std::size_t>(x) * y * z; }
  bool operator==(const Shape3&) const = default;
};

/// 3x3x3 cross-correlation with padding 1. Output extent is ceil(in / stride).
/// Tensors are channel-major with x fastest: [c][z][y][x]. Weights are
/// [out][in][kz][ky][kx].
struct ConvGeometry {
  int in_ch = 1, out_ch = 1;
  Shape3 in, out;
  int stride = 1;

  static ConvGeometry same(int in_ch, int out_ch, Shape3 in, int stride);
  std::size_t weight_count() const { return static_cast<std::size_t>(out_ch) * in_ch * 27; }
  std::size_t in_size() const { return in.size() * in_ch; }
  std::size_t out_size() const { return out.size() * out_ch; }
};

// Parallel kernels. Each output element is owned by exactly one thread, so the
// result does not depend on the thread count.

/// out = conv(in, w) + bias; `bias` may be null.
template <class T>
void conv3d_forward(const ConvGeometry& g, const T* in, const T* w, const T* bias, T* out);

/// gin = conv^T(gout, w), overwriting gin.
template <class T>
void conv3d_backward_data(const ConvGeometry& g, const T* gout, const T* w, T* gin);

/// gw += dL/dw, gb += dL/db (gb may be null).
template <class T>
void conv3d_backward_weights(const ConvGeometry& g, const T* in, const T* gout, T* gw, T* gb);

/// y = W x + b, W is [out][in]; `b` may be null.
template <class T>
void dense_forward(int in_n, int out_n, const T* x, const T* w, const T* b, T* y);

/// gx = W^T gy, overwriting gx.
template <class T>
void dense_backward_data(int in_n, int out_n, const T* gy, const T* w, T* gx);

/// gw += gy x^T, gb += gy (gb may be null).
template <class T>
void dense_backward_weights(int in_n, int out_n, const T* x, const T* gy, T* gw, T* gb);

}  // namespace relspray
