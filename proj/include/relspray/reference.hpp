#pragma once

// Serial reference implementations of the parallel kernels. They favour the
// most literal loop structure over speed and back the unit tests and the
// benchmark comparison.

#include <vector>

#include "relspray/kernels.hpp"
#include "relspray/relaxometry.hpp"

namespace relspray::ref {

template <class T>
void conv3d_forward(const ConvGeometry& g, const T* in, const T* w, const T* bias, T* out);

template <class T>
void conv3d_backward_data(const ConvGeometry& g, const T* gout, const T* w, T* gin);

template <class T>
void conv3d_backward_weights(const ConvGeometry& g, const T* in, const T* gout, T* gw, T* gb);

R2StarMap fit_r2star_map(const MultiEchoSeries& series, const Volume3D* mask = nullptr, const FitOptions& opts = {});

/// Row-major n x n squared Euclidean distances between rows of an n x m matrix.
std::vector<double> pairwise_sq_distances(const std::vector<double>& x, std::size_t n, std::size_t m);

}  // namespace relspray::ref
