#pragma once

namespace relspray {

/// Thread control shared by every OpenMP kernel in the library.
///
/// Deterministic mode pins execution to one thread. The kernels themselves
/// never race on outputs, so results only depend on the thread count through
/// reductions; a single thread fixes their order.
void set_threads(int n);
int max_threads();
void set_deterministic(bool on);
bool deterministic();

}  // namespace relspray
