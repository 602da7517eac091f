#include "relspray/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace relspray {

namespace {
bool g_deterministic = false;
int g_requested = 0;

void apply() {
#ifdef _OPENMP
  if (g_deterministic) {
    omp_set_num_threads(1);
  } else if (g_requested > 0) {
    omp_set_num_threads(g_requested);
  }
#endif
}
}  // namespace

void set_threads(int n) {
  g_requested = n;
  apply();
}

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_deterministic(bool on) {
  g_deterministic = on;
  if (!on) {
#ifdef _OPENMP
    if (g_requested <= 0) omp_set_num_threads(omp_get_num_procs());
#endif
  }
  apply();
}

bool deterministic() { return g_deterministic; }

}  // namespace relspray
