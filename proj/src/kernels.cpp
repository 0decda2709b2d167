#include "mvcca/kernels.hpp"

namespace mvcca::kernels {

namespace {
int g_threads = 0;  // 0 = runtime default
}

void set_threads(int n) {
  g_threads = n;
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

int threads() {
#ifdef _OPENMP
  if (g_threads > 0) return g_threads;
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace mvcca::kernels
