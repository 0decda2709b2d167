// Times the parallel kernels against the serial reference implementations.
#include <chrono>
#include <cstdio>
#include <string>

#include "mvcca/kernels.hpp"
#include "mvcca/rng.hpp"

using namespace mvcca;

namespace {

template <typename F>
double time_ms(F fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < reps; ++r) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

template <typename T>
void bench_type(const char* label, std::size_t n, int reps) {
  Dense<T> a(n, n), b(n, n);
  rng::fill_normal(a, 1);
  rng::fill_normal(b, 2);
  Dense<T> out;

  struct Row {
    const char* name;
    double serial_ms, par_ms;
  };
  Row rows[] = {
      {"matmul", time_ms([&] { kernels::serial::matmul(a, b, out); }, reps),
       time_ms([&] { kernels::par::matmul(a, b, out); }, reps)},
      {"matmul_nt", time_ms([&] { kernels::serial::matmul_nt(a, b, out); }, reps),
       time_ms([&] { kernels::par::matmul_nt(a, b, out); }, reps)},
      {"matmul_tn", time_ms([&] { kernels::serial::matmul_tn(a, b, out); }, reps),
       time_ms([&] { kernels::par::matmul_tn(a, b, out); }, reps)},
      {"pairwise_sqdist", time_ms([&] { kernels::serial::pairwise_sqdist(a, b, out); }, reps),
       time_ms([&] { kernels::par::pairwise_sqdist(a, b, out); }, reps)},
  };
  const double flop = 2.0 * n * n * n * 1e-9;
  std::printf("%s, n=%zu, threads=%d\n", label, n, kernels::threads());
  std::printf("  %-16s %12s %12s %9s %13s\n", "kernel", "serial ms", "parallel ms", "speedup",
              "par GFLOP/s");
  for (const auto& r : rows)
    std::printf("  %-16s %12.2f %12.2f %8.2fx %13.2f\n", r.name, r.serial_ms, r.par_ms,
                r.serial_ms / r.par_ms, flop / (r.par_ms * 1e-3));
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 512;
  int reps = 3;
  if (argc > 1) n = std::stoul(argv[1]);
  if (argc > 2) reps = std::stoi(argv[2]);
  bench_type<float>("float", n, reps);
  bench_type<double>("double", n, reps);
  return 0;
}
