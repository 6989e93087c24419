// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
//
// Times the OpenMP matmul against the serial reference and verifies the
// results stay bit-identical, which the training path depends on.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <vector>

#include "cmstew/kernels.hpp"
#include "cmstew/rng.hpp"

using namespace cmstew;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

}  // namespace

int main(int argc, char** argv) {
  int reps = 5;
  if (argc > 1) reps = std::max(1, std::atoi(argv[1]));

  std::printf("threads available: %d\n", kernels::effective_threads());
  std::printf("%8s %12s %12s %8s %s\n", "m=n=k", "serial ms", "parallel ms",
              "speedup", "bitwise");

  bool all_equal = true;
  for (int n : {64, 128, 256, 512}) {
    Rng rng(static_cast<std::uint64_t>(n));
    std::vector<float> a(static_cast<std::size_t>(n) * n);
    std::vector<float> b(static_cast<std::size_t>(n) * n);
    for (auto& v : a) v = static_cast<float>(rng.uniform(-1, 1));
    for (auto& v : b) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> cs(a.size()), cp(a.size());

    const double ts = time_ms(
        [&] { kernels::gemm_ref(false, false, n, n, n, a.data(), b.data(), cs.data(), false); },
        reps);
    const double tp = time_ms(
        [&] { kernels::gemm(false, false, n, n, n, a.data(), b.data(), cp.data(), false); },
        reps);
    const bool equal =
        std::memcmp(cs.data(), cp.data(), cs.size() * sizeof(float)) == 0;
    all_equal = all_equal && equal;
    std::printf("%8d %12.3f %12.3f %7.2fx %s\n", n, ts, tp, ts / tp,
                equal ? "yes" : "NO");
  }
  if (!all_equal) {
    std::fprintf(stderr, "parallel kernel diverged from the serial reference\n");
    return 1;
  }
  return 0;
}
