// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include "cmstew/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace cmstew::kernels {

namespace {
std::atomic<int> g_thread_cap{0};
}

void set_thread_cap(int cap) { g_thread_cap.store(cap < 0 ? 0 : cap); }

int thread_cap() { return g_thread_cap.load(); }

void configure_threads_from_env() {
  const char* env = std::getenv("CMSTEW_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (end == nullptr || *end != '\0' || v <= 0) {
    throw ConfigError(cat("CMSTEW_THREADS must be a positive integer, got \"",
                          env, "\""));
  }
  set_thread_cap(static_cast<int>(v));
}

int effective_threads() {
  int n = 1;
#ifdef _OPENMP
  n = omp_get_max_threads();
#endif
  const int cap = g_thread_cap.load();
  if (cap > 0 && cap < n) n = cap;
  return n < 1 ? 1 : n;
}

}  // namespace cmstew::kernels
