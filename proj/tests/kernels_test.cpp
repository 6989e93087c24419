// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstring>
#include <vector>

#include "cmstew/kernels.hpp"
#include "cmstew/rng.hpp"
#include "cmstew/tensor.hpp"

using namespace cmstew;

namespace {

// Naive i-j-k product, the independent reference for everything else.
template <typename S>
std::vector<S> oracle_gemm(bool ta, bool tb, int m, int n, int k,
                           const std::vector<S>& a, const std::vector<S>& b) {
  std::vector<S> c(static_cast<std::size_t>(m) * n, S(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int p = 0; p < k; ++p) {
        const double av = ta ? a[static_cast<std::size_t>(p) * m + i]
                             : a[static_cast<std::size_t>(i) * k + p];
        const double bv = tb ? b[static_cast<std::size_t>(j) * k + p]
                             : b[static_cast<std::size_t>(p) * n + j];
        s += av * bv;
      }
      c[static_cast<std::size_t>(i) * n + j] = static_cast<S>(s);
    }
  return c;
}

template <typename S>
std::vector<S> random_vec(std::int64_t n, Rng& rng) {
  std::vector<S> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = static_cast<S>(rng.uniform(-1.0, 1.0));
  return v;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({3, 4});
  CHECK(t.rank() == 2);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
  CHECK(t.size() == 12);
  t.at(2, 3) = 7.0f;
  CHECK(t[11] == 7.0f);
  CHECK_THROWS_AS(Tensor({2, -1}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0f, 2.0f}), std::invalid_argument);
  CHECK(Tensor({0, 5}).size() == 0);
}

TEST_CASE("gemm identity and zero annihilator") {
  const std::vector<float> a{1, 2, 3, 4};
  const std::vector<float> eye{1, 0, 0, 1};
  const std::vector<float> zero{0, 0, 0, 0};
  std::vector<float> c(4);
  kernels::gemm(false, false, 2, 2, 2, a.data(), eye.data(), c.data(), false);
  CHECK(c == a);
  kernels::gemm(false, false, 2, 2, 2, a.data(), zero.data(), c.data(), false);
  CHECK(c == zero);
}

TEST_CASE("gemm matches triple-loop oracle on random shapes") {
  Rng rng(7);
  for (int trial = 0; trial < 40; ++trial) {
    const int m = 1 + static_cast<int>(rng.below(32));
    const int n = 1 + static_cast<int>(rng.below(32));
    const int k = 1 + static_cast<int>(rng.below(32));
    for (bool ta : {false, true}) {
      for (bool tb : {false, true}) {
        auto a = random_vec<float>(static_cast<std::int64_t>(m) * k, rng);
        auto b = random_vec<float>(static_cast<std::int64_t>(k) * n, rng);
        auto want = oracle_gemm(ta, tb, m, n, k, a, b);
        std::vector<float> got(static_cast<std::size_t>(m) * n);
        kernels::gemm(ta, tb, m, n, k, a.data(), b.data(), got.data(), false);
        for (std::size_t i = 0; i < want.size(); ++i)
          CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("parallel gemm is bit-identical to the serial reference") {
  Rng rng(11);
  // Big enough to cross the parallel cutoff.
  const int m = 64, n = 48, k = 32;
  auto a = random_vec<float>(static_cast<std::int64_t>(m) * k, rng);
  auto b = random_vec<float>(static_cast<std::int64_t>(k) * n, rng);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      std::vector<float> ref(static_cast<std::size_t>(m) * n, 0.5f);
      std::vector<float> par(static_cast<std::size_t>(m) * n, 0.5f);
      for (bool acc : {false, true}) {
        kernels::gemm_ref(ta, tb, m, n, k, a.data(), b.data(), ref.data(), acc);
        kernels::gemm(ta, tb, m, n, k, a.data(), b.data(), par.data(), acc);
        CHECK(std::memcmp(ref.data(), par.data(), ref.size() * sizeof(float)) == 0);
      }
    }
  }
}

TEST_CASE("gemm results do not depend on the thread cap") {
  Rng rng(13);
  const int m = 40, n = 40, k = 40;
  auto a = random_vec<float>(static_cast<std::int64_t>(m) * k, rng);
  auto b = random_vec<float>(static_cast<std::int64_t>(k) * n, rng);
  std::vector<std::vector<float>> results;
  for (int cap : {1, 2, 3, 8}) {
    kernels::set_thread_cap(cap);
    std::vector<float> c(static_cast<std::size_t>(m) * n);
    kernels::gemm(false, false, m, n, k, a.data(), b.data(), c.data(), false);
    results.push_back(std::move(c));
  }
  kernels::set_thread_cap(0);
  for (std::size_t i = 1; i < results.size(); ++i) CHECK(results[i] == results[0]);
}

TEST_CASE("map/zip/axpy elementwise kernels") {
  std::vector<float> x{1, -2, 3};
  std::vector<float> y(3);
  kernels::map(3, x.data(), y.data(), [](float v) { return v * v; });
  CHECK(y == std::vector<float>{1, 4, 9});
  std::vector<float> z(3);
  kernels::zip(3, x.data(), y.data(), z.data(), [](float a, float b) { return a + b; });
  CHECK(z == std::vector<float>{2, 2, 12});
  kernels::zip_acc(3, x.data(), x.data(), z.data(), [](float a, float b) { return a * b; });
  CHECK(z == std::vector<float>{3, 6, 21});
  kernels::axpy(3, 2.0f, x.data(), z.data());
  CHECK(z == std::vector<float>{5, 2, 27});
  CHECK(kernels::sum(3, x.data()) == doctest::Approx(2.0));
}

TEST_CASE("add_col_sums accumulates row-wise") {
  const std::vector<float> x{1, 2, 3, 4, 5, 6};
  std::vector<float> out{10, 20};
  kernels::add_col_sums(3, 2, x.data(), out.data());
  CHECK(out == std::vector<float>{19, 32});
}

TEST_CASE("rng streams are deterministic and reasonably distributed") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
  Rng n(5);
  double mean = 0, var = 0;
  const int cnt = 20000;
  std::vector<double> xs(cnt);
  for (auto& x : xs) x = n.normal();
  for (double x : xs) mean += x;
  mean /= cnt;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= cnt;
  CHECK(mean == doctest::Approx(0.0).epsilon(0.05));
  CHECK(std::abs(var - 1.0) < 0.05);
  // below() is unbiased over its range
  Rng u(9);
  std::vector<int> hist(5, 0);
  for (int i = 0; i < 10000; ++i) ++hist[static_cast<std::size_t>(u.below(5))];
  for (int h : hist) CHECK(std::abs(h - 2000) < 250);
}

TEST_CASE("seed mixing separates parameter streams") {
  CHECK(mix_seed(1, fnv1a64("enc.proj.w")) != mix_seed(1, fnv1a64("enc.proj.b")));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
  CHECK(fnv1a64("a") != fnv1a64("b"));
}
