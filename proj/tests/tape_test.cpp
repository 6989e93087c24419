// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include "cmstew/ops.hpp"
#include "fd_util.hpp"

using namespace cmstew;
using testutil::fd_check;
using testutil::random_tensor;
using testutil::random_tensor_off_kink;

namespace {
constexpr double kTol = 1e-4;
}

TEST_CASE("tape registers a parameter once and accumulates across uses") {
  ParameterT<double> w("w", TensorT<double>({2}, {1.0, 2.0}));
  Tape<double> t;
  Var<double> a = t.param(w);
  Var<double> b = t.param(w);
  CHECK(a.id == b.id);
  // loss = sum(w) + sum(w .* w): grad = 1 + 2w
  Var<double> loss = ops::add(ops::sum_all(a), ops::sum_all(ops::mul(a, b)));
  w.zero_grad();
  t.backward(loss);
  CHECK(w.grad[0] == doctest::Approx(3.0));
  CHECK(w.grad[1] == doctest::Approx(5.0));
}

TEST_CASE("backward rejects non-scalar and foreign variables") {
  Tape<double> t;
  Var<double> v = t.constant(TensorT<double>({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(t.backward(v), std::invalid_argument);
  Tape<double> other;
  Var<double> s = other.constant(TensorT<double>({1}, {1.0}));
  CHECK_THROWS_AS(t.backward(s), std::invalid_argument);
}

TEST_CASE("linear and quadratic gradients match closed form") {
  ParameterT<double> w("w", TensorT<double>({2}, {1.0, 2.0}));
  {
    w.zero_grad();
    Tape<double> t;
    Var<double> loss = ops::sum_all(t.param(w));
    t.backward(loss);
    CHECK(w.grad[0] == 1.0);
    CHECK(w.grad[1] == 1.0);
  }
  {
    w.zero_grad();
    Tape<double> t;
    Var<double> x = t.param(w);
    Var<double> loss = ops::sum_all(ops::mul(x, x));
    t.backward(loss);
    CHECK(w.grad[0] == doctest::Approx(2.0).epsilon(1e-8));
    CHECK(w.grad[1] == doctest::Approx(4.0).epsilon(1e-8));
  }
}

TEST_CASE("matmul examples") {
  Tape<double> t;
  Var<double> a = t.constant(TensorT<double>({2, 2}, {1, 2, 3, 4}));
  Var<double> eye = t.constant(TensorT<double>({2, 2}, {1, 0, 0, 1}));
  Var<double> c = ops::matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(c.val()[i] == a.val()[i]);
  Var<double> z = t.constant(TensorT<double>({2, 2}));
  Var<double> c2 = ops::matmul(a, z);
  for (int i = 0; i < 4; ++i) CHECK(c2.val()[i] == 0.0);
  Var<double> bad = t.constant(TensorT<double>({3, 2}));
  CHECK_THROWS_WITH_AS(ops::matmul(a, bad),
                       doctest::Contains("matmul: inner dims"),
                       std::invalid_argument);
}

TEST_CASE("activation values") {
  Tape<double> t;
  Var<double> x = t.constant(TensorT<double>({3}, {0.0, 0.0, -3.2}));
  CHECK(ops::sigmoid(x).val()[0] == doctest::Approx(0.5));
  CHECK(ops::tanh_act(x).val()[1] == doctest::Approx(0.0));
  CHECK(ops::relu(x).val()[2] == 0.0);
}

TEST_CASE("relu subgradient at exactly zero is zero") {
  ParameterT<double> w("w", TensorT<double>({3}, {0.0, -1.0, 2.0}));
  Tape<double> t;
  Var<double> loss = ops::sum_all(ops::relu(t.param(w)));
  w.zero_grad();
  t.backward(loss);
  CHECK(w.grad[0] == 0.0);
  CHECK(w.grad[1] == 0.0);
  CHECK(w.grad[2] == 1.0);
}

TEST_CASE("softmax_rows examples and stability") {
  Tape<double> t;
  Var<double> x = t.constant(
      TensorT<double>({3, 3}, {0, 0, 0, 1000, 0, 0, 1, 2, 3}));
  Var<double> y = ops::softmax_rows(x);
  for (int j = 0; j < 3; ++j) CHECK(y.val().at(0, j) == doctest::Approx(1.0 / 3));
  CHECK(y.val().at(1, 0) == doctest::Approx(1.0));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int j = 0; j < 3; ++j)
    CHECK(y.val().at(2, j) == doctest::Approx(std::exp(1.0 + j) / z).epsilon(1e-12));

  Rng rng(3);
  TensorT<double> big = random_tensor({8, 5}, rng, -1e4, 1e4);
  Tape<double> t2;
  Var<double> yb = ops::softmax_rows(t2.constant(big));
  for (int i = 0; i < 8; ++i) {
    double s = 0;
    for (int j = 0; j < 5; ++j) {
      s += yb.val().at(i, j);
      CHECK(yb.val().at(i, j) >= 0.0);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm examples") {
  Tape<double> t;
  Var<double> gamma = t.constant(TensorT<double>::full({3}, 1.0));
  Var<double> beta = t.constant(TensorT<double>({3}));
  Var<double> c = t.constant(TensorT<double>({1, 3}, {5.0, 5.0, 5.0}));
  Var<double> yc = ops::layer_norm(c, gamma, beta, 1e-5);
  for (int j = 0; j < 3; ++j) CHECK(std::abs(yc.val()[j]) < 1e-9);

  Var<double> g0 = t.constant(TensorT<double>({3}));
  Var<double> b7 = t.constant(TensorT<double>::full({3}, 7.0));
  Var<double> x = t.constant(TensorT<double>({1, 3}, {1.0, 2.0, 3.0}));
  Var<double> yb = ops::layer_norm(x, g0, b7, 1e-5);
  for (int j = 0; j < 3; ++j) CHECK(yb.val()[j] == doctest::Approx(7.0));

  // two-pass oracle for row [1,2,3]
  Var<double> y = ops::layer_norm(x, gamma, beta, 1e-5);
  const double mu = 2.0, var = 2.0 / 3.0;
  for (int j = 0; j < 3; ++j)
    CHECK(y.val()[j] ==
          doctest::Approx((1.0 + j - mu) / std::sqrt(var + 1e-5)).epsilon(1e-12));
}

TEST_CASE("dropout semantics") {
  Rng rng(17);
  TensorT<double> x = random_tensor({100, 10}, rng);
  ParameterT<double> w("w", x);
  {
    Tape<double> t;
    Var<double> v = t.param(w);
    Var<double> y = ops::dropout(v, 0.4, 99, /*train=*/false);
    CHECK(y.id == v.id);  // identity, no node added
    Var<double> y0 = ops::dropout(v, 0.0, 99, /*train=*/true);
    CHECK(y0.id == v.id);
  }
  CHECK_THROWS_AS(
      [&] {
        Tape<double> t;
        ops::dropout(t.param(w), 1.0, 1, true);
      }(),
      std::invalid_argument);
  // statistical: kept fraction and mean preservation
  Tape<double> t;
  TensorT<double> big = TensorT<double>::full({1000, 100}, 1.0);
  Var<double> y = ops::dropout(t.constant(big), 0.5, 1234, true);
  std::int64_t kept = 0;
  double mean = 0;
  for (std::int64_t i = 0; i < y.val().size(); ++i) {
    if (y.val()[i] != 0.0) ++kept;
    mean += y.val()[i];
  }
  mean /= static_cast<double>(y.val().size());
  CHECK(std::abs(static_cast<double>(kept) / static_cast<double>(y.val().size()) - 0.5) <
        0.01);
  CHECK(std::abs(mean - 1.0) < 0.02);
  // same seed, same mask
  Tape<double> t2;
  Var<double> y2 = ops::dropout(t2.constant(big), 0.5, 1234, true);
  for (std::int64_t i = 0; i < 100; ++i) CHECK(y2.val()[i] == y.val()[i]);
}

TEST_CASE("finite difference harness validates its inputs") {
  ParameterT<double> w("w", TensorT<double>({2}, {1.0, 2.0}));
  auto f = [&] { return w.value[0]; };
  Rng rng(1);
  CHECK_THROWS_AS(finite_difference_check(f, f, {&w}, 1e-3, 10, rng),
                  std::invalid_argument);
  auto bad = [&]() -> double { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(finite_difference_check(bad, bad, {&w}, 1e-5, 10, rng),
                  NumericError);
}

TEST_CASE("primitive gradients pass finite-difference checks") {
  Rng rng(2026);
  for (int seed = 0; seed < 20; ++seed) {
    Rng srng(static_cast<std::uint64_t>(seed) + 1);
    const int m = 2 + static_cast<int>(srng.below(4));
    const int k = 2 + static_cast<int>(srng.below(4));
    const int n = 2 + static_cast<int>(srng.below(4));
    ParameterT<double> a("a", random_tensor({m, k}, srng));
    ParameterT<double> b("b", random_tensor({k, n}, srng));
    TensorT<double> wts = random_tensor({m, n}, srng);
    auto rep = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(ops::matmul(vs[0], vs[1]), wts);
        },
        {&a, &b}, rng);
    CHECK(rep.max_err <= kTol);
  }
}

TEST_CASE("elementwise op gradients pass finite-difference checks") {
  Rng rng(31);
  for (int seed = 0; seed < 5; ++seed) {
    Rng srng(100 + static_cast<std::uint64_t>(seed));
    ParameterT<double> a("a", random_tensor({4, 5}, srng));
    ParameterT<double> b("b", random_tensor({4, 5}, srng));
    TensorT<double> wts = random_tensor({4, 5}, srng);

    auto check1 = [&](auto op) {
      auto rep = fd_check(
          [&](Tape<double>& t, std::vector<Var<double>>& vs) {
            return ops::weighted_sum(op(t, vs), wts);
          },
          {&a, &b}, rng);
      CHECK(rep.max_err <= kTol);
    };
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::add(vs[0], vs[1]);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::sub(vs[0], vs[1]);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::mul(vs[0], vs[1]);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::scale(vs[0], 1.7);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::sigmoid(vs[0]);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::tanh_act(vs[0]);
    });
    check1([](Tape<double>&, std::vector<Var<double>>& vs) {
      return ops::softmax_rows(vs[0]);
    });

    TensorT<double> wts2 = random_tensor({20, 2}, srng);
    auto rep = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(
              ops::reshape(ops::concat_cols<double>({vs[0], vs[1]}), {20, 2}), wts2);
        },
        {&a, &b}, rng);
    CHECK(rep.max_err <= kTol);
  }
}

TEST_CASE("kinked op gradients pass away from their kinks") {
  Rng rng(32);
  for (int seed = 0; seed < 5; ++seed) {
    Rng srng(200 + static_cast<std::uint64_t>(seed));
    ParameterT<double> a("a", random_tensor_off_kink({4, 5}, srng));
    TensorT<double> wts = random_tensor({4, 5}, srng);
    auto rep = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(ops::relu(vs[0]), wts);
        },
        {&a}, rng);
    CHECK(rep.max_err <= kTol);
  }
}

TEST_CASE("rowvec, layer_norm and dropout gradients pass finite differences") {
  Rng rng(33);
  for (int seed = 0; seed < 5; ++seed) {
    Rng srng(300 + static_cast<std::uint64_t>(seed));
    ParameterT<double> x("x", random_tensor({4, 6}, srng));
    ParameterT<double> v("v", random_tensor({6}, srng));
    ParameterT<double> g("g", random_tensor({6}, srng, 0.5, 1.5));
    ParameterT<double> b("b", random_tensor({6}, srng));
    TensorT<double> wts = random_tensor({4, 6}, srng);

    auto rep1 = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(ops::add_rowvec(vs[0], vs[1]), wts);
        },
        {&x, &v}, rng);
    CHECK(rep1.max_err <= kTol);

    auto rep2 = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(ops::layer_norm(vs[0], vs[1], vs[2], 1e-5), wts);
        },
        {&x, &g, &b}, rng);
    CHECK(rep2.max_err <= kTol);

    auto rep3 = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(ops::dropout(vs[0], 0.3, 77, true), wts);
        },
        {&x}, rng);
    CHECK(rep3.max_err <= kTol);
  }
}

TEST_CASE("loss op values and gradients") {
  Tape<double> t;
  Var<double> p = t.constant(TensorT<double>({2}, {1.0, -1.0}));
  CHECK(ops::mse_loss(p, TensorT<double>({2})).val()[0] == doctest::Approx(1.0));
  Var<double> p2 = t.constant(TensorT<double>({2}, {0.5, 0.5}));
  CHECK(ops::bce_loss(p2, TensorT<double>({2}, {1.0, 0.0})).val()[0] ==
        doctest::Approx(std::log(2.0)));
  Var<double> p3 = t.constant(TensorT<double>::full({2, 3}, 1.0));
  CHECK(ops::mae_loss(p3, TensorT<double>({2, 3})).val()[0] == doctest::Approx(1.0));
  // direct-evaluation example for bce
  Var<double> p4 = t.constant(TensorT<double>({3}, {0.9, 0.2, 0.6}));
  const double want = -(std::log(0.9) + std::log(0.8) + std::log(0.6)) / 3.0;
  CHECK(ops::bce_loss(p4, TensorT<double>({3}, {1.0, 0.0, 1.0})).val()[0] ==
        doctest::Approx(want).epsilon(1e-12));

  Rng rng(44);
  for (int seed = 0; seed < 5; ++seed) {
    Rng srng(400 + static_cast<std::uint64_t>(seed));
    ParameterT<double> pred("pred", random_tensor({7}, srng, 0.05, 0.95));
    TensorT<double> target_bin({7});
    for (int i = 0; i < 7; ++i) target_bin[i] = srng.uniform() < 0.5 ? 0.0 : 1.0;
    TensorT<double> target_real = random_tensor({7}, srng);

    auto rep_mse = fd_check(
        [&](Tape<double>& tt, std::vector<Var<double>>& vs) {
          return ops::mse_loss(vs[0], target_real);
        },
        {&pred}, rng);
    CHECK(rep_mse.max_err <= kTol);

    auto rep_bce = fd_check(
        [&](Tape<double>& tt, std::vector<Var<double>>& vs) {
          return ops::bce_loss(vs[0], target_bin);
        },
        {&pred}, rng);
    CHECK(rep_bce.max_err <= kTol);

    ParameterT<double> pred2("pred2", random_tensor_off_kink({4, 3}, srng));
    auto rep_mae = fd_check(
        [&](Tape<double>& tt, std::vector<Var<double>>& vs) {
          return ops::mae_loss(vs[0], TensorT<double>({4, 3}));
        },
        {&pred2}, rng);
    CHECK(rep_mae.max_err <= kTol);
  }
}

TEST_CASE("bce gradient is zero where the clamp engages") {
  ParameterT<double> pred("pred", TensorT<double>({2}, {1e-9, 0.5}));
  pred.zero_grad();
  Tape<double> t;
  Var<double> loss = ops::bce_loss(t.param(pred), TensorT<double>({2}, {1.0, 1.0}));
  t.backward(loss);
  CHECK(pred.grad[0] == 0.0);
  CHECK(pred.grad[1] != 0.0);
}

TEST_CASE("attention core gradients pass finite differences") {
  Rng rng(55);
  for (int seed = 0; seed < 5; ++seed) {
    Rng srng(500 + static_cast<std::uint64_t>(seed));
    ClipSpans spans;
    spans.offsets = {0, 3, 7};
    ParameterT<double> q("q", random_tensor({7, 4}, srng));
    ParameterT<double> k("k", random_tensor({7, 4}, srng));
    ParameterT<double> v("v", random_tensor({7, 5}, srng));
    TensorT<double> wts = random_tensor({7, 5}, srng);
    const bool with_drop = seed % 2 == 1;
    auto rep = fd_check(
        [&](Tape<double>& t, std::vector<Var<double>>& vs) {
          return ops::weighted_sum(
              ops::attention_core(vs[0], vs[1], vs[2], spans,
                                  with_drop ? 0.25 : 0.0, 909, with_drop),
              wts);
        },
        {&q, &k, &v}, rng);
    CHECK(rep.max_err <= kTol);
  }
}

TEST_CASE("attention rows mix only within their clip") {
  Rng rng(66);
  TensorT<double> q = random_tensor({6, 3}, rng);
  TensorT<double> k = random_tensor({6, 3}, rng);
  TensorT<double> v = random_tensor({6, 2}, rng);
  ClipSpans spans;
  spans.offsets = {0, 2, 6};
  Tape<double> t;
  Var<double> out = ops::attention_core(t.constant(q), t.constant(k), t.constant(v),
                                        spans, 0.0, 0, false);
  // Perturb clip 2 rows; clip 1 output must be bit-identical.
  TensorT<double> q2 = q;
  for (int i = 2; i < 6; ++i)
    for (int j = 0; j < 3; ++j) q2.at(i, j) += 1.0;
  Tape<double> t2;
  Var<double> out2 = ops::attention_core(t2.constant(q2), t2.constant(k), t2.constant(v),
                                         spans, 0.0, 0, false);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(out.val().at(i, j) == out2.val().at(i, j));
}
