// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <string>
#include <vector>

#include "cmstew/ops.hpp"

namespace cmstew {

inline constexpr double kLayerNormEps = 1e-5;

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), stream derived from the
// parameter name so adding a layer never shifts another layer's draws.
template <typename S>
TensorT<S> init_uniform(std::vector<int> shape, int fan_in, std::uint64_t seed,
                        const std::string& name) {
  TensorT<S> t(std::move(shape));
  Rng rng(mix_seed(seed, fnv1a64(name)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

template <typename S>
struct DenseT {
  ParameterT<S> w, b;

  DenseT() = default;
  DenseT(const std::string& name, int in, int out, std::uint64_t seed)
      : w(name + ".w", init_uniform<S>({in, out}, in, seed, name + ".w")),
        b(name + ".b", TensorT<S>({out})) {}

  Var<S> forward(Tape<S>& t, Var<S> x) {
    return ops::add_rowvec(ops::matmul(x, t.param(w)), t.param(b));
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

// One GRU direction.  Gate layout follows the reset-inside-candidate
// convention: n = tanh(x Wn + bn + r .* (h Un + bun)), h' = (1-z).*n + z.*h.
template <typename S>
struct GruDirT {
  ParameterT<S> wz, wr, wn;    // [in x H]
  ParameterT<S> uz, ur, un;    // [H x H]
  ParameterT<S> bz, br, bun, bn;  // [H]

  GruDirT() = default;
  GruDirT(const std::string& name, int in, int hidden, std::uint64_t seed)
      : wz(name + ".wz", init_uniform<S>({in, hidden}, in, seed, name + ".wz")),
        wr(name + ".wr", init_uniform<S>({in, hidden}, in, seed, name + ".wr")),
        wn(name + ".wn", init_uniform<S>({in, hidden}, in, seed, name + ".wn")),
        uz(name + ".uz", init_uniform<S>({hidden, hidden}, hidden, seed, name + ".uz")),
        ur(name + ".ur", init_uniform<S>({hidden, hidden}, hidden, seed, name + ".ur")),
        un(name + ".un", init_uniform<S>({hidden, hidden}, hidden, seed, name + ".un")),
        bz(name + ".bz", TensorT<S>({hidden})),
        br(name + ".br", TensorT<S>({hidden})),
        bun(name + ".bun", TensorT<S>({hidden})),
        bn(name + ".bn", TensorT<S>({hidden})) {}

  void collect(std::vector<ParameterT<S>*>& out) {
    for (auto* p : {&wz, &wr, &wn, &uz, &ur, &un, &bz, &br, &bun, &bn})
      out.push_back(p);
  }
};

namespace detail {

// out[j] += h . U[:, j]
template <typename S>
void vec_mat_acc(int h_dim, int out_dim, const S* h, const S* u, S* out) {
  for (int i = 0; i < h_dim; ++i) {
    const S hv = h[i];
    const S* urow = u + static_cast<std::int64_t>(i) * out_dim;
    for (int j = 0; j < out_dim; ++j) out[j] += hv * urow[j];
  }
}

// out[i, :] += a[i] * b  (rank-1 accumulate)
template <typename S>
void outer_acc(int rows, int cols, const S* a, const S* b, S* out) {
  for (int i = 0; i < rows; ++i) {
    const S av = a[i];
    S* orow = out + static_cast<std::int64_t>(i) * cols;
    for (int j = 0; j < cols; ++j) orow[j] += av * b[j];
  }
}

template <typename S>
struct GruTrace {
  TensorT<S> z, r, n, c, h;  // [sumT x H], indexed by absolute row
  explicit GruTrace(std::vector<int> shape)
      : z(shape), r(shape), n(shape), c(shape), h(std::move(shape)) {}
};

// Fused single-direction GRU over clip-packed rows.  The whole recurrence
// is one tape node; activations live in the trace shared with backward.
template <typename S>
Var<S> gru_direction(Tape<S>& t, Var<S> x, const ClipSpans& spans,
                     GruDirT<S>& p, bool reverse) {
  const auto& xv = x.val();
  check_arg(xv.rank() == 2, "gru: rank-2 input required");
  check_arg(spans.total() == xv.rows(), "gru: spans do not cover rows");
  for (int c = 0; c < spans.clips(); ++c)
    check_arg(spans.len(c) > 0, cat("gru: empty sequence at clip ", c));
  const int in = xv.cols();
  const int H = p.bz.value.dim(0);
  check_arg(p.wz.value.dim(0) == in,
            cat("gru: input width ", in, " vs weight ", p.wz.value.dim(0)));
  const int rows = xv.rows();

  Var<S> vwz = t.param(p.wz), vwr = t.param(p.wr), vwn = t.param(p.wn);
  Var<S> vuz = t.param(p.uz), vur = t.param(p.ur), vun = t.param(p.un);
  Var<S> vbz = t.param(p.bz), vbr = t.param(p.br), vbun = t.param(p.bun),
         vbn = t.param(p.bn);

  // Input contributions for every row at once.
  TensorT<S> az({rows, H}), ar({rows, H}), an({rows, H});
  kernels::gemm(false, false, rows, H, in, xv.data(), vwz.val().data(), az.data(), false);
  kernels::gemm(false, false, rows, H, in, xv.data(), vwr.val().data(), ar.data(), false);
  kernels::gemm(false, false, rows, H, in, xv.data(), vwn.val().data(), an.data(), false);

  auto trace = std::make_shared<GruTrace<S>>(std::vector<int>{rows, H});
  const S* buz = vuz.val().data();
  const S* bur = vur.val().data();
  const S* bun_w = vun.val().data();
  const S* cbz = vbz.val().data();
  const S* cbr = vbr.val().data();
  const S* cbun = vbun.val().data();
  const S* cbn = vbn.val().data();

  std::vector<S> acc_z(static_cast<std::size_t>(H));
  std::vector<S> acc_r(static_cast<std::size_t>(H));
  std::vector<S> acc_c(static_cast<std::size_t>(H));
  for (int cidx = 0; cidx < spans.clips(); ++cidx) {
    const std::int64_t b = spans.begin(cidx), e = spans.end(cidx);
    const S* h_prev = nullptr;  // null means zero state
    for (std::int64_t step = 0; step < e - b; ++step) {
      const std::int64_t row = reverse ? e - 1 - step : b + step;
      S* zr = trace->z.data() + row * H;
      S* rr = trace->r.data() + row * H;
      S* nr = trace->n.data() + row * H;
      S* cr = trace->c.data() + row * H;
      S* hr = trace->h.data() + row * H;
      for (int j = 0; j < H; ++j) {
        acc_z[static_cast<std::size_t>(j)] = az[row * H + j] + cbz[j];
        acc_r[static_cast<std::size_t>(j)] = ar[row * H + j] + cbr[j];
        acc_c[static_cast<std::size_t>(j)] = cbun[j];
      }
      if (h_prev) {
        vec_mat_acc(H, H, h_prev, buz, acc_z.data());
        vec_mat_acc(H, H, h_prev, bur, acc_r.data());
        vec_mat_acc(H, H, h_prev, bun_w, acc_c.data());
      }
      for (int j = 0; j < H; ++j) {
        const S z = S(1) / (S(1) + std::exp(-acc_z[static_cast<std::size_t>(j)]));
        const S r = S(1) / (S(1) + std::exp(-acc_r[static_cast<std::size_t>(j)]));
        const S c = acc_c[static_cast<std::size_t>(j)];
        const S n = std::tanh(an[row * H + j] + cbn[j] + r * c);
        const S hp = h_prev ? h_prev[j] : S(0);
        zr[j] = z;
        rr[j] = r;
        cr[j] = c;
        nr[j] = n;
        hr[j] = (S(1) - z) * n + z * hp;
      }
      h_prev = hr;
    }
  }

  TensorT<S> out = trace->h;
  const bool ng = t.needs_grad(x.id) || t.needs_grad(vwz.id);
  Var<S> o = t.push(std::move(out), ng, nullptr);
  if (!ng) return o;

  t.set_backprop(o.id, [&t, xi = x.id, oi = o.id, trace, spans, reverse, in, H,
                        wzi = vwz.id, wri = vwr.id, wni = vwn.id, uzi = vuz.id,
                        uri = vur.id, uni = vun.id, bzi = vbz.id, bri = vbr.id,
                        buni = vbun.id, bni = vbn.id] {
    const auto& g = t.grad(oi);
    const auto& xv2 = t.value(xi);
    const bool need_x = t.needs_grad(xi);
    const bool need_w = t.needs_grad(wzi);
    const S* Wz = t.value(wzi).data();
    const S* Wr = t.value(wri).data();
    const S* Wn = t.value(wni).data();
    const S* Uz = t.value(uzi).data();
    const S* Ur = t.value(uri).data();
    const S* Un = t.value(uni).data();

    std::vector<S> gh(static_cast<std::size_t>(H));
    std::vector<S> gh_next(static_cast<std::size_t>(H));
    std::vector<S> dz(static_cast<std::size_t>(H)), dn(static_cast<std::size_t>(H)),
        dr(static_cast<std::size_t>(H)), dc(static_cast<std::size_t>(H)),
        daz(static_cast<std::size_t>(H)), dar(static_cast<std::size_t>(H)),
        dan(static_cast<std::size_t>(H));

    for (int cidx = 0; cidx < spans.clips(); ++cidx) {
      const std::int64_t b = spans.begin(cidx), e = spans.end(cidx);
      std::fill(gh.begin(), gh.end(), S(0));
      // Reverse of the processing order used in forward.
      for (std::int64_t step = e - b; step-- > 0;) {
        const std::int64_t row = reverse ? e - 1 - step : b + step;
        const std::int64_t prev_row = reverse ? row + 1 : row - 1;
        const bool has_prev = reverse ? (prev_row <= e - 1 && step > 0)
                                      : (prev_row >= b && step > 0);
        const S* hp = has_prev ? trace->h.data() + prev_row * H : nullptr;
        const S* zr = trace->z.data() + row * H;
        const S* rr = trace->r.data() + row * H;
        const S* nr = trace->n.data() + row * H;
        const S* cr = trace->c.data() + row * H;
        for (int j = 0; j < H; ++j) {
          const S gj = g[row * H + j] + gh[static_cast<std::size_t>(j)];
          const S hpj = hp ? hp[j] : S(0);
          dz[static_cast<std::size_t>(j)] = gj * (hpj - nr[j]);
          dn[static_cast<std::size_t>(j)] = gj * (S(1) - zr[j]);
          gh_next[static_cast<std::size_t>(j)] = gj * zr[j];
          dan[static_cast<std::size_t>(j)] =
              dn[static_cast<std::size_t>(j)] * (S(1) - nr[j] * nr[j]);
          dc[static_cast<std::size_t>(j)] = dan[static_cast<std::size_t>(j)] * rr[j];
          dr[static_cast<std::size_t>(j)] = dan[static_cast<std::size_t>(j)] * cr[j];
          dar[static_cast<std::size_t>(j)] =
              dr[static_cast<std::size_t>(j)] * rr[j] * (S(1) - rr[j]);
          daz[static_cast<std::size_t>(j)] =
              dz[static_cast<std::size_t>(j)] * zr[j] * (S(1) - zr[j]);
        }
        const S* xrow = xv2.data() + row * in;
        if (need_w) {
          outer_acc(in, H, xrow, dan.data(), t.grad(wni).data());
          outer_acc(in, H, xrow, dar.data(), t.grad(wri).data());
          outer_acc(in, H, xrow, daz.data(), t.grad(wzi).data());
          for (int j = 0; j < H; ++j) {
            t.grad(bni)[j] += dan[static_cast<std::size_t>(j)];
            t.grad(buni)[j] += dc[static_cast<std::size_t>(j)];
            t.grad(bri)[j] += dar[static_cast<std::size_t>(j)];
            t.grad(bzi)[j] += daz[static_cast<std::size_t>(j)];
          }
          if (hp) {
            outer_acc(H, H, hp, dc.data(), t.grad(uni).data());
            outer_acc(H, H, hp, dar.data(), t.grad(uri).data());
            outer_acc(H, H, hp, daz.data(), t.grad(uzi).data());
          }
        }
        if (need_x) {
          S* dxrow = t.grad(xi).data() + row * in;
          // dx += dan Wn^T + dar Wr^T + daz Wz^T
          for (int i = 0; i < in; ++i) {
            S s = S(0);
            const S* wnr = Wn + static_cast<std::int64_t>(i) * H;
            const S* wrr = Wr + static_cast<std::int64_t>(i) * H;
            const S* wzr = Wz + static_cast<std::int64_t>(i) * H;
            for (int j = 0; j < H; ++j) {
              s += dan[static_cast<std::size_t>(j)] * wnr[j] +
                   dar[static_cast<std::size_t>(j)] * wrr[j] +
                   daz[static_cast<std::size_t>(j)] * wzr[j];
            }
            dxrow[i] += s;
          }
        }
        // carry into h_{t-1}: gh = gh_next + dc Un^T + dar Ur^T + daz Uz^T
        for (int i = 0; i < H; ++i) {
          S s = gh_next[static_cast<std::size_t>(i)];
          const S* unr = Un + static_cast<std::int64_t>(i) * H;
          const S* urr = Ur + static_cast<std::int64_t>(i) * H;
          const S* uzr = Uz + static_cast<std::int64_t>(i) * H;
          for (int j = 0; j < H; ++j) {
            s += dc[static_cast<std::size_t>(j)] * unr[j] +
                 dar[static_cast<std::size_t>(j)] * urr[j] +
                 daz[static_cast<std::size_t>(j)] * uzr[j];
          }
          gh[static_cast<std::size_t>(i)] = s;
        }
      }
    }
  });
  return o;
}

}  // namespace detail

// Stacked bidirectional GRU; each layer feeds the next with the
// concatenated forward/backward states, output width 2*hidden.
// Dropout sits between layers only, so single-layer stacks never draw masks.
template <typename S>
struct BiGruT {
  int hidden = 0;
  std::string name_;
  std::vector<std::array<GruDirT<S>, 2>> layers;

  BiGruT() = default;
  BiGruT(const std::string& name, int input_dim, int hidden_dim, int num_layers,
         std::uint64_t seed)
      : hidden(hidden_dim), name_(name) {
    check_arg(num_layers >= 1, "bigru: need at least one layer");
    int in = input_dim;
    for (int l = 0; l < num_layers; ++l) {
      layers.push_back({GruDirT<S>(cat(name, ".l", l, ".fw"), in, hidden_dim, seed),
                        GruDirT<S>(cat(name, ".l", l, ".bw"), in, hidden_dim, seed)});
      in = 2 * hidden_dim;
    }
  }

  Var<S> forward(Tape<S>& t, Var<S> x, const ClipSpans& spans,
                 double dropout_rate = 0.0, std::uint64_t drop_seed = 0,
                 bool train = false) {
    Var<S> cur = x;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (l > 0) {
        cur = ops::dropout(cur, dropout_rate,
                           mix_seed(drop_seed, fnv1a64(cat(name_, ".drop", l))), train);
      }
      Var<S> fw = detail::gru_direction(t, cur, spans, layers[l][0], false);
      Var<S> bw = detail::gru_direction(t, cur, spans, layers[l][1], true);
      cur = ops::concat_cols<S>({fw, bw});
    }
    return cur;
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    for (auto& layer : layers) {
      layer[0].collect(out);
      layer[1].collect(out);
    }
  }
};

// Sinusoidal position table for one sequence of length len.
template <typename S>
TensorT<S> sinusoidal_positions(int len, int d) {
  if (d % 2 != 0) throw ConfigError(cat("positions: dimension must be even, got ", d));
  check_arg(len >= 0, "positions: negative length");
  TensorT<S> pe({len, d});
  for (int pos = 0; pos < len; ++pos) {
    for (int j = 0; j < d; ++j) {
      const double freq = std::pow(10000.0, -2.0 * (j / 2) / static_cast<double>(d));
      const double v = (j % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
      pe[static_cast<std::int64_t>(pos) * d + j] = static_cast<S>(v);
    }
  }
  return pe;
}

// Clip-local variant; position resets at clip starts.
template <typename S>
TensorT<S> sinusoidal_positions(const ClipSpans& spans, int d) {
  if (d % 2 != 0) throw ConfigError(cat("positions: dimension must be even, got ", d));
  std::int64_t max_len = 0;
  for (int c = 0; c < spans.clips(); ++c) max_len = std::max(max_len, spans.len(c));
  TensorT<S> base = sinusoidal_positions<S>(static_cast<int>(max_len), d);
  TensorT<S> pe({static_cast<int>(spans.total()), d});
  for (int c = 0; c < spans.clips(); ++c) {
    for (std::int64_t row = spans.begin(c); row < spans.end(c); ++row) {
      const std::int64_t pos = row - spans.begin(c);
      for (int j = 0; j < d; ++j) pe[row * d + j] = base[pos * d + j];
    }
  }
  return pe;
}

// Projections carry no biases; dropout hits the attention weights only.
template <typename S>
struct MhaT {
  int heads = 0, dk = 0;
  std::vector<ParameterT<S>> wq, wk, wv;
  ParameterT<S> wo;

  MhaT() = default;
  MhaT(const std::string& name, int model_dim, int num_heads, std::uint64_t seed)
      : heads(num_heads), dk(model_dim / num_heads) {
    check_arg(model_dim % num_heads == 0,
              cat("attention: model dim ", model_dim, " not divisible by ", num_heads));
    for (int h = 0; h < num_heads; ++h) {
      wq.emplace_back(cat(name, ".h", h, ".wq"),
                      init_uniform<S>({model_dim, dk}, model_dim, seed, cat(name, ".h", h, ".wq")));
      wk.emplace_back(cat(name, ".h", h, ".wk"),
                      init_uniform<S>({model_dim, dk}, model_dim, seed, cat(name, ".h", h, ".wk")));
      wv.emplace_back(cat(name, ".h", h, ".wv"),
                      init_uniform<S>({model_dim, dk}, model_dim, seed, cat(name, ".h", h, ".wv")));
    }
    wo = ParameterT<S>(name + ".wo",
                       init_uniform<S>({num_heads * dk, model_dim}, num_heads * dk,
                                       seed, name + ".wo"));
  }

  Var<S> forward(Tape<S>& t, Var<S> x, const ClipSpans& spans, double attn_dropout,
                 std::uint64_t drop_seed, bool train) {
    std::vector<Var<S>> head_out;
    for (int h = 0; h < heads; ++h) {
      Var<S> q = ops::matmul(x, t.param(wq[static_cast<std::size_t>(h)]));
      Var<S> k = ops::matmul(x, t.param(wk[static_cast<std::size_t>(h)]));
      Var<S> v = ops::matmul(x, t.param(wv[static_cast<std::size_t>(h)]));
      head_out.push_back(ops::attention_core(q, k, v, spans, attn_dropout,
                                             mix_seed(drop_seed, static_cast<std::uint64_t>(h)),
                                             train));
    }
    return ops::matmul(ops::concat_cols(head_out), t.param(wo));
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    for (auto& p : wq) out.push_back(&p);
    for (auto& p : wk) out.push_back(&p);
    for (auto& p : wv) out.push_back(&p);
    out.push_back(&wo);
  }
};

// Post-norm encoder block: norm(x + drop(attn)), then norm(x + drop(ffn)).
template <typename S>
struct TransformerLayerT {
  MhaT<S> mha;
  DenseT<S> ffn1, ffn2;
  ParameterT<S> gain1, shift1, gain2, shift2;

  TransformerLayerT() = default;
  TransformerLayerT(const std::string& name, int model_dim, int num_heads,
                    int ffn_hidden, std::uint64_t seed)
      : mha(name + ".mha", model_dim, num_heads, seed),
        ffn1(name + ".ffn1", model_dim, ffn_hidden, seed),
        ffn2(name + ".ffn2", ffn_hidden, model_dim, seed),
        gain1(name + ".norm1.gain", TensorT<S>::full({model_dim}, S(1))),
        shift1(name + ".norm1.shift", TensorT<S>({model_dim})),
        gain2(name + ".norm2.gain", TensorT<S>::full({model_dim}, S(1))),
        shift2(name + ".norm2.shift", TensorT<S>({model_dim})) {}

  Var<S> forward(Tape<S>& t, Var<S> x, const ClipSpans& spans, double dropout_rate,
                 std::uint64_t drop_seed, bool train) {
    Var<S> a = mha.forward(t, x, spans, dropout_rate, mix_seed(drop_seed, 1), train);
    a = ops::dropout(a, dropout_rate, mix_seed(drop_seed, 2), train);
    Var<S> x1 = ops::layer_norm(ops::add(x, a), t.param(gain1), t.param(shift1),
                                S(kLayerNormEps));
    Var<S> f = ffn2.forward(t, ops::relu(ffn1.forward(t, x1)));
    f = ops::dropout(f, dropout_rate, mix_seed(drop_seed, 3), train);
    return ops::layer_norm(ops::add(x1, f), t.param(gain2), t.param(shift2),
                           S(kLayerNormEps));
  }

  void collect(std::vector<ParameterT<S>*>& out) {
    mha.collect(out);
    ffn1.collect(out);
    ffn2.collect(out);
    out.push_back(&gain1);
    out.push_back(&shift1);
    out.push_back(&gain2);
    out.push_back(&shift2);
  }
};

}  // namespace cmstew
