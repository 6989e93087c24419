// Copyright 2026 cmstew authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "cmstew/common.hpp"

namespace cmstew {

// Dense row-major tensor.  Rank is dynamic but in practice everything in
// this codebase is rank 1 or 2; clips are stacked along rows and tracked
// by external span offsets rather than a batch axis.
template <typename S>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), S(0));
  }

  TensorT(std::vector<int> shape, std::vector<S> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    check_arg(static_cast<std::int64_t>(data_.size()) == count(shape_),
              cat("tensor: ", data_.size(), " values for shape of ",
                  count(shape_), " elements"));
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

  static TensorT full(std::vector<int> shape, S v) {
    TensorT t(std::move(shape));
    t.fill(v);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  // Rows/cols of a rank-2 tensor; rank-1 tensors are treated as one row.
  int rows() const { return rank() == 2 ? shape_[0] : 1; }
  int cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  S& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool finite() const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename T>
  TensorT<T> cast() const {
    std::vector<T> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return TensorT<T>(shape_, std::move(out));
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      check_arg(d >= 0, cat("tensor: negative extent ", d));
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Named trainable (or frozen) tensor plus its gradient accumulator.
template <typename S>
struct ParameterT {
  std::string name;
  TensorT<S> value;
  TensorT<S> grad;
  bool trainable = true;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<S> v)
      : name(std::move(n)), value(std::move(v)), grad(TensorT<S>(value.shape())) {}

  void zero_grad() { grad.fill(S(0)); }
};

using Parameter = ParameterT<float>;

// Row ranges of clips stacked into one matrix: clip c covers rows
// [offsets[c], offsets[c+1]).
struct ClipSpans {
  std::vector<std::int64_t> offsets;  // size = clips + 1, offsets[0] == 0

  int clips() const { return static_cast<int>(offsets.size()) - 1; }
  std::int64_t begin(int c) const { return offsets[static_cast<std::size_t>(c)]; }
  std::int64_t end(int c) const { return offsets[static_cast<std::size_t>(c) + 1]; }
  std::int64_t len(int c) const { return end(c) - begin(c); }
  std::int64_t total() const { return offsets.back(); }

  static ClipSpans uniform(int clips, std::int64_t len) {
    ClipSpans s;
    s.offsets.resize(static_cast<std::size_t>(clips) + 1);
    for (int c = 0; c <= clips; ++c) s.offsets[static_cast<std::size_t>(c)] = c * len;
    return s;
  }
};

}  // namespace cmstew
