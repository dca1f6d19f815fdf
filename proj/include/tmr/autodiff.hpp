// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode differentiation over dense matrices.
//
// A Tape records every operation of one forward pass. Values are rank-2
// (row-major) matrices; sequences of different lengths are stacked along
// rows and described by a segment-length list where an op needs it.

#pragma once

#include "tmr/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tmr::ad {

struct Parameter {
  std::string id;
  Matrix value;
  Matrix grad;
};

/// Ordered, name-unique collection of trainable parameters.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string id, Matrix init);
  Parameter& get(std::string_view id);
  const Parameter& get(std::string_view id) const;
  bool contains(std::string_view id) const;

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int index) : tape_(tape), index_(index) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;

  Tape* tape() const { return tape_; }
  int index() const { return index_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int index_ = -1;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  /// With record=false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  Var scalar(double v);
  /// Leaf bound to a parameter; backward() accumulates into p.grad.
  Var param(Parameter& p);

  /// Populates grad of every node and accumulates into bound parameters.
  void backward(Var loss);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  const Matrix& value(int i) const { return nodes_[i].value; }
  const Matrix& grad(int i) const { return nodes_[i].grad; }
  bool needs_grad(int i) const { return nodes_[i].needs_grad; }

  /// Adds delta into the gradient of node i if it takes part in backward.
  /// The first contribution is assigned, so buffers are never zero-filled
  /// just to be added to.
  template <typename Expr>
  void accumulate(int i, const Expr& delta) {
    Node& n = nodes_[i];
    if (!n.needs_grad) return;
    if (n.grad_ready) {
      n.grad += delta;
    } else {
      n.grad = delta;
      n.grad_ready = true;
    }
  }
  /// Gradient buffer of node i for in-place accumulation, zeroed on first use.
  Matrix& grad_ref(int i) {
    Node& n = nodes_[i];
    if (!n.grad_ready) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.grad_ready = true;
    }
    return n.grad;
  }

  /// Creates an op output node. `parents` decide whether a gradient flows.
  Var push(Matrix value, std::initializer_list<int> parents, BackwardFn fn);
  Var push(Matrix value, std::span<const int> parents, BackwardFn fn);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
    bool grad_ready = false;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool record_;
  bool backward_done_ = false;
};

// ---- forward ops -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);

/// a [n×c] + b [1×c] broadcast over rows.
Var add_row(Var a, Var b);
/// a [n×c] ⊙ b [1×c] broadcast over rows.
Var mul_row(Var a, Var b);
/// x W + b with W [in×out], b [1×out].
Var linear(Var x, Var w, Var b);

Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var square(Var a);

Var sum(Var a);
Var mean(Var a);
/// Sum of entries where mask is nonzero (mask has a's shape).
Var masked_sum(Var a, const Matrix& mask);
/// Mean over entries where mask is nonzero; zero when the mask is empty.
Var masked_mean(Var a, const Matrix& mask);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
/// Rows of `a` picked by index (repeats allowed); backward scatter-adds.
Var gather_rows(Var a, std::span<const int> indices);
/// Row i of `a` repeated counts[i] times, stacked in order.
Var repeat_rows(Var a, std::span<const int> counts);

/// Row softmax with max subtraction.
Var softmax_rows(Var a);
/// Row log-softmax over entries with keep != 0; dropped entries yield 0 and
/// receive no gradient. Every row must keep at least one entry.
Var log_softmax_rows(Var a, const Matrix& keep);
/// Row log-softmax without a mask.
Var log_softmax_rows(Var a);

/// Per-row standardization followed by gain/bias ([1×c] each).
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Each row divided by max(‖row‖₂, eps).
Var normalize_rows(Var a, double eps = 1e-8);
/// Mean over entries of the Huber-style smooth L1 of (a − b).
Var smooth_l1(Var a, Var b, double beta = 1.0);

/// Multi-head self-attention over stacked sequences. `qkv` is [n×3w] holding
/// query, key and value blocks side by side; `lengths` partitions the n rows
/// into independent sequences. Returns the [n×w] attended values.
Var segment_attention(Var qkv, std::span<const int> lengths, int heads);

/// Bidirectional hinge ranking loss on a square similarity matrix S. For every
/// kept off-diagonal (i, j) it adds max(0, m − S_ii + S_ij) (row query i) and
/// max(0, m − S_ii + S_ji) (column query i), then averages over all terms.
/// Zero when no negative is kept.
Var margin_ranking(Var s, const Matrix& keep, double margin);

// ---- gradient checking -----------------------------------------------------

/// Max over every parameter coordinate of |a − f| / max(1, |a|, |f|) between
/// the analytic gradient and a central finite difference with the given step.
/// Throws Error when f(θ) is not finite.
double grad_check(ParameterStore& params, const std::function<Var(Tape&)>& f,
                  double step = 1e-5);

}  // namespace tmr::ad
