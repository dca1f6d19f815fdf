// Copyright (c) 2026 The TMR-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "tmr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tmr::ad {

// ---- ParameterStore --------------------------------------------------------

ParameterStore::ParameterStore(const ParameterStore& other) { *this = other; }

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) {
    params_.push_back(std::make_unique<Parameter>(*p));
    index_.emplace(p->id, params_.size() - 1);
  }
  return *this;
}

Parameter& ParameterStore::add(std::string id, Matrix init) {
  if (index_.count(id)) throw Error("duplicate parameter id '" + id + "'");
  auto p = std::make_unique<Parameter>();
  p->id = id;
  p->grad = Matrix::Zero(init.rows(), init.cols());
  p->value = std::move(init);
  params_.push_back(std::move(p));
  index_.emplace(std::move(id), params_.size() - 1);
  return *params_.back();
}

Parameter& ParameterStore::get(std::string_view id) {
  auto it = index_.find(std::string(id));
  if (it == index_.end()) throw Error("unknown parameter '" + std::string(id) + "'");
  return *params_[it->second];
}

const Parameter& ParameterStore::get(std::string_view id) const {
  return const_cast<ParameterStore*>(this)->get(id);
}

bool ParameterStore::contains(std::string_view id) const {
  return index_.count(std::string(id)) > 0;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero(p->value.rows(), p->value.cols());
}

bool ParameterStore::all_finite() const {
  return std::all_of(params_.begin(), params_.end(),
                     [](const auto& p) { return p->value.allFinite(); });
}

// ---- Var / Tape --------------------------------------------------------------

const Matrix& Var::value() const { return tape_->value(index_); }
const Matrix& Var::grad() const { return tape_->grad(index_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar() on non-scalar node " + shape_str(v));
  return v(0, 0);
}

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, &p, record_});
  int id = static_cast<int>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, std::initializer_list<int> parents, BackwardFn fn) {
  return push(std::move(value), std::span<const int>(parents.begin(), parents.size()),
              std::move(fn));
}

Var Tape::push(Matrix value, std::span<const int> parents, BackwardFn fn) {
  bool needs = false;
  if (record_) {
    for (int p : parents) needs = needs || nodes_[p].needs_grad;
  }
  Node n{std::move(value), {}, {}, nullptr, needs};
  if (needs) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (!record_) throw Error("backward on a non-recording tape");
  if (backward_done_) throw Error("backward called twice on one tape");
  const Matrix& lv = nodes_[loss.index()].value;
  if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(lv));
  backward_done_ = true;

  nodes_[loss.index()].grad = Matrix::Ones(1, 1);
  nodes_[loss.index()].grad_ready = true;
  // A node no gradient reached contributes nothing, so its closure is skipped.
  for (int i = loss.index(); i >= 0; --i) {
    if (nodes_[i].backward && nodes_[i].grad_ready) nodes_[i].backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (!n.grad_ready) {
      n.grad.setZero(n.value.rows(), n.value.cols());
      n.grad_ready = true;
      continue;
    }
    if (n.param != nullptr) n.param->grad += n.grad;
  }
}

// ---- helpers -------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.valid()) throw Error("operation on an empty Var");
  return *a.tape();
}

Tape& tape_of(Var a, Var b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw ShapeError("operands live on different tapes");
  return t;
}

void require_same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.value()) + " vs " +
                     shape_str(b.value()));
  }
}

void require_mask(const char* op, Var a, const Matrix& mask) {
  if (mask.rows() != a.rows() || mask.cols() != a.cols()) {
    throw ShapeError(std::string(op) + ": mask " + shape_str(mask) + " does not match " +
                     shape_str(a.value()));
  }
}

Var unary(Var a, Matrix value, std::function<Matrix(const Matrix& x, const Matrix& y,
                                                    const Matrix& g)> dfn) {
  Tape& t = tape_of(a);
  int ai = a.index();
  return t.push(std::move(value), {ai}, [ai, dfn = std::move(dfn)](Tape& t, int self) {
    t.accumulate(ai, dfn(t.value(ai), t.value(self), t.grad(self)));
  });
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("add", a, b);
  int ai = a.index(), bi = b.index();
  return t.push(a.value() + b.value(), {ai, bi}, [ai, bi](Tape& t, int self) {
    t.accumulate(ai, t.grad(self));
    t.accumulate(bi, t.grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("sub", a, b);
  int ai = a.index(), bi = b.index();
  return t.push(a.value() - b.value(), {ai, bi}, [ai, bi](Tape& t, int self) {
    t.accumulate(ai, t.grad(self));
    t.accumulate(bi, -t.grad(self));
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape("mul", a, b);
  int ai = a.index(), bi = b.index();
  return t.push(a.value().cwiseProduct(b.value()), {ai, bi}, [ai, bi](Tape& t, int self) {
    t.accumulate(ai, t.grad(self).cwiseProduct(t.value(bi)));
    t.accumulate(bi, t.grad(self).cwiseProduct(t.value(ai)));
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a);
  int ai = a.index();
  return t.push(a.value() * s, {ai}, [ai, s](Tape& t, int self) {
    t.accumulate(ai, t.grad(self) * s);
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = tape_of(a);
  int ai = a.index();
  Matrix v = a.value().array() + s;
  return t.push(std::move(v), {ai}, [ai](Tape& t, int self) { t.accumulate(ai, t.grad(self)); });
}

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.value()) + " x " +
                     shape_str(b.value()));
  }
  int ai = a.index(), bi = b.index();
  Matrix v = a.value() * b.value();
  return t.push(std::move(v), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ai)) t.grad_ref(ai).noalias() += g * t.value(bi).transpose();
    if (t.needs_grad(bi)) t.grad_ref(bi).noalias() += t.value(ai).transpose() * g;
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  int ai = a.index();
  Matrix v = a.value().transpose();
  return t.push(std::move(v), {ai}, [ai](Tape& t, int self) {
    t.accumulate(ai, t.grad(self).transpose());
  });
}

Var add_row(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("add_row: expected [1x" + std::to_string(a.cols()) + "] got " +
                     shape_str(b.value()));
  }
  int ai = a.index(), bi = b.index();
  Matrix v = a.value().rowwise() + b.value().row(0);
  return t.push(std::move(v), {ai, bi}, [ai, bi](Tape& t, int self) {
    t.accumulate(ai, t.grad(self));
    if (t.needs_grad(bi)) t.grad_ref(bi) += t.grad(self).colwise().sum();
  });
}

Var mul_row(Var a, Var b) {
  Tape& t = tape_of(a, b);
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw ShapeError("mul_row: expected [1x" + std::to_string(a.cols()) + "] got " +
                     shape_str(b.value()));
  }
  int ai = a.index(), bi = b.index();
  Matrix v = a.value().array().rowwise() * b.value().row(0).array();
  return t.push(std::move(v), {ai, bi}, [ai, bi](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ai)) {
      t.grad_ref(ai).array() += g.array().rowwise() * t.value(bi).row(0).array();
    }
    if (t.needs_grad(bi)) {
      t.grad_ref(bi) += g.cwiseProduct(t.value(ai)).colwise().sum();
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = tape_of(x, w);
  if (&t != b.tape()) throw ShapeError("linear: operands on different tapes");
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ShapeError("linear: " + shape_str(x.value()) + " x " + shape_str(w.value()) + " + " +
                     shape_str(b.value()));
  }
  int xi = x.index(), wi = w.index(), bi = b.index();
  Matrix v = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return t.push(std::move(v), {xi, wi, bi}, [xi, wi, bi](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(xi)) t.grad_ref(xi).noalias() += g * t.value(wi).transpose();
    if (t.needs_grad(wi)) t.grad_ref(wi).noalias() += t.value(xi).transpose() * g;
    if (t.needs_grad(bi)) t.grad_ref(bi) += g.colwise().sum();
  });
}

Var exp(Var a) {
  Matrix v = a.value().array().exp();
  return unary(a, std::move(v), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return g.cwiseProduct(y);
  });
}

Var log(Var a) {
  Matrix v = a.value().array().log();
  return unary(a, std::move(v), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return g.cwiseQuotient(x);
  });
}

Var tanh(Var a) {
  Matrix v = a.value().array().tanh();
  return unary(a, std::move(v), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    return g.array() * (1.0 - y.array().square());
  });
}

Var relu(Var a) {
  Matrix v = a.value().cwiseMax(0.0);
  return unary(a, std::move(v), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return (x.array() > 0.0).select(g, 0.0);
  });
}

Var square(Var a) {
  Matrix v = a.value().array().square();
  return unary(a, std::move(v), [](const Matrix& x, const Matrix&, const Matrix& g) -> Matrix {
    return 2.0 * g.cwiseProduct(x);
  });
}

// ---- reductions ----------------------------------------------------------------

Var sum(Var a) {
  Tape& t = tape_of(a);
  int ai = a.index();
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return t.push(std::move(v), {ai}, [ai](Tape& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai).array() += t.grad(self)(0, 0);
  });
}

Var mean(Var a) {
  if (a.value().size() == 0) throw ShapeError("mean of an empty node");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var masked_sum(Var a, const Matrix& mask) {
  require_mask("masked_sum", a, mask);
  Tape& t = tape_of(a);
  int ai = a.index();
  Matrix keep = (mask.array() != 0.0).cast<double>();
  Matrix v(1, 1);
  v(0, 0) = a.value().cwiseProduct(keep).sum();
  return t.push(std::move(v), {ai}, [ai, keep = std::move(keep)](Tape& t, int self) {
    t.accumulate(ai, keep * t.grad(self)(0, 0));
  });
}

Var masked_mean(Var a, const Matrix& mask) {
  require_mask("masked_mean", a, mask);
  double n = (mask.array() != 0.0).count();
  Var s = masked_sum(a, mask);
  return n > 0 ? scale(s, 1.0 / n) : scale(s, 0.0);
}

// ---- structural ----------------------------------------------------------------

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no operands");
  Tape& t = tape_of(parts[0]);
  Eigen::Index cols = parts[0].cols(), rows = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offs;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ShapeError("concat_rows: operands on different tapes");
    if (p.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    ids.push_back(p.index());
    offs.push_back(rows);
    rows += p.rows();
  }
  Matrix v(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) v.middleRows(offs[k], parts[k].rows()) = parts[k].value();
  std::vector<int> pids = ids;
  return t.push(std::move(v), std::span<const int>(pids),
                [ids = std::move(ids), offs = std::move(offs)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    auto r = t.value(ids[k]).rows();
                    t.accumulate(ids[k], g.middleRows(offs[k], r));
                  }
                });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  Tape& t = tape_of(parts[0]);
  Eigen::Index rows = parts[0].rows(), cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offs;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ShapeError("concat_cols: operands on different tapes");
    if (p.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    ids.push_back(p.index());
    offs.push_back(cols);
    cols += p.cols();
  }
  Matrix v(rows, cols);
  for (std::size_t k = 0; k < parts.size(); ++k) v.middleCols(offs[k], parts[k].cols()) = parts[k].value();
  std::vector<int> pids = ids;
  return t.push(std::move(v), std::span<const int>(pids),
                [ids = std::move(ids), offs = std::move(offs)](Tape& t, int self) {
                  const Matrix& g = t.grad(self);
                  for (std::size_t k = 0; k < ids.size(); ++k) {
                    auto c = t.value(ids[k]).cols();
                    t.accumulate(ids[k], g.middleCols(offs[k], c));
                  }
                });
}

Var slice_rows(Var a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (begin < 0 || count < 0 || begin + count > a.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_str(a.value()));
  }
  int ai = a.index();
  Matrix v = a.value().middleRows(begin, count);
  return t.push(std::move(v), {ai}, [ai, begin, count](Tape& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai).middleRows(begin, count) += t.grad(self);
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  Tape& t = tape_of(a);
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + shape_str(a.value()));
  }
  int ai = a.index();
  Matrix v = a.value().middleCols(begin, count);
  return t.push(std::move(v), {ai}, [ai, begin, count](Tape& t, int self) {
    if (t.needs_grad(ai)) t.grad_ref(ai).middleCols(begin, count) += t.grad(self);
  });
}

Var gather_rows(Var a, std::span<const int> indices) {
  Tape& t = tape_of(a);
  const Matrix& src = a.value();
  Matrix v(static_cast<Eigen::Index>(indices.size()), src.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] < 0 || indices[r] >= src.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(indices[r]) + " outside " +
                       shape_str(src));
    }
    v.row(static_cast<Eigen::Index>(r)) = src.row(indices[r]);
  }
  int ai = a.index();
  std::vector<int> idx(indices.begin(), indices.end());
  return t.push(std::move(v), {ai}, [ai, idx = std::move(idx)](Tape& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_ref(ai);
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

Var repeat_rows(Var a, std::span<const int> counts) {
  Tape& t = tape_of(a);
  if (static_cast<Eigen::Index>(counts.size()) != a.rows()) {
    throw ShapeError("repeat_rows: " + std::to_string(counts.size()) + " counts for " +
                     shape_str(a.value()));
  }
  Eigen::Index total = 0;
  for (int c : counts) {
    if (c < 0) throw ShapeError("repeat_rows: negative count");
    total += c;
  }
  Matrix v(total, a.cols());
  Eigen::Index r = 0;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    for (int k = 0; k < counts[i]; ++k) v.row(r++) = a.value().row(static_cast<Eigen::Index>(i));
  }
  int ai = a.index();
  std::vector<int> cnt(counts.begin(), counts.end());
  return t.push(std::move(v), {ai}, [ai, cnt = std::move(cnt)](Tape& t, int self) {
    if (!t.needs_grad(ai)) return;
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad_ref(ai);
    Eigen::Index r = 0;
    for (std::size_t i = 0; i < cnt.size(); ++i) {
      if (cnt[i] > 0) ga.row(static_cast<Eigen::Index>(i)) += g.middleRows(r, cnt[i]).colwise().sum();
      r += cnt[i];
    }
  });
}

// ---- softmax family --------------------------------------------------------------

namespace {

void softmax_inplace(Eigen::Ref<Matrix> m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Var softmax_rows(Var a) {
  Matrix y = a.value();
  softmax_inplace(y);
  return unary(a, std::move(y), [](const Matrix&, const Matrix& y, const Matrix& g) -> Matrix {
    Vector dot = g.cwiseProduct(y).rowwise().sum();
    return y.cwiseProduct(g - dot.replicate(1, g.cols()));
  });
}

Var log_softmax_rows(Var a, const Matrix& keep_in) {
  require_mask("log_softmax_rows", a, keep_in);
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Matrix keep = (keep_in.array() != 0.0).cast<double>();
  Matrix y = Matrix::Zero(x.rows(), x.cols());
  Matrix p = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j) != 0.0) {
        any = true;
        mx = std::max(mx, x(i, j));
      }
    }
    if (!any) throw ShapeError("log_softmax_rows: a row keeps no entry");
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j) != 0.0) z += std::exp(x(i, j) - mx);
    }
    double lse = mx + std::log(z);
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      if (keep(i, j) != 0.0) {
        y(i, j) = x(i, j) - lse;
        p(i, j) = std::exp(y(i, j));
      }
    }
  }
  int ai = a.index();
  return t.push(std::move(y), {ai},
                [ai, keep = std::move(keep), p = std::move(p)](Tape& t, int self) {
                  Matrix g = t.grad(self).cwiseProduct(keep);
                  Vector gs = g.rowwise().sum();
                  t.accumulate(ai, g - p.cwiseProduct(gs.replicate(1, g.cols())));
                });
}

Var log_softmax_rows(Var a) {
  return log_softmax_rows(a, Matrix::Ones(a.rows(), a.cols()));
}

// ---- normalization ---------------------------------------------------------------

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  if (bias.tape() != &t) throw ShapeError("layer_norm: operands on different tapes");
  const Eigen::Index n = x.rows(), c = x.cols();
  if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
    throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(c) + "]");
  }
  Matrix xhat(n, c);
  Vector inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double mu = x.value().row(i).mean();
    auto centered = x.value().row(i).array() - mu;
    double var = centered.square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv_std(i)).matrix();
  }
  Matrix y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() +
             bias.value().row(0).array();
  int xi = x.index(), gi = gain.index(), bi = bias.index();
  return t.push(std::move(y), {xi, gi, bi},
                [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                                  int self) {
                  const Matrix& g = t.grad(self);
                  if (t.needs_grad(gi)) t.grad_ref(gi) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.needs_grad(bi)) t.grad_ref(bi) += g.colwise().sum();
                  if (!t.needs_grad(xi)) return;
                  Matrix gy = g.array().rowwise() * t.value(gi).row(0).array();
                  const double c = static_cast<double>(gy.cols());
                  Matrix& gx = t.grad_ref(xi);
                  for (Eigen::Index i = 0; i < gy.rows(); ++i) {
                    double m1 = gy.row(i).sum() / c;
                    double m2 = gy.row(i).dot(xhat.row(i)) / c;
                    gx.row(i).array() +=
                        inv_std(i) * (gy.row(i).array() - m1 - xhat.row(i).array() * m2);
                  }
                });
}

Var normalize_rows(Var a, double eps) {
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  Vector norm = x.rowwise().norm();
  Vector denom = norm.cwiseMax(eps);
  Matrix y = x.array().colwise() / denom.array();
  int ai = a.index();
  return t.push(y, {ai},
                [ai, y, norm = std::move(norm), denom = std::move(denom), eps](Tape& t,
                                                                               int self) {
                  if (!t.needs_grad(ai)) return;
                  const Matrix& g = t.grad(self);
                  Matrix& ga = t.grad_ref(ai);
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    if (norm(i) > eps) {
                      ga.row(i) += (g.row(i) - y.row(i) * y.row(i).dot(g.row(i))) / denom(i);
                    } else {
                      ga.row(i) += g.row(i) / denom(i);
                    }
                  }
                });
}

Var smooth_l1(Var a, Var b, double beta) {
  Tape& t = tape_of(a, b);
  require_same_shape("smooth_l1", a, b);
  if (!(beta > 0.0)) throw ShapeError("smooth_l1: beta must be positive");
  if (a.value().size() == 0) throw ShapeError("smooth_l1: empty operands");
  Matrix d = a.value() - b.value();
  Matrix v(1, 1);
  v(0, 0) = d.unaryExpr([beta](double x) {
               double ax = std::abs(x);
               return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
             }).mean();
  int ai = a.index(), bi = b.index();
  return t.push(std::move(v), {ai, bi}, [ai, bi, beta, d = std::move(d)](Tape& t, int self) {
    double s = t.grad(self)(0, 0) / static_cast<double>(d.size());
    Matrix local = d.unaryExpr([beta](double x) {
      return std::abs(x) < beta ? x / beta : (x > 0 ? 1.0 : -1.0);
    });
    t.accumulate(ai, local * s);
    t.accumulate(bi, local * -s);
  });
}

// ---- attention -------------------------------------------------------------------

Var segment_attention(Var qkv, std::span<const int> lengths, int heads) {
  Tape& t = tape_of(qkv);
  const Matrix& x = qkv.value();
  if (heads < 1 || x.cols() % (3 * heads) != 0) {
    throw ShapeError("segment_attention: " + std::to_string(x.cols()) +
                     " columns are not 3 x heads x head_dim");
  }
  Eigen::Index total = 0;
  for (int l : lengths) {
    if (l < 1) throw ShapeError("segment_attention: empty segment");
    total += l;
  }
  if (total != x.rows()) {
    throw ShapeError("segment_attention: segment lengths sum to " + std::to_string(total) +
                     " but input has " + std::to_string(x.rows()) + " rows");
  }
  const Eigen::Index width = x.cols() / 3;
  const Eigen::Index dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out(x.rows(), width);
  std::vector<Matrix> probs;
  probs.reserve(lengths.size() * static_cast<std::size_t>(heads));
  Eigen::Index off = 0;
  for (int len : lengths) {
    for (int h = 0; h < heads; ++h) {
      auto q = x.block(off, h * dh, len, dh);
      auto k = x.block(off, width + h * dh, len, dh);
      auto v = x.block(off, 2 * width + h * dh, len, dh);
      Matrix a = (q * k.transpose()) * sc;
      softmax_inplace(a);
      out.block(off, h * dh, len, dh).noalias() = a * v;
      probs.push_back(std::move(a));
    }
    off += len;
  }

  int xi = qkv.index();
  std::vector<int> lens(lengths.begin(), lengths.end());
  return t.push(std::move(out), {xi},
                [xi, lens = std::move(lens), probs = std::move(probs), heads, width, dh,
                 sc](Tape& t, int self) {
                  if (!t.needs_grad(xi)) return;
                  const Matrix& x = t.value(xi);
                  const Matrix& g = t.grad(self);
                  Matrix& gx = t.grad_ref(xi);
                  Eigen::Index off = 0;
                  std::size_t pi = 0;
                  for (int len : lens) {
                    for (int h = 0; h < heads; ++h, ++pi) {
                      const Matrix& a = probs[pi];
                      auto q = x.block(off, h * dh, len, dh);
                      auto k = x.block(off, width + h * dh, len, dh);
                      auto v = x.block(off, 2 * width + h * dh, len, dh);
                      auto go = g.block(off, h * dh, len, dh);
                      gx.block(off, 2 * width + h * dh, len, dh).noalias() += a.transpose() * go;
                      Matrix ga = go * v.transpose();
                      Vector dot = ga.cwiseProduct(a).rowwise().sum();
                      Matrix gs = a.cwiseProduct(ga - dot.replicate(1, len)) * sc;
                      gx.block(off, h * dh, len, dh).noalias() += gs * k;
                      gx.block(off, width + h * dh, len, dh).noalias() += gs.transpose() * q;
                    }
                    off += len;
                  }
                });
}

// ---- ranking -------------------------------------------------------------------------

Var margin_ranking(Var s, const Matrix& keep_in, double margin) {
  require_mask("margin_ranking", s, keep_in);
  if (s.rows() != s.cols()) throw ShapeError("margin_ranking: S must be square");
  Tape& t = tape_of(s);
  const Matrix& m = s.value();
  const Eigen::Index n = m.rows();
  Matrix gcoef = Matrix::Zero(n, n);
  double total = 0.0;
  double terms = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j || keep_in(i, j) == 0.0) continue;
      terms += 2.0;
      double row = margin - m(i, i) + m(i, j);
      if (row > 0) {
        total += row;
        gcoef(i, i) -= 1.0;
        gcoef(i, j) += 1.0;
      }
      double col = margin - m(i, i) + m(j, i);
      if (col > 0) {
        total += col;
        gcoef(i, i) -= 1.0;
        gcoef(j, i) += 1.0;
      }
    }
  }
  if (terms > 0) {
    total /= terms;
    gcoef /= terms;
  }
  Matrix v(1, 1);
  v(0, 0) = total;
  int si = s.index();
  return t.push(std::move(v), {si}, [si, gcoef = std::move(gcoef)](Tape& t, int self) {
    t.accumulate(si, gcoef * t.grad(self)(0, 0));
  });
}

// ---- gradient check --------------------------------------------------------------

double grad_check(ParameterStore& params, const std::function<Var(Tape&)>& f, double step) {
  if (!(step > 0.0)) throw Error("grad_check: step must be positive");
  params.zero_grad();
  std::vector<Matrix> analytic;
  {
    Tape tape;
    Var loss = f(tape);
    if (!std::isfinite(loss.scalar())) throw Error("grad_check: f(theta) is not finite");
    tape.backward(loss);
    for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(params[i].grad);
  }
  auto eval = [&]() {
    Tape tape(false);
    double v = f(tape).scalar();
    if (!std::isfinite(v)) throw Error("grad_check: f(theta) is not finite");
    return v;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& value = params[i].value;
    for (Eigen::Index k = 0; k < value.size(); ++k) {
      double* x = value.data() + k;
      const double orig = *x;
      *x = orig + step;
      double fp = eval();
      *x = orig - step;
      double fm = eval();
      *x = orig;
      double fd = (fp - fm) / (2.0 * step);
      double a = analytic[i].data()[k];
      double err = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  params.zero_grad();
  return worst;
}

}  // namespace tmr::ad
