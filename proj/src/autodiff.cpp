#include "pnet/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace pnet {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

MapC as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return MapC(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::logic_error("Var is not attached to a tape");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("Vars belong to different tapes");
  return tape_of(a);
}

void require_same(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) throw ShapeError(op, a.shape(), b.shape());
}

void require_rank2(const char* op, Var a) {
  if (a.value().rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 input, got " + shape_str(a.shape()));
}

Tensor like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace

const Tensor& Var::value() const { return tape_of(*this).value(id); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  if (!value.all_finite()) throw NumericError("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.is_leaf = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::push(const char* op, Tensor value, std::vector<int> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericError(std::string(op) + ": non-finite forward value");
  Node n;
  n.op = op;
  n.value = std::move(value);
  for (int i : inputs) n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(i)].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

std::span<Real> Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.numel() != n.value.numel() || n.grad.shape() != n.value.shape()) n.grad = like(n.value);
  return n.grad.values();
}

void Tape::accumulate(int id, const Tensor& g) { accumulate(id, g.values()); }

void Tape::accumulate(int id, std::span<const Real> g, Real scale) {
  if (!nodes_[static_cast<std::size_t>(id)].requires_grad) return;
  auto buf = grad_buffer(id);
  if (scale == Real(1)) {
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
  } else {
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += scale * g[i];
  }
}

Gradients Tape::run_backward(int root) {
  Node& r = nodes_.at(static_cast<std::size_t>(root));
  if (r.value.numel() != 1) throw ShapeError("backward: root must be scalar, got " + shape_str(r.value.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  Gradients out;
  if (!r.requires_grad) return out;
  grad_buffer(root)[0] = Real(1);
  for (int id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.numel() == 0) continue;
    if (n.is_leaf) {
      out.by_leaf.emplace(id, std::move(n.grad));
      n.grad = Tensor();
      continue;
    }
    if (n.backward) n.backward(*this, n.grad);
    if (id != root) n.grad = Tensor();
  }
  return out;
}

Tensor Gradients::of(Var v) const {
  auto it = by_leaf.find(v.id);
  if (it == by_leaf.end()) return Tensor(v.shape());
  return it->second;
}

Gradients backward(Tape& tape, Var root) {
  if (root.tape != &tape) throw std::logic_error("backward: root not on this tape");
  return tape.run_backward(root.id);
}

// ---- elementwise --------------------------------------------------------

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same("add", a, b);
  Tensor out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  const int ia = a.id, ib = b.id;
  return t.push("add", std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same("sub", a, b);
  Tensor out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  const int ia = a.id, ib = b.id;
  return t.push("sub", std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g.values(), Real(-1));
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same("mul", a, b);
  Tensor out = a.value();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  const int ia = a.id, ib = b.id;
  return t.push("mul", std::move(out), {ia, ib}, [ia, ib](Tape& tp, const Tensor& g) {
    const auto av = tp.value(ia).values();
    const auto bv2 = tp.value(ib).values();
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv2[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, Real c) {
  Tape& t = tape_of(a);
  Tensor out = a.value();
  for (auto& v : out.values()) v *= c;
  const int ia = a.id;
  return t.push("scale", std::move(out), {ia},
                [ia, c](Tape& tp, const Tensor& g) { tp.accumulate(ia, g.values(), c); });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const auto& xs = x.shape();
  if (bias.value().rank() != 1 || xs.empty() || xs.back() != bias.value().numel())
    throw ShapeError("add_bias", xs, bias.shape());
  Tensor out = x.value();
  const std::size_t n = bias.value().numel();
  const auto bv = bias.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i % n];
  const int ix = x.id, ib = bias.id;
  return t.push("add_bias", std::move(out), {ix, ib}, [ix, ib, n](Tape& tp, const Tensor& g) {
    tp.accumulate(ix, g);
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i % n] += g[i];
    }
  });
}

namespace {

// Pushes a unary node whose local derivative is precomputed at forward time.
Var unary_with_derivative(const char* op, Var x, Tensor out, Tensor deriv) {
  Tape& t = tape_of(x);
  const int ix = x.id;
  if (!x.requires_grad()) return t.push(op, std::move(out), {ix}, {});
  return t.push(op, std::move(out), {ix}, [ix, d = std::move(deriv)](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * d[i];
  });
}

}  // namespace

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = like(xv), d = like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const bool on = xv[i] > Real(0);
    out[i] = on ? xv[i] : Real(0);
    d[i] = on ? Real(1) : Real(0);
  }
  return unary_with_derivative("relu", x, std::move(out), std::move(d));
}

Var gelu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = like(xv), d = like(xv);
  const bool need = x.requires_grad();
  constexpr Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  const Real inv_sqrt2pi = Real(1) / std::sqrt(Real(2) * std::numbers::pi_v<Real>);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const Real v = xv[i];
    const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
    out[i] = v * cdf;
    if (need) d[i] = cdf + v * inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
  }
  return unary_with_derivative("gelu", x, std::move(out), std::move(d));
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor out = like(xv), d = like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    const Real v = xv[i];
    // Branch keeps exp() from overflowing for large |v|.
    const Real s = v >= 0 ? Real(1) / (Real(1) + std::exp(-v)) : std::exp(v) / (Real(1) + std::exp(v));
    out[i] = s;
    d[i] = s * (Real(1) - s);
  }
  return unary_with_derivative("sigmoid", x, std::move(out), std::move(d));
}

Var log(Var x) {
  const Tensor& xv = x.value();
  Tensor out = like(xv), d = like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) {
    out[i] = std::log(xv[i]);
    d[i] = Real(1) / xv[i];
  }
  return unary_with_derivative("log", x, std::move(out), std::move(d));
}

Var exp(Var x) {
  const Tensor& xv = x.value();
  Tensor out = like(xv);
  for (std::size_t i = 0; i < xv.numel(); ++i) out[i] = std::exp(xv[i]);
  Tensor d = out;
  return unary_with_derivative("exp", x, std::move(out), std::move(d));
}

// ---- reductions and shape ops --------------------------------------------

Var sum(Var x) {
  Tape& t = tape_of(x);
  Real s = 0;
  for (Real v : x.value().values()) s += v;
  const int ix = x.id;
  return t.push("sum", Tensor::scalar(s), {ix}, [ix](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (auto& v : gx) v += g[0];
  });
}

Var mean(Var x) {
  Tape& t = tape_of(x);
  const std::size_t n = x.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  Real s = 0;
  for (Real v : x.value().values()) s += v;
  const int ix = x.id;
  const Real inv = Real(1) / static_cast<Real>(n);
  return t.push("mean", Tensor::scalar(s * inv), {ix}, [ix, inv](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (auto& v : gx) v += g[0] * inv;
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id;
  return t.push("reshape", std::move(out), {ix},
                [ix](Tape& tp, const Tensor& g) { tp.accumulate(ix, g.values()); });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Tape& t = tape_of(parts.front());
  const Shape& s0 = parts.front().shape();
  const std::size_t rank = s0.size();
  if (rank < 1 || rank > 2 || axis >= rank) throw ShapeError("concat: unsupported rank/axis for " + shape_str(s0));
  std::vector<int> ids;
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    const Shape& s = p.shape();
    if (s.size() != rank) throw ShapeError("concat", s0, s);
    for (std::size_t d = 0; d < rank; ++d)
      if (d != axis && s[d] != s0[d]) throw ShapeError("concat", s0, s);
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
  }
  Tensor out(out_shape);
  const std::size_t rows = rank == 1 ? 1 : out_shape[0];
  const std::size_t out_cols = rank == 1 ? out_shape[0] : out_shape[1];
  std::vector<std::size_t> offsets;  // along axis
  std::size_t off = 0;
  for (const Var& p : parts) {
    offsets.push_back(off);
    const Tensor& v = p.value();
    if (rank == 1 || axis == 0) {
      std::copy(v.values().begin(), v.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(off * (rank == 1 ? 1 : out_cols)));
      off += v.shape()[axis];
    } else {
      const std::size_t c = v.shape()[1];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * out_cols + off + j] = v[r * c + j];
      off += c;
    }
  }
  return t.push("concat", std::move(out), ids,
                [ids, offsets, rank, axis, rows, out_cols](Tape& tp, const Tensor& g) {
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    if (!tp.requires_grad(ids[p])) continue;
                    auto gp = tp.grad_buffer(ids[p]);
                    if (rank == 1 || axis == 0) {
                      const std::size_t base = offsets[p] * (rank == 1 ? 1 : out_cols);
                      for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[base + i];
                    } else {
                      const std::size_t c = gp.size() / rows;
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * out_cols + offsets[p] + j];
                    }
                  }
                });
}

Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Shape& s = x.shape();
  if (s.empty() || s.size() > 2 || axis >= s.size() || begin > end || end > s[axis])
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  Shape os = s;
  os[axis] = end - begin;
  Tensor out(os);
  const Tensor& v = x.value();
  const std::size_t rows = s.size() == 1 ? 1 : s[0];
  const std::size_t cols = s.size() == 1 ? s[0] : s[1];
  const bool by_rows = s.size() == 2 && axis == 0;
  const std::size_t r0 = by_rows ? begin : 0, r1 = by_rows ? end : rows;
  const std::size_t c0 = by_rows ? 0 : begin, c1 = by_rows ? cols : end;
  const std::size_t oc = c1 - c0;
  for (std::size_t r = r0; r < r1; ++r)
    for (std::size_t c = c0; c < c1; ++c) out[(r - r0) * oc + (c - c0)] = v[r * cols + c];
  const int ix = x.id;
  return t.push("slice", std::move(out), {ix}, [=](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) gx[r * cols + c] += g[(r - r0) * oc + (c - c0)];
  });
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  Tape& t = tape_of(x);
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("gather_rows on a scalar");
  const std::size_t n = s[0];
  const std::size_t width = x.value().numel() / std::max<std::size_t>(n, 1);
  Shape os = s;
  os[0] = rows.size();
  Tensor out(os);
  const auto xv = x.value().values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " + shape_str(s));
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[i] * width), width,
                out.values().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  const int ix = x.id;
  return t.push("gather_rows", std::move(out), {ix}, [ix, rows = std::move(rows), width](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < width; ++j) gx[rows[i] * width + j] += g[i * width + j];
  });
}

Var where(std::span<const std::uint8_t> mask, Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same("where", a, b);
  if (mask.size() != a.value().numel())
    throw ShapeError("where: mask of " + std::to_string(mask.size()) + " elements for " + shape_str(a.shape()));
  Tensor out = like(a.value());
  const auto av = a.value().values();
  const auto bv = b.value().values();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mask[i] ? av[i] : bv[i];
  const int ia = a.id, ib = b.id;
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return t.push("where", std::move(out), {ia, ib}, [ia, ib, m = std::move(m)](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(ia)) {
      auto ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (m[i]) ga[i] += g[i];
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.size(); ++i)
        if (!m[i]) gb[i] += g[i];
    }
  });
}

// ---- matrix ops -----------------------------------------------------------

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw ShapeError("matmul", a.shape(), b.shape());
  Tensor out({m, n});
  Map(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n)).noalias() =
      as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  const int ia = a.id, ib = b.id;
  return t.push("matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape& tp, const Tensor& g) {
    const auto G = as_mat(g, m, n);
    if (tp.requires_grad(ia)) {
      Map ga(tp.grad_buffer(ia).data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
      ga.noalias() += G * as_mat(tp.value(ib), k, n).transpose();
    }
    if (tp.requires_grad(ib)) {
      Map gb(tp.grad_buffer(ib).data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      gb.noalias() += as_mat(tp.value(ia), m, k).transpose() * G;
    }
  });
}

Var linear(Var x, Var w, Var bias) {
  Tape& t = tape_of(x, w);
  tape_of(x, bias);
  require_rank2("linear", x);
  require_rank2("linear", w);
  const std::size_t bsz = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) throw ShapeError("linear", x.shape(), w.shape());
  if (bias.value().rank() != 1 || bias.value().numel() != out_dim) throw ShapeError("linear bias", w.shape(), bias.shape());
  const auto B = static_cast<Eigen::Index>(bsz), I = static_cast<Eigen::Index>(in), O = static_cast<Eigen::Index>(out_dim);
  Tensor out({bsz, out_dim});
  Map Y(out.data(), B, O);
  Y.noalias() = as_mat(x.value(), bsz, in) * as_mat(w.value(), out_dim, in).transpose();
  const auto bv = bias.value().values();
  for (std::size_t r = 0; r < bsz; ++r)
    for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += bv[c];
  const int ix = x.id, iw = w.id, ib = bias.id;
  return t.push("linear", std::move(out), {ix, iw, ib}, [=](Tape& tp, const Tensor& g) {
    const auto G = as_mat(g, bsz, out_dim);
    if (tp.requires_grad(ix)) {
      Map gx(tp.grad_buffer(ix).data(), B, I);
      gx.noalias() += G * as_mat(tp.value(iw), out_dim, in);
    }
    if (tp.requires_grad(iw)) {
      Map gw(tp.grad_buffer(iw).data(), O, I);
      gw.noalias() += G.transpose() * as_mat(tp.value(ix), bsz, in);
    }
    if (tp.requires_grad(ib)) {
      auto gb = tp.grad_buffer(ib);
      for (std::size_t r = 0; r < bsz; ++r)
        for (std::size_t c = 0; c < out_dim; ++c) gb[c] += g[r * out_dim + c];
    }
  });
}

// ---- probability ops ------------------------------------------------------

namespace {

void softmax_rows(const Tensor& x, Tensor& out) {
  const std::size_t n = x.rows(), k = x.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.data() + r * k;
    Real* o = out.data() + r * k;
    Real mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = std::exp(row[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < k; ++j) o[j] /= z;
  }
}

}  // namespace

Var softmax(Var logits) {
  Tape& t = tape_of(logits);
  if (logits.value().rank() < 1 || logits.value().cols() == 0) throw ShapeError("softmax of " + shape_str(logits.shape()));
  Tensor out = like(logits.value());
  softmax_rows(logits.value(), out);
  const int ix = logits.id;
  if (!logits.requires_grad()) return t.push("softmax", std::move(out), {ix}, {});
  Tensor saved = out;
  const std::size_t n = saved.rows(), k = saved.cols();
  return t.push("softmax", std::move(out), {ix}, [ix, n, k, s = std::move(saved)](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < n; ++r) {
      Real dot = 0;
      for (std::size_t j = 0; j < k; ++j) dot += g[r * k + j] * s[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += s[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

Var log_softmax(Var logits) {
  Tape& t = tape_of(logits);
  const Tensor& x = logits.value();
  if (x.rank() < 1 || x.cols() == 0) throw ShapeError("log_softmax of " + shape_str(logits.shape()));
  const std::size_t n = x.rows(), k = x.cols();
  Tensor out = like(x), probs = like(x);
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.data() + r * k;
    Real mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const Real lz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) {
      out[r * k + j] = row[j] - lz;
      probs[r * k + j] = std::exp(row[j] - lz);
    }
  }
  const int ix = logits.id;
  if (!logits.requires_grad()) return t.push("log_softmax", std::move(out), {ix}, {});
  return t.push("log_softmax", std::move(out), {ix}, [ix, n, k, p = std::move(probs)](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t r = 0; r < n; ++r) {
      Real gs = 0;
      for (std::size_t j = 0; j < k; ++j) gs += g[r * k + j];
      for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += g[r * k + j] - p[r * k + j] * gs;
    }
  });
}

Var group_log_mean_exp(Var x, std::size_t group) {
  Tape& t = tape_of(x);
  require_rank2("group_log_mean_exp", x);
  const std::size_t rows = x.shape()[0], k = x.shape()[1];
  if (group == 0 || rows % group != 0)
    throw ShapeError("group_log_mean_exp: " + std::to_string(rows) + " rows not divisible into groups of " + std::to_string(group));
  const std::size_t n = rows / group;
  const Real log_g = std::log(static_cast<Real>(group));
  Tensor out({n, k});
  Tensor weights = like(x.value());  // d out / d x: softmax over the group
  const auto xv = x.value().values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      Real mx = xv[(i * group) * k + j];
      for (std::size_t s = 1; s < group; ++s) mx = std::max(mx, xv[(i * group + s) * k + j]);
      Real z = 0;
      for (std::size_t s = 0; s < group; ++s) z += std::exp(xv[(i * group + s) * k + j] - mx);
      for (std::size_t s = 0; s < group; ++s) weights[(i * group + s) * k + j] = std::exp(xv[(i * group + s) * k + j] - mx) / z;
      out[i * k + j] = mx + std::log(z) - log_g;
    }
  const int ix = x.id;
  if (!x.requires_grad()) return t.push("group_log_mean_exp", std::move(out), {ix}, {});
  return t.push("group_log_mean_exp", std::move(out), {ix}, [=, w = std::move(weights)](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < group; ++s)
        for (std::size_t j = 0; j < k; ++j) gx[(i * group + s) * k + j] += g[i * k + j] * w[(i * group + s) * k + j];
  });
}

Var group_mean_rows(Var x, std::size_t group) {
  Tape& t = tape_of(x);
  require_rank2("group_mean_rows", x);
  const std::size_t rows = x.shape()[0], k = x.shape()[1];
  if (group == 0 || rows % group != 0)
    throw ShapeError("group_mean_rows: " + std::to_string(rows) + " rows not divisible into groups of " + std::to_string(group));
  const std::size_t n = rows / group;
  Tensor out({n, k});
  const Real inv = Real(1) / static_cast<Real>(group);
  const auto xv = x.value().values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      Real s = 0;
      for (std::size_t g = 0; g < group; ++g) s += xv[(i * group + g) * k + j];
      out[i * k + j] = s * inv;
    }
  const int ix = x.id;
  return t.push("group_mean_rows", std::move(out), {ix}, [=](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t gg = 0; gg < group; ++gg)
        for (std::size_t j = 0; j < k; ++j) gx[(i * group + gg) * k + j] += g[i * k + j] * inv;
  });
}

Var pick(Var x, std::span<const int> cols) {
  Tape& t = tape_of(x);
  require_rank2("pick", x);
  const std::size_t n = x.shape()[0], k = x.shape()[1];
  if (cols.size() != n) throw ShapeError("pick: " + std::to_string(cols.size()) + " indices for " + shape_str(x.shape()));
  Tensor out({n});
  std::vector<int> c(cols.begin(), cols.end());
  for (std::size_t i = 0; i < n; ++i) {
    if (c[i] < 0 || static_cast<std::size_t>(c[i]) >= k)
      throw std::invalid_argument("pick: label " + std::to_string(c[i]) + " out of range [0," + std::to_string(k) + ")");
    out[i] = x.value()[i * k + static_cast<std::size_t>(c[i])];
  }
  const int ix = x.id;
  return t.push("pick", std::move(out), {ix}, [ix, k, c = std::move(c)](Tape& tp, const Tensor& g) {
    auto gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < c.size(); ++i) gx[i * k + static_cast<std::size_t>(c[i])] += g[i];
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  Tape& t = tape_of(logits);
  require_rank2("softmax_cross_entropy", logits);
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + shape_str(logits.shape()));
  if (n == 0) throw ShapeError("softmax_cross_entropy on an empty batch");
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
  Tensor probs = like(logits.value());
  softmax_rows(logits.value(), probs);
  const auto x = logits.value().values();
  Real total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = x.data() + r * k;
    Real mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    Real z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    total += (std::log(z) + mx) - row[static_cast<std::size_t>(labels[r])];
  }
  const Real inv = Real(1) / static_cast<Real>(n);
  std::vector<int> y(labels.begin(), labels.end());
  const int ix = logits.id;
  return t.push("softmax_cross_entropy", Tensor::scalar(total * inv), {ix},
                [ix, k, inv, y = std::move(y), p = std::move(probs)](Tape& tp, const Tensor& g) {
                  auto gx = tp.grad_buffer(ix);
                  const Real s = g[0] * inv;
                  for (std::size_t r = 0; r < y.size(); ++r) {
                    for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += s * p[r * k + j];
                    gx[r * k + static_cast<std::size_t>(y[r])] -= s;
                  }
                });
}

// ---- finite differences ---------------------------------------------------

double finite_diff_check(const std::function<double(const Tensor&)>& f, const Tensor& point,
                         const Tensor& gradient, double step) {
  if (gradient.numel() != point.numel()) throw ShapeError("finite_diff_check", point.shape(), gradient.shape());
  double worst = 0.0;
  Tensor probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const Real orig = probe[i];
    probe[i] = orig + static_cast<Real>(step);
    const double fp = f(probe);
    probe[i] = orig - static_cast<Real>(step);
    const double fm = f(probe);
    probe[i] = orig;
    const double fd = (fp - fm) / (2.0 * step);
    const double g = gradient[i];
    worst = std::max(worst, std::abs(fd - g) / (std::abs(g) + 1e-12));
  }
  return worst;
}

double evaluate(const TapeFunction& f, const Tensor& point) {
  Tape tape;
  Var x = tape.constant(point);
  return static_cast<double>(f(tape, x).value().item());
}

Tensor gradient(const TapeFunction& f, const Tensor& point) {
  Tape tape;
  Var x = tape.leaf(point);
  Var y = f(tape, x);
  return backward(tape, y).of(x);
}

double finite_diff_check(const TapeFunction& f, const Tensor& point, double step) {
  const Tensor g = gradient(f, point);
  return finite_diff_check([&](const Tensor& p) { return evaluate(f, p); }, point, g, step);
}

}  // namespace pnet
