#include "cimdd/tape.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "cimdd/error.hpp"

namespace cimdd {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(const Tensor& t) { return CMap(t.data().data(), t.rows(), t.cols()); }
MMap mmap(Tensor& t) { return MMap(t.data().data(), t.rows(), t.cols()); }

Tape& same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.tape() != b.tape())
    throw ContractError(std::string(op) + ": operands must be recorded on the same tape");
  return *a.tape();
}

Tape& tape_of(Var a, const char* op) {
  if (!a.valid()) throw ContractError(std::string(op) + ": invalid variable");
  return *a.tape();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

void add_into(Tensor& dst, const Tensor& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// softmax(Q K^T * scale) per row; `p` receives the weights.
void attention_forward(const double* q, const double* k, const double* v, std::size_t nq,
                       std::size_t nk, std::size_t d, std::size_t dv, double scale, double* p,
                       double* out) {
  Eigen::Map<const RowMat> Q(q, nq, d), K(k, nk, d), V(v, nk, dv);
  Eigen::Map<RowMat> P(p, nq, nk), O(out, nq, dv);
  P.noalias() = (Q * K.transpose()) * scale;
  for (std::size_t r = 0; r < nq; ++r) {
    auto row = P.row(r);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
  O.noalias() = P * V;
}

void attention_backward(const double* q, const double* k, const double* v, const double* p,
                        const double* g, std::size_t nq, std::size_t nk, std::size_t d,
                        std::size_t dv, double scale, double* dq, double* dk, double* dv_out) {
  Eigen::Map<const RowMat> Q(q, nq, d), K(k, nk, d), V(v, nk, dv), P(p, nq, nk), G(g, nq, dv);
  RowMat dP = G * V.transpose();
  RowMat dS(nq, nk);
  for (std::size_t r = 0; r < nq; ++r) {
    const double dot = dP.row(r).dot(P.row(r));
    dS.row(r) = P.row(r).array() * (dP.row(r).array() - dot);
  }
  dS *= scale;
  if (dq) Eigen::Map<RowMat>(dq, nq, d).noalias() += dS * K;
  if (dk) Eigen::Map<RowMat>(dk, nk, d).noalias() += dS.transpose() * Q;
  if (dv_out) Eigen::Map<RowMat>(dv_out, nk, dv).noalias() += P.transpose() * G;
}

}  // namespace

// ---------------------------------------------------------------- Var / Tape

const Tensor& Var::value() const { return tape_->value_of(id_); }
const Tensor& Var::grad() const { return tape_->grad_of(id_); }

Var Tape::constant(Tensor t) {
  t.check_finite("constant input");
  nodes_.push_back(Node{"constant", tag_, std::move(t), {}, false, nullptr, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor t) {
  t.check_finite("leaf input");
  nodes_.push_back(Node{"leaf", tag_, std::move(t), {}, true, nullptr, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (p.grad.shape() != p.value.shape()) p.grad = Tensor::zeros(p.value.shape());
  nodes_.push_back(Node{"param", tag_, p.value, {}, true, &p, {}, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  if (check_finite_) value.check_finite(std::string("op ") + op);
  bool rg = false;
  for (auto i : inputs) rg = rg || nodes_[i].requires_grad;
  nodes_.push_back(
      Node{op, tag_, std::move(value), {}, rg, nullptr, std::move(inputs), rg ? std::move(fn) : nullptr});
  return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::grad_of(std::size_t id) const {
  const auto& n = nodes_.at(id);
  if (n.grad.numel() == 0) {
    auto& self = const_cast<Tape&>(*this);
    self.empty_grad_ = Tensor::zeros(n.value.shape());
    return empty_grad_;
  }
  return n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("backward: loss was not recorded on this tape");
  const Tensor& lv = nodes_[loss.id()].value;
  if (lv.numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
  for (auto& n : nodes_) n.grad = Tensor();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || n.grad.numel() == 0) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) add_into(n.param->grad, n.grad);
  }
}

std::map<std::string, std::size_t> Tape::census() const {
  std::map<std::string, std::size_t> out;
  for (const auto& n : nodes_) ++out[n.tag.empty() ? std::string(n.op) : n.tag + "/" + n.op];
  return out;
}

// ---------------------------------------------------------------- kernels

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out({a.rows(), b.cols()});
  mmap(out).noalias() = cmap(a) * cmap(b);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: column counts differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  Tensor out({a.rows(), b.rows()});
  mmap(out).noalias() = cmap(a) * cmap(b).transpose();
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out({a.rows(), a.cols()}, std::vector<double>(a.data().begin(), a.data().end()));
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (auto& x : row) s += (x = std::exp(x - mx));
    for (auto& x : row) x /= s;
  }
  return out;
}

Tensor attention_weights(const Tensor& q, const Tensor& k, double scale) {
  Tensor s = matmul_nt(q, k);
  for (auto& x : s.data()) x *= scale;
  return softmax_rows(s);
}

// ---------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul");
  Tensor out = matmul(a.value(), b.value());
  return t.record("matmul", std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& av = tp.value_of(ia);
    const Tensor& bv = tp.value_of(ib);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_buffer(ia);
      MMap(ga.data().data(), av.rows(), av.cols()).noalias() += cmap(g) * cmap(bv).transpose();
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      MMap(gb.data().data(), bv.rows(), bv.cols()).noalias() += cmap(av).transpose() * cmap(g);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = same_tape(a, b, "matmul_nt");
  Tensor out = matmul_nt(a.value(), b.value());
  return t.record("matmul_nt", std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& av = tp.value_of(ia);
    const Tensor& bv = tp.value_of(ib);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_buffer(ia);
      MMap(ga.data().data(), av.rows(), av.cols()).noalias() += cmap(g) * cmap(bv);
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      MMap(gb.data().data(), bv.rows(), bv.cols()).noalias() += cmap(g).transpose() * cmap(av);
    }
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a, "transpose");
  return t.record("transpose", a.value().transposed(), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    Tensor gt = tp.grad_of(self).transposed();
    Tensor& ga = tp.grad_buffer(ia);
    auto d = ga.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += gt[i];
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  add_into(out, b.value());
  return t.record("add", std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) add_into(tp.grad_buffer(ia), g);
    if (tp.needs_grad(ib)) add_into(tp.grad_buffer(ib), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
  return t.record("sub", std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) add_into(tp.grad_buffer(ia), g);
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  return t.record("mul", std::move(out), {a.id(), b.id()}, [ia = a.id(), ib = b.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_buffer(ia);
      const Tensor& bv = tp.value_of(ib);
      for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      const Tensor& av = tp.value_of(ia);
      for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var add_bias(Var a, Var bias) {
  Tape& t = same_tape(a, bias, "add_bias");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().numel() != n)
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                         shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.value()[c];
  return t.record("add_bias", std::move(out), {a.id(), bias.id()}, [ia = a.id(), ib = bias.id(), m, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    if (tp.needs_grad(ia)) add_into(tp.grad_buffer(ia), g);
    if (tp.needs_grad(ib)) {
      Tensor& gb = tp.grad_buffer(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
    }
  });
}

Var scale_rows(Var a, Var s) {
  Tape& t = same_tape(a, s, "scale_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (s.value().numel() != m)
    throw DimensionError("scale_rows: scale " + shape_str(s.shape()) + " does not match rows of " +
                         shape_str(a.shape()));
  Tensor out = a.value();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] *= s.value()[r];
  return t.record("scale_rows", std::move(out), {a.id(), s.id()}, [ia = a.id(), is = s.id(), m, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& av = tp.value_of(ia);
    const Tensor& sv = tp.value_of(is);
    if (tp.needs_grad(ia)) {
      Tensor& ga = tp.grad_buffer(ia);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += g[r * n + c] * sv[r];
    }
    if (tp.needs_grad(is)) {
      Tensor& gs = tp.grad_buffer(is);
      for (std::size_t r = 0; r < m; ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c) acc += g[r * n + c] * av[r * n + c];
        gs[r] += acc;
      }
    }
  });
}

Var scale(Var a, double s) {
  Tape& t = tape_of(a, "scale");
  Tensor out = a.value();
  for (auto& x : out.data()) x *= s;
  return t.record("scale", std::move(out), {a.id()}, [ia = a.id(), s](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * s;
  });
}

Var tanh(Var a) {
  Tape& t = tape_of(a, "tanh");
  Tensor out = a.value();
  for (auto& x : out.data()) x = std::tanh(x);
  return t.record("tanh", std::move(out), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.value_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var gelu(Var a) {
  Tape& t = tape_of(a, "gelu");
  Tensor out = a.value();
  for (auto& x : out.data()) x = 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  return t.record("gelu", std::move(out), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& x = tp.value_of(ia);
    Tensor& ga = tp.grad_buffer(ia);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(x[i] * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x[i] * x[i]);
      ga[i] += g[i] * (cdf + x[i] * pdf);
    }
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a, "softmax_rows");
  Tensor out = softmax_rows(a.value());
  return t.record("softmax", std::move(out), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.value_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    const std::size_t m = y.rows(), n = y.cols();
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

Var normalize_rows(Var a) {
  Tape& t = tape_of(a, "normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({m, n});
  std::vector<double> sums(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) sums[r] += a.value()[r * n + c];
    if (sums[r] > 0.0)
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.value()[r * n + c] / sums[r];
  }
  return t.record("normalize_rows", std::move(out), {a.id()}, [ia = a.id(), sums = std::move(sums), m, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    const Tensor& y = tp.value_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < m; ++r) {
      if (!(sums[r] > 0.0)) continue;
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) ga[r * n + c] += (g[r * n + c] - dot) / sums[r];
    }
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(a, gamma, "layer_norm");
  same_tape(a, beta, "layer_norm");
  const std::size_t m = a.rows(), n = a.cols();
  if (gamma.value().numel() != n || beta.value().numel() != n)
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_str(a.shape()));
  const Tensor& x = a.value();
  Tensor xhat({m, n});
  std::vector<double> inv_std(m);
  Tensor out({m, n});
  for (std::size_t r = 0; r < m; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += x[r * n + c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x[r * n + c] - mean) * (x[r * n + c] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (x[r * n + c] - mean) * inv_std[r];
      out[r * n + c] = xhat[r * n + c] * gamma.value()[c] + beta.value()[c];
    }
  }
  return t.record("layer_norm", std::move(out), {a.id(), gamma.id(), beta.id()},
                  [ia = a.id(), ig = gamma.id(), ib = beta.id(), xhat = std::move(xhat),
                   inv_std = std::move(inv_std), m, n](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_of(self);
                    const Tensor& gam = tp.value_of(ig);
                    if (tp.needs_grad(ig) || tp.needs_grad(ib)) {
                      Tensor& gg = tp.grad_buffer(ig);
                      Tensor& gb = tp.grad_buffer(ib);
                      for (std::size_t r = 0; r < m; ++r)
                        for (std::size_t c = 0; c < n; ++c) {
                          gg[c] += g[r * n + c] * xhat[r * n + c];
                          gb[c] += g[r * n + c];
                        }
                    }
                    if (tp.needs_grad(ia)) {
                      Tensor& ga = tp.grad_buffer(ia);
                      const double inv_n = 1.0 / static_cast<double>(n);
                      for (std::size_t r = 0; r < m; ++r) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::size_t c = 0; c < n; ++c) {
                          const double gh = g[r * n + c] * gam[c];
                          s1 += gh;
                          s2 += gh * xhat[r * n + c];
                        }
                        for (std::size_t c = 0; c < n; ++c) {
                          const double gh = g[r * n + c] * gam[c];
                          ga[r * n + c] += inv_std[r] * (gh - inv_n * s1 - xhat[r * n + c] * inv_n * s2);
                        }
                      }
                    }
                  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape& t = tape_of(parts[0], "concat_cols");
  const std::size_t m = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> ids, widths;
  for (const auto& p : parts) {
    same_tape(parts[0], p, "concat_cols");
    if (p.rows() != m)
      throw DimensionError("concat_cols: row counts differ, " + shape_str(parts[0].shape()) + " vs " +
                           shape_str(p.shape()));
    ids.push_back(p.id());
    widths.push_back(p.cols());
    total += p.cols();
  }
  Tensor out({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < m; ++r)
      std::copy_n(v.data().begin() + r * widths[k], widths[k], out.data().begin() + r * total + off);
    off += widths[k];
  }
  return t.record("concat_cols", std::move(out), ids, [ids, widths, m, total](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    std::size_t o = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.needs_grad(ids[k])) {
        Tensor& gk = tp.grad_buffer(ids[k]);
        for (std::size_t r = 0; r < m; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) gk[r * widths[k] + c] += g[r * total + o + c];
      }
      o += widths[k];
    }
  });
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
  Tape& t = tape_of(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (len == 0 || start + len > n)
    throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") outside " + shape_str(a.shape()));
  Tensor out({m, len});
  for (std::size_t r = 0; r < m; ++r)
    std::copy_n(a.value().data().begin() + r * n + start, len, out.data().begin() + r * len);
  return t.record("slice_cols", std::move(out), {a.id()}, [ia = a.id(), m, n, start, len](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < len; ++c) ga[r * n + start + c] += g[r * len + c];
  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = tape_of(a, "reshape");
  Tensor out = a.value().reshaped(std::move(shape));
  return t.record("reshape", std::move(out), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a, "sum");
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  return t.record("sum", Tensor({1}, {s}), {a.id()}, [ia = a.id()](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)[0];
    Tensor& ga = tp.grad_buffer(ia);
    for (auto& x : ga.data()) x += g;
  });
}

Var mean_groups(Var a, std::size_t n) {
  Tape& t = tape_of(a, "mean_groups");
  const std::size_t rows = a.rows(), d = a.cols();
  if (n == 0 || rows % n != 0)
    throw DimensionError("mean_groups: " + std::to_string(rows) + " rows not divisible into groups of " +
                         std::to_string(n));
  const std::size_t groups = rows / n;
  Tensor out({groups, d});
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t gi = 0; gi < groups; ++gi)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) out[gi * d + c] += a.value()[(gi * n + r) * d + c] * inv;
  return t.record("mean_groups", std::move(out), {a.id()}, [ia = a.id(), groups, n, d, inv](Tape& tp, std::size_t self) {
    const Tensor& g = tp.grad_of(self);
    Tensor& ga = tp.grad_buffer(ia);
    for (std::size_t gi = 0; gi < groups; ++gi)
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) ga[(gi * n + r) * d + c] += g[gi * d + c] * inv;
  });
}

Var attention(Var q, Var k, Var v, double scale) {
  same_tape(q, k, "attention");
  same_tape(q, v, "attention");
  if (q.cols() != k.cols())
    throw DimensionError("attention: query " + shape_str(q.shape()) + " and key " + shape_str(k.shape()) +
                         " widths differ");
  if (k.rows() != v.rows())
    throw DimensionError("attention: key " + shape_str(k.shape()) + " and value " + shape_str(v.shape()) +
                         " row counts differ");
  return grouped_attention(q, k, v, 1, scale);
}

Var grouped_attention(Var q, Var k, Var v, std::size_t groups, double scale) {
  Tape& t = same_tape(q, k, "grouped_attention");
  same_tape(q, v, "grouped_attention");
  const std::size_t d = q.cols(), dv = v.cols();
  if (groups == 0 || q.rows() % groups || k.rows() % groups || v.rows() != k.rows() || k.cols() != d)
    throw DimensionError("grouped_attention: incompatible shapes Q" + shape_str(q.shape()) + " K" +
                         shape_str(k.shape()) + " V" + shape_str(v.shape()) + " for " +
                         std::to_string(groups) + " groups");
  const std::size_t nq = q.rows() / groups, nk = k.rows() / groups;
  Tensor probs({groups * nq, nk});
  Tensor out({groups * nq, dv});
  const double* qd = q.value().data().data();
  const double* kd = k.value().data().data();
  const double* vd = v.value().data().data();
  for (std::size_t gi = 0; gi < groups; ++gi)
    attention_forward(qd + gi * nq * d, kd + gi * nk * d, vd + gi * nk * dv, nq, nk, d, dv, scale,
                      probs.data().data() + gi * nq * nk, out.data().data() + gi * nq * dv);
  const char* name = groups == 1 ? "attention" : "grouped_attention";
  return t.record(name, std::move(out), {q.id(), k.id(), v.id()},
                  [iq = q.id(), ik = k.id(), iv = v.id(), probs = std::move(probs), groups, nq, nk, d, dv,
                   scale](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.grad_of(self);
                    double* dq = tp.needs_grad(iq) ? tp.grad_buffer(iq).data().data() : nullptr;
                    double* dk = tp.needs_grad(ik) ? tp.grad_buffer(ik).data().data() : nullptr;
                    double* dvp = tp.needs_grad(iv) ? tp.grad_buffer(iv).data().data() : nullptr;
                    const double* qd = tp.value_of(iq).data().data();
                    const double* kd = tp.value_of(ik).data().data();
                    const double* vd = tp.value_of(iv).data().data();
                    for (std::size_t gi = 0; gi < groups; ++gi)
                      attention_backward(qd + gi * nq * d, kd + gi * nk * d, vd + gi * nk * dv,
                                         probs.data().data() + gi * nq * nk, g.data().data() + gi * nq * dv,
                                         nq, nk, d, dv, scale, dq ? dq + gi * nq * d : nullptr,
                                         dk ? dk + gi * nk * d : nullptr, dvp ? dvp + gi * nk * dv : nullptr);
                  });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
  Tape& t = tape_of(logits, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= c)
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
  Tensor probs = softmax_rows(logits.value());
  double loss = 0.0;
  for (std::size_t r = 0; r < b; ++r) {
    const auto row = logits.value().row_span(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double x : row) s += std::exp(x - mx);
    loss += (mx + std::log(s)) - row[labels[r]];
  }
  loss /= static_cast<double>(b);
  return t.record("cross_entropy", Tensor({1}, {loss}), {logits.id()},
                  [il = logits.id(), probs = std::move(probs), labels, b, c](Tape& tp, std::size_t self) {
                    const double g = tp.grad_of(self)[0] / static_cast<double>(b);
                    Tensor& gl = tp.grad_buffer(il);
                    for (std::size_t r = 0; r < b; ++r)
                      for (std::size_t j = 0; j < c; ++j)
                        gl[r * c + j] += g * (probs[r * c + j] - (static_cast<int>(j) == labels[r] ? 1.0 : 0.0));
                  });
}

}  // namespace cimdd
