#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cimdd/tensor.hpp"

namespace cimdd {

/// A trainable tensor and its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())) {}
  void zero_grad() { grad.fill(0.0); }
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  /// Gradient after Tape::backward; zero tensor for untouched nodes.
  const Tensor& grad() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run record of executed ops. One tape per forward pass; a tape is
/// not shared across threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Input that never receives a gradient.
  Var constant(Tensor t);
  /// Input whose gradient is kept on the tape (readable via Var::grad()).
  Var leaf(Tensor t);
  /// Parameter input; backward() adds the gradient into `p.grad`.
  Var param(Parameter& p);

  /// Reverse sweep from a scalar loss. Visits nodes in reverse creation order.
  void backward(Var loss);

  /// Number of recorded ops keyed by "tag/op" (tag omitted when empty).
  std::map<std::string, std::size_t> census() const;
  std::size_t size() const { return nodes_.size(); }

  /// When enabled, every op output is checked for NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  /// Tags every op recorded while alive, for structural inspection.
  class Scope {
   public:
    Scope(Tape& t, std::string tag) : tape_(t), prev_(t.tag_) { t.tag_ = std::move(tag); }
    ~Scope() { tape_.tag_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape& tape_;
    std::string prev_;
  };

  // Used by op implementations.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;
  Var record(const char* op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Tensor& value_of(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_of(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of `id`, allocated on first use.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    const char* op;
    std::string tag;
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
  std::string tag_;
  bool check_finite_ = false;
  Tensor empty_grad_;
};

// ---- differentiable ops (all operands must live on the same tape) ----

Var matmul(Var a, Var b);     // [m x k] . [k x n]
Var matmul_nt(Var a, Var b);  // [m x k] . [n x k]^T
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
/// a[m x n] + bias[n] broadcast over rows.
Var add_bias(Var a, Var bias);
/// Row r of a[m x n] scaled by s[m x 1].
Var scale_rows(Var a, Var s);
Var scale(Var a, double s);
Var tanh(Var a);
/// Exact (erf-based) GELU.
Var gelu(Var a);
Var softmax_rows(Var a);
/// Divides each row by its sum; all-zero rows stay zero. Entries must be >= 0.
Var normalize_rows(Var a);
Var layer_norm_rows(Var a, Var gamma, Var beta, double eps = 1e-5);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, std::size_t start, std::size_t len);
Var reshape(Var a, Shape shape);
Var sum(Var a);
/// a[(G*n) x d] -> [G x d], mean of each consecutive block of n rows.
Var mean_groups(Var a, std::size_t n);
/// softmax(Q K^T * scale) V with Q[q x d], K[k x d], V[k x dv].
Var attention(Var q, Var k, Var v, double scale);
/// Independent attention per group: Q[(G*q) x d], K[(G*k) x d], V[(G*k) x dv].
Var grouped_attention(Var q, Var k, Var v, std::size_t groups, double scale);
/// Mean softmax cross-entropy of logits[B x C] against integer labels.
Var cross_entropy(Var logits, const std::vector<int>& labels);

// ---- plain tensor kernels shared with modules and tests ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& a);
/// Row-wise softmax(Q K^T * scale).
Tensor attention_weights(const Tensor& q, const Tensor& k, double scale);

}  // namespace cimdd
