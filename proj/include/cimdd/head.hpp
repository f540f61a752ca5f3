#pragma once

// Gating over modality features, one transformer encoder block, classifier.

#include <random>
#include <vector>

#include "cimdd/layers.hpp"
#include "cimdd/tape.hpp"

namespace cimdd::head {

/// score_i = u^T tanh(W_g f_i); w = softmax(scores); token_i = w_i f_i.
class Gate {
 public:
  Gate() = default;
  Gate(std::size_t d_h, std::mt19937_64& rng);

  struct Output {
    Var weights;  // [B x n_mod]
    Var tokens;   // [B*n_mod x d_h], sample-major
  };
  /// Each feature is [B x d_h]; at least two are required.
  Output operator()(Tape& t, const std::vector<Var>& feats);
  void collect(std::vector<Parameter*>& out);

  Parameter w_g;  // [d_h x d_h]
  Parameter u;    // [d_h x 1]
};

/// Pre-norm encoder block without positional encoding.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(std::size_t d_h, std::size_t heads, std::size_t ffn_mult, std::mt19937_64& rng);

  /// x: [G*n x d_h], G independent token sets of n rows each.
  Var operator()(Tape& t, Var x, std::size_t groups);
  void collect(std::vector<Parameter*>& out);

  std::size_t heads = 4;
  Parameter ln1_g, ln1_b, ln2_g, ln2_b;
  Linear wq, wk, wv, wo;
  Linear ff1, ff2;
};

struct HeadConfig {
  std::size_t d_h = 64;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t classes = 2;
};

class FusionHead {
 public:
  FusionHead() = default;
  FusionHead(const HeadConfig& cfg, std::mt19937_64& rng);

  /// feats: per-modality [B x d_h]. Returns logits [B x classes].
  Var logits(Tape& t, const std::vector<Var>& feats);
  /// Gate weights of the most recent logits() call.
  const Var& last_gate() const { return last_gate_; }
  void collect(std::vector<Parameter*>& out);

  Gate gate;
  TransformerBlock block;
  Linear classifier;

 private:
  HeadConfig cfg_;
  Var last_gate_;
};

}  // namespace cimdd::head
