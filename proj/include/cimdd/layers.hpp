#pragma once

#include <random>
#include <string>
#include <vector>

#include "cimdd/tape.hpp"

namespace cimdd {

/// Row-vector affine map y = x W (+ b), W stored as [in x out].
struct Linear {
  Parameter weight;
  Parameter bias;
  bool has_bias = true;

  Linear() = default;
  /// Glorot-uniform weights, zero bias.
  Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng);

  Var operator()(Tape& t, Var x);
  std::size_t in_dim() const { return weight.value.dim(0); }
  std::size_t out_dim() const { return weight.value.dim(1); }
  void collect(std::vector<Parameter*>& out);
};

}  // namespace cimdd
