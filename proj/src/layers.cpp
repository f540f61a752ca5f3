#include "cimdd/layers.hpp"

#include <cmath>

namespace cimdd {

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng)
    : weight(name + ".weight", Tensor::uniform({in, out}, rng, std::sqrt(6.0 / static_cast<double>(in + out)))),
      has_bias(with_bias) {
  if (has_bias) bias = Parameter(name + ".bias", Tensor::zeros({out}));
}

Var Linear::operator()(Tape& t, Var x) {
  Var y = matmul(x, t.param(weight));
  return has_bias ? add_bias(y, t.param(bias)) : y;
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&weight);
  if (has_bias) out.push_back(&bias);
}

}  // namespace cimdd
