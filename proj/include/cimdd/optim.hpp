#pragma once

#include <cstddef>
#include <vector>

#include "cimdd/tape.hpp"

namespace cimdd {

struct AdamWConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay. Moment state persists across step() calls.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

  void step();
  void zero_grad();
  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace cimdd
