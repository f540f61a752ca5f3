#include "cimdd/optim.hpp"

#include <cmath>

#include "cimdd/error.hpp"

namespace cimdd {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.lr > 0.0)) throw ConfigError("AdamW: learning rate must be positive, got " + std::to_string(cfg_.lr));
  if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
    throw ConfigError("AdamW: betas must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw ConfigError("AdamW: eps must be positive");
  if (cfg_.weight_decay < 0.0) throw ConfigError("AdamW: weight decay must be non-negative");
  for (auto* p : params_) {
    m_.push_back(Tensor::zeros(p->value.shape()));
    v_.push_back(Tensor::zeros(p->value.shape()));
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto w = params_[k]->value.data();
    auto g = params_[k]->grad.data();
    auto m = m_[k].data();
    auto v = v_[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

}  // namespace cimdd
