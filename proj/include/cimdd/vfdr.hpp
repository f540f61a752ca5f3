#pragma once

// Frontdoor deconfounding of the image modality through a mediator bank and a
// frozen global feature dictionary.

#include <random>
#include <vector>

#include "cimdd/kmeans.hpp"
#include "cimdd/layers.hpp"
#include "cimdd/tape.hpp"

namespace cimdd::vfdr {

struct VfdrConfig {
  std::size_t feat_dim = 16;
  std::size_t out_dim = 64;
  std::size_t mediators = 64;  // K_m
};

/// Initial mediator prototypes: k-means centroids of the training features.
Tensor init_mediators(const Tensor& train_features, std::size_t k, std::uint64_t seed);

/// I(x) = E_x'[x'] W_x + E_m|x[m] W_m with
/// E_m|x[m] = attention(x q_1, M, M) and E_x'[x'] = attention(x q_2, D, D).
class VfdrModule {
 public:
  VfdrModule() = default;
  /// `dictionary` [K x d] is kept as a buffer; `mediators` [K_m x d] seeds the bank.
  VfdrModule(const VfdrConfig& cfg, Tensor dictionary, Tensor mediators, std::mt19937_64& rng);

  /// x: [B x d] -> [B x out_dim].
  Var forward(Tape& t, Var x);
  /// Both expectations, each [B x d]: {dictionary path, mediator path}.
  std::pair<Var, Var> expectations(Tape& t, Var x);

  const VfdrConfig& config() const { return cfg_; }
  void collect(std::vector<Parameter*>& out);

  Tensor dictionary;   // frozen
  Parameter mediators; // M
  Linear q1, q2;       // query embeddings, no bias
  Linear w_x, w_m;     // output maps, no bias

 private:
  VfdrConfig cfg_;
};

}  // namespace cimdd::vfdr
