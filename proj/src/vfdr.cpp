#include "cimdd/vfdr.hpp"

#include <cmath>

#include "cimdd/error.hpp"

namespace cimdd::vfdr {

Tensor init_mediators(const Tensor& train_features, std::size_t k, std::uint64_t seed) {
  return kmeans(train_features, {k, seed, 100}).centroids;
}

VfdrModule::VfdrModule(const VfdrConfig& cfg, Tensor dict, Tensor med, std::mt19937_64& rng)
    : dictionary(std::move(dict)),
      mediators("vfdr.mediators", std::move(med)),
      q1("vfdr.q1", cfg.feat_dim, cfg.feat_dim, false, rng),
      q2("vfdr.q2", cfg.feat_dim, cfg.feat_dim, false, rng),
      w_x("vfdr.w_x", cfg.feat_dim, cfg.out_dim, false, rng),
      w_m("vfdr.w_m", cfg.feat_dim, cfg.out_dim, false, rng),
      cfg_(cfg) {
  if (dictionary.ndim() != 2 || dictionary.rows() == 0 || dictionary.cols() != cfg.feat_dim)
    throw DimensionError("vfdr: dictionary " + shape_str(dictionary.shape()) + " must be [K x " +
                         std::to_string(cfg.feat_dim) + "]");
  if (mediators.value.ndim() != 2 || mediators.value.rows() == 0 || mediators.value.cols() != cfg.feat_dim)
    throw DimensionError("vfdr: mediator bank " + shape_str(mediators.value.shape()) + " must be [K_m x " +
                         std::to_string(cfg.feat_dim) + "]");
  cfg_.mediators = mediators.value.rows();
}

std::pair<Var, Var> VfdrModule::expectations(Tape& t, Var x) {
  if (x.cols() != cfg_.feat_dim)
    throw DimensionError("vfdr: input " + shape_str(x.shape()) + " does not have width " +
                         std::to_string(cfg_.feat_dim));
  Tape::Scope scope(t, "vfdr");
  const double s = 1.0 / std::sqrt(double(cfg_.feat_dim));
  Var m = t.param(mediators);
  Var e_m = attention(q1(t, x), m, m, s);
  Var d = t.constant(dictionary);
  Var e_x = attention(q2(t, x), d, d, s);
  return {e_x, e_m};
}

Var VfdrModule::forward(Tape& t, Var x) {
  auto [e_x, e_m] = expectations(t, x);
  Tape::Scope scope(t, "vfdr");
  return add(w_x(t, e_x), w_m(t, e_m));
}

void VfdrModule::collect(std::vector<Parameter*>& out) {
  q1.collect(out);
  q2.collect(out);
  w_x.collect(out);
  w_m.collect(out);
  out.push_back(&mediators);
}

}  // namespace cimdd::vfdr
