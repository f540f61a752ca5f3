#include "cimdd/head.hpp"

#include <cmath>

#include "cimdd/error.hpp"

namespace cimdd::head {

Gate::Gate(std::size_t d_h, std::mt19937_64& rng)
    : w_g("head.gate.w_g", Tensor::uniform({d_h, d_h}, rng, std::sqrt(3.0 / double(d_h)))),
      u("head.gate.u", Tensor::uniform({d_h, 1}, rng, std::sqrt(3.0 / double(d_h)))) {}

Gate::Output Gate::operator()(Tape& t, const std::vector<Var>& feats) {
  if (feats.size() < 2) throw ConfigError("gate: at least two modalities are required");
  const std::size_t b = feats[0].rows(), d = feats[0].cols(), n = feats.size();
  for (const auto& f : feats)
    if (f.rows() != b || f.cols() != d)
      throw DimensionError("gate: modality features " + shape_str(f.shape()) + " and " +
                           shape_str(feats[0].shape()) + " differ");
  Var stack = reshape(concat_cols(feats), {b * n, d});
  Var scores = matmul(tanh(matmul(stack, t.param(w_g))), t.param(u));  // [B*n x 1]
  Var w = softmax_rows(reshape(scores, {b, n}));
  return {w, scale_rows(stack, reshape(w, {b * n, 1}))};
}

void Gate::collect(std::vector<Parameter*>& out) {
  out.push_back(&w_g);
  out.push_back(&u);
}

TransformerBlock::TransformerBlock(std::size_t d_h, std::size_t h, std::size_t ffn_mult, std::mt19937_64& rng)
    : heads(h),
      ln1_g("head.block.ln1.gain", Tensor::filled({d_h}, 1.0)),
      ln1_b("head.block.ln1.bias", Tensor::zeros({d_h})),
      ln2_g("head.block.ln2.gain", Tensor::filled({d_h}, 1.0)),
      ln2_b("head.block.ln2.bias", Tensor::zeros({d_h})),
      wq("head.block.wq", d_h, d_h, true, rng),
      wk("head.block.wk", d_h, d_h, false, rng),
      wv("head.block.wv", d_h, d_h, true, rng),
      wo("head.block.wo", d_h, d_h, true, rng),
      ff1("head.block.ff1", d_h, ffn_mult * d_h, true, rng),
      ff2("head.block.ff2", ffn_mult * d_h, d_h, true, rng) {
  if (h == 0 || d_h % h != 0)
    throw ConfigError("transformer: width " + std::to_string(d_h) + " is not divisible by " + std::to_string(h) +
                      " heads");
}

Var TransformerBlock::operator()(Tape& t, Var x, std::size_t groups) {
  const std::size_t d = x.cols(), dh = d / heads;
  Var h = layer_norm_rows(x, t.param(ln1_g), t.param(ln1_b));
  Var q = wq(t, h), k = wk(t, h), v = wv(t, h);
  std::vector<Var> per_head;
  for (std::size_t i = 0; i < heads; ++i)
    per_head.push_back(grouped_attention(slice_cols(q, i * dh, dh), slice_cols(k, i * dh, dh),
                                         slice_cols(v, i * dh, dh), groups, 1.0 / std::sqrt(double(dh))));
  x = add(x, wo(t, heads == 1 ? per_head[0] : concat_cols(per_head)));
  Var h2 = layer_norm_rows(x, t.param(ln2_g), t.param(ln2_b));
  return add(x, ff2(t, gelu(ff1(t, h2))));
}

void TransformerBlock::collect(std::vector<Parameter*>& out) {
  for (auto* p : {&ln1_g, &ln1_b, &ln2_g, &ln2_b}) out.push_back(p);
  for (auto* l : {&wq, &wk, &wv, &wo, &ff1, &ff2}) l->collect(out);
}

FusionHead::FusionHead(const HeadConfig& cfg, std::mt19937_64& rng)
    : gate(cfg.d_h, rng),
      block(cfg.d_h, cfg.heads, cfg.ffn_mult, rng),
      classifier("head.classifier", cfg.d_h, cfg.classes, true, rng),
      cfg_(cfg) {}

Var FusionHead::logits(Tape& t, const std::vector<Var>& feats) {
  Tape::Scope scope(t, "head");
  auto g = gate(t, feats);
  last_gate_ = g.weights;
  const std::size_t b = feats[0].rows();
  Var z = block(t, g.tokens, b);
  return classifier(t, mean_groups(z, feats.size()));
}

void FusionHead::collect(std::vector<Parameter*>& out) {
  gate.collect(out);
  block.collect(out);
  classifier.collect(out);
}

}  // namespace cimdd::head
