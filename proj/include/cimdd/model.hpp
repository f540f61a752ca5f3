#pragma once

// The full classifier: three deconfounding branches (or their raw stand-ins)
// feeding the gated fusion head.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cimdd/cjdr.hpp"
#include "cimdd/head.hpp"
#include "cimdd/kmeans.hpp"
#include "cimdd/lbdr.hpp"
#include "cimdd/synth.hpp"
#include "cimdd/vfdr.hpp"

namespace cimdd {

struct ModelConfig {
  // input widths
  std::size_t d_t = 16, d_i = 16, d_v = 16, d_a = 16;
  // branch widths
  std::size_t branch_dim = 64;
  std::size_t lexicon_dim = 64;  // d_c
  std::size_t lexicon_attn_dim = 64;  // d_m
  std::size_t fuse_dim = 64;
  // dictionaries
  std::size_t vfdr_dict = 128, vfdr_mediators = 64;
  std::size_t joint_dict = 128, cjdr_mediators = 64;
  std::size_t kmeans_iters = 100;
  DictMode dict_mode = DictMode::Sample;
  bool lbdr_renorm = false;
  // head
  std::size_t d_h = 64, heads = 4;
  // enabled modules; a disabled one is replaced by its projected raw feature
  bool lbdr = true, vfdr = true, cjdr = true;

  void validate() const;
  static ModelConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// Ablation variant by name: full, no_lbdr, no_vfdr, no_cjdr, no_ci.
ModelConfig with_variant(ModelConfig cfg, const std::string& variant);
const std::vector<std::string>& ablation_variants();

/// One minibatch in model layout.
struct Batch {
  Tensor x_t, counts, x_i, x_v, x_a;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

/// Lexicon counts per sample, [n x N].
Tensor count_matrix(const synth::Dataset& d, const lbdr::ConfounderLexicon& lexicon);
Batch make_batch(const synth::Dataset& d, const Tensor& counts, const std::vector<std::size_t>& idx);

/// Data-derived, non-trainable state built from the training split.
struct Buffers {
  lbdr::LexiconPrior prior;
  FeatureDictionary vfdr_dict;
  Tensor vfdr_mediators;  // initial values
  cjdr::JointDictionary joint;

  void save(const std::filesystem::path& dir) const;
  static Buffers load(const std::filesystem::path& dir);
};

Buffers build_buffers(const ModelConfig& cfg, const synth::Dataset& train, const lbdr::ConfounderLexicon& lexicon,
                      std::uint64_t seed);

/// Seed for a named component; identical across ablation variants.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& component);

class Model {
 public:
  /// Parameters are initialized from `seed`, one stream per component. If CJDR
  /// is enabled its mediator bank is set from `train`.
  Model(const ModelConfig& cfg, const Buffers& buffers, std::size_t categories, std::uint64_t seed,
        const synth::Dataset* train = nullptr);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// [B x 2] logits.
  Var logits(Tape& t, const Batch& b);
  Var loss(Tape& t, const Batch& b);
  /// Argmax predictions without keeping a tape around.
  std::vector<int> predict(const Batch& b);

  /// Every trainable parameter in a fixed order.
  const std::vector<Parameter*>& parameters() const { return params_; }
  const ModelConfig& config() const { return cfg_; }
  /// Gate weights of the last logits() call, [B x 3].
  Tensor last_gate() const { return head_.last_gate().value(); }

  void save_parameters(const std::filesystem::path& dir) const;
  void load_parameters(const std::filesystem::path& dir);

 private:
  ModelConfig cfg_;
  lbdr::LexiconPrior prior_;
  lbdr::LbdrModule lbdr_;
  vfdr::VfdrModule vfdr_;
  cjdr::CjdrModule cjdr_;
  Linear proj_t_, proj_i_, proj_av_;
  head::FusionHead head_;
  std::vector<Parameter*> params_;
};

}  // namespace cimdd
