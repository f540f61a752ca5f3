#pragma once

// Synthetic multimodal benchmark with planted lexical, visual and cross-modal
// confounders.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cimdd/lbdr.hpp"
#include "cimdd/tensor.hpp"

namespace cimdd::synth {

/// P(confounder latent agrees with Y), per confounder.
struct Rho {
  double lsc = 0.5, lvc = 0.5, dccc = 0.5;
};

struct VocabConfig {
  std::size_t categories = 20;          // N; category 0 is the deceptive one
  std::size_t words_per_category = 8;
  std::size_t filler_words = 200;
  std::size_t tokens_per_sample = 16;
  std::size_t deceptive_tokens = 3;     // injected when the lexical latent is on
  double other_category_rate = 0.15;    // chance a position holds a neutral lexicon word
};

struct GenConfig {
  std::size_t n_train = 8000, n_test = 2000;
  Rho rho_train{0.9, 0.9, 0.9};
  Rho rho_test{0.1, 0.1, 0.1};
  double causal_snr = 0.405;
  std::size_t d_t = 16, d_i = 16, d_v = 16, d_a = 16, t_v = 4, t_a = 4;
  /// Magnitudes of the spurious shifts (text, image, video/audio).
  double lsc_shift = 1.0, lvc_shift = 1.0, dccc_shift = 1.0;
  VocabConfig vocab;
  std::uint64_t seed = 0;

  void validate() const;
  static GenConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

enum Confounder : std::size_t { LSC = 0, LVC = 1, DCCC = 2 };

/// n samples in structure-of-arrays form.
struct Dataset {
  std::vector<std::vector<std::string>> tokens;
  Tensor x_t;  // [n x d_t]
  Tensor x_i;  // [n x d_i]
  Tensor x_v;  // [n*t_v x d_v]
  Tensor x_a;  // [n*t_a x d_a]
  std::vector<int> labels;
  std::vector<std::array<int, 3>> latents;  // planted, diagnostics only
  std::size_t t_v = 1, t_a = 1;

  std::size_t size() const { return labels.size(); }
  /// Rows `idx` of every field, in that order.
  Dataset subset(const std::vector<std::size_t>& idx) const;
};

/// Fixed unit directions of the generator. causal[m] and spurious[m] are
/// orthonormal for each modality m in {text, image, video, audio}.
struct Directions {
  std::array<std::vector<double>, 4> causal, spurious;
};

Directions make_directions(const GenConfig& cfg);
lbdr::ConfounderLexicon make_lexicon(const VocabConfig& v);

struct Splits {
  Dataset train, test;
};

Splits generate_dataset(const GenConfig& cfg);

/// Accuracy of the Bayes rule that sees only the causal components:
/// Phi(causal_snr * sqrt(2 + t_v + t_a)). The split does not matter since the
/// causal mechanism is shared.
double bayes_accuracy(const GenConfig& cfg, const std::string& split = "test");

/// Writes tokens.jsonl, x_t/x_i/x_v/x_a.cimd and labels.jsonl under `dir`.
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// `dir`/train, `dir`/test, `dir`/lexicon.json and `dir`/gen_config.json.
void save_splits(const Splits& s, const GenConfig& cfg, const std::filesystem::path& dir);

}  // namespace cimdd::synth
