#pragma once

// Backdoor deconfounding of the text modality against a lexical confounder.

#include <filesystem>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cimdd/layers.hpp"
#include "cimdd/tape.hpp"

namespace cimdd::lbdr {

/// N named word categories. A word may belong to several categories.
class ConfounderLexicon {
 public:
  ConfounderLexicon() = default;
  ConfounderLexicon(std::vector<std::string> names, std::vector<std::vector<std::string>> words);

  /// JSON object mapping category name -> list of words. Categories are kept
  /// in the object's key order (sorted).
  static ConfounderLexicon from_json(const nlohmann::json& j);
  static ConfounderLexicon load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<std::string>& words(std::size_t category) const { return words_.at(category); }
  /// Categories containing `word`; empty if none.
  const std::vector<std::size_t>& categories_of(const std::string& word) const;

 private:
  std::vector<std::string> names_;
  std::vector<std::vector<std::string>> words_;
  std::unordered_map<std::string, std::vector<std::size_t>> index_;
};

/// Per-category match counts for one sample.
struct CountVector {
  std::vector<double> counts;
};

/// Corpus-level category prior P(c).
struct LexiconPrior {
  std::vector<double> p;
};

/// Whitespace split, ASCII lowercase, ASCII punctuation stripped; empty tokens dropped.
std::vector<std::string> tokenize(std::string_view text);

/// counts[i] = occurrences of category-i words in `tokens` (tokens already lowercased).
CountVector count_matches(const std::vector<std::string>& tokens, const ConfounderLexicon& lexicon);

/// Category totals over the corpus normalized to a distribution; uniform when
/// no token matches anything.
LexiconPrior prior_from_corpus(const std::vector<std::vector<std::string>>& corpus, const ConfounderLexicon& lexicon);

struct LbdrConfig {
  std::size_t text_dim = 16;
  std::size_t dict_dim = 64;  // d_c
  std::size_t attn_dim = 64;  // d_m
  std::size_t out_dim = 64;
  /// Renormalize softmax_i * P(c_i) * C_i weights to sum to one.
  bool renormalize = false;
};

/// Deconfounded text feature T(x, c) = W [x ; E_c[g(c)]] where
/// E_c[g(c)] = sum_i softmax_i(q . k_i / sqrt(d_m)) * P(c_i) * C_i * D_c[i],
/// q = x W_q and k_i = C_i D_c[i] W_k.
class LbdrModule {
 public:
  LbdrModule() = default;
  LbdrModule(const LbdrConfig& cfg, std::size_t categories, std::mt19937_64& rng);

  /// x: [B x text_dim], counts: [B x N]. Returns [B x out_dim].
  Var forward(Tape& t, Var x, const Tensor& counts, const LexiconPrior& prior);
  /// The confounder expectation E_c[g(c)] alone, [B x dict_dim].
  Var confounder_expectation(Tape& t, Var x, const Tensor& counts, const LexiconPrior& prior);

  const LbdrConfig& config() const { return cfg_; }
  std::size_t categories() const { return dictionary.value.dim(0); }
  void collect(std::vector<Parameter*>& out);

  Parameter dictionary;  // D_c, [N x d_c]
  Linear query;          // W_q, no bias
  Linear key;            // W_k, no bias
  Linear fuse;           // W over [x ; E], no bias

 private:
  LbdrConfig cfg_;
};

}  // namespace cimdd::lbdr
