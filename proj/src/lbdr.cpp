#include "cimdd/lbdr.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <set>

#include "cimdd/error.hpp"

namespace cimdd::lbdr {

ConfounderLexicon::ConfounderLexicon(std::vector<std::string> names, std::vector<std::vector<std::string>> words)
    : names_(std::move(names)), words_(std::move(words)) {
  if (names_.size() != words_.size()) throw ConfigError("lexicon: category names and word lists differ in count");
  if (names_.empty()) throw ConfigError("lexicon: no categories");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (!seen.insert(names_[i]).second) throw ConfigError("lexicon: duplicate category '" + names_[i] + "'");
    if (words_[i].empty()) throw ConfigError("lexicon: category '" + names_[i] + "' has no words");
    std::set<std::string> in_cat;
    for (const auto& w : words_[i]) {
      for (char ch : w)
        if (std::isupper(static_cast<unsigned char>(ch)))
          throw ConfigError("lexicon: word '" + w + "' is not lowercase");
      if (in_cat.insert(w).second) index_[w].push_back(i);
    }
  }
}

ConfounderLexicon ConfounderLexicon::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("lexicon: expected a JSON object of category -> words");
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> words;
  try {
    for (const auto& [k, v] : j.items()) {
      names.push_back(k);
      words.push_back(v.get<std::vector<std::string>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("lexicon: ") + e.what());
  }
  return ConfounderLexicon(std::move(names), std::move(words));
}

ConfounderLexicon ConfounderLexicon::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open lexicon " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("lexicon " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json ConfounderLexicon::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < names_.size(); ++i) j[names_[i]] = words_[i];
  return j;
}

const std::vector<std::size_t>& ConfounderLexicon::categories_of(const std::string& word) const {
  static const std::vector<std::size_t> none;
  auto it = index_.find(word);
  return it == index_.end() ? none : it->second;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u))
      flush();
    else if (u < 128 && std::ispunct(u))
      continue;
    else
      cur.push_back(static_cast<char>(u < 128 ? std::tolower(u) : u));
  }
  flush();
  return out;
}

CountVector count_matches(const std::vector<std::string>& tokens, const ConfounderLexicon& lexicon) {
  CountVector c{std::vector<double>(lexicon.size(), 0.0)};
  for (const auto& tok : tokens)
    for (auto cat : lexicon.categories_of(tok)) c.counts[cat] += 1.0;
  return c;
}

LexiconPrior prior_from_corpus(const std::vector<std::vector<std::string>>& corpus, const ConfounderLexicon& lexicon) {
  std::vector<double> totals(lexicon.size(), 0.0);
  for (const auto& doc : corpus) {
    const auto c = count_matches(doc, lexicon);
    for (std::size_t i = 0; i < totals.size(); ++i) totals[i] += c.counts[i];
  }
  double grand = 0.0;
  for (double t : totals) grand += t;
  LexiconPrior prior{std::vector<double>(lexicon.size(), 1.0 / static_cast<double>(lexicon.size()))};
  if (grand > 0.0)
    for (std::size_t i = 0; i < totals.size(); ++i) prior.p[i] = totals[i] / grand;
  return prior;
}

// ---------------------------------------------------------------- module

LbdrModule::LbdrModule(const LbdrConfig& cfg, std::size_t categories, std::mt19937_64& rng)
    : dictionary("lbdr.dictionary", Tensor::randn({categories, cfg.dict_dim}, rng, 1.0 / std::sqrt(double(cfg.dict_dim)))),
      query("lbdr.w_q", cfg.text_dim, cfg.attn_dim, false, rng),
      key("lbdr.w_k", cfg.dict_dim, cfg.attn_dim, false, rng),
      fuse("lbdr.w", cfg.text_dim + cfg.dict_dim, cfg.out_dim, false, rng),
      cfg_(cfg) {
  if (categories == 0 || cfg.dict_dim == 0 || cfg.attn_dim == 0 || cfg.text_dim == 0 || cfg.out_dim == 0)
    throw ConfigError("lbdr: all dimensions must be positive");
}

Var LbdrModule::confounder_expectation(Tape& t, Var x, const Tensor& counts, const LexiconPrior& prior) {
  const std::size_t n = categories();
  if (x.cols() != cfg_.text_dim)
    throw DimensionError("lbdr: text features " + shape_str(x.shape()) + " do not have width " +
                         std::to_string(cfg_.text_dim));
  if (counts.cols() != n || counts.rows() != x.rows())
    throw DimensionError("lbdr: counts " + shape_str(counts.shape()) + " do not match batch " +
                         std::to_string(x.rows()) + " x " + std::to_string(n) + " categories");
  if (prior.p.size() != n) throw DimensionError("lbdr: prior length does not match category count");

  Tape::Scope scope(t, "lbdr");
  const std::size_t b = x.rows();
  Tensor count_prior({b, n});
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t i = 0; i < n; ++i) count_prior[r * n + i] = counts[r * n + i] * prior.p[i];
  Var c = t.constant(counts.reshaped({b, n}));

  Var d = t.param(dictionary);
  Var q = query(t, x);                             // [B x d_m]
  Var k = key(t, d);                               // [N x d_m], unscaled keys
  Var scores = mul(matmul_nt(q, k), c);            // row b, col i: C_bi (q_b . k_i)
  Var attn = softmax_rows(scale(scores, 1.0 / std::sqrt(double(cfg_.attn_dim))));
  Var weights = mul(attn, t.constant(std::move(count_prior)));
  if (cfg_.renormalize) weights = normalize_rows(weights);
  return matmul(weights, d);                       // sum_i w_i D_c[i]
}

Var LbdrModule::forward(Tape& t, Var x, const Tensor& counts, const LexiconPrior& prior) {
  Var e = confounder_expectation(t, x, counts, prior);
  Tape::Scope scope(t, "lbdr");
  return fuse(t, concat_cols({x, e}));
}

void LbdrModule::collect(std::vector<Parameter*>& out) {
  out.push_back(&dictionary);
  query.collect(out);
  key.collect(out);
  fuse.collect(out);
}

}  // namespace cimdd::lbdr
