#include "cimdd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cimdd/error.hpp"
#include "cimdd/tensor_io.hpp"

namespace cimdd::synth {

namespace {

void check_rho(const Rho& r, const char* what) {
  for (double v : {r.lsc, r.lvc, r.dccc})
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(what) + " must lie in [0, 1]");
}

Rho rho_from_json(const nlohmann::json& j) {
  if (j.is_number()) {
    const double v = j.get<double>();
    return {v, v, v};
  }
  Rho r;
  r.lsc = j.value("lsc", r.lsc);
  r.lvc = j.value("lvc", r.lvc);
  r.dccc = j.value("dccc", r.dccc);
  return r;
}

nlohmann::json rho_to_json(const Rho& r) { return {{"lsc", r.lsc}, {"lvc", r.lvc}, {"dccc", r.dccc}}; }

std::vector<double> random_unit(std::mt19937_64& rng, std::size_t d, const std::vector<double>* against) {
  std::normal_distribution<double> n01;
  for (;;) {
    std::vector<double> v(d);
    for (auto& x : v) x = n01(rng);
    if (against) {
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += v[i] * (*against)[i];
      for (std::size_t i = 0; i < d; ++i) v[i] -= dot * (*against)[i];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    return v;
  }
}

int agree(std::mt19937_64& rng, int y, double rho) {
  return std::bernoulli_distribution(rho)(rng) ? y : 1 - y;
}

void add_row(std::span<double> row, const std::vector<double>& dir, double a) {
  for (std::size_t i = 0; i < row.size(); ++i) row[i] += a * dir[i];
}

void add_noise(std::span<double> row, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  for (auto& x : row) x += n01(rng);
}

std::string category_word(std::size_t c, std::size_t w) {
  return c == 0 ? "deceptive" + std::to_string(w) : "cat" + std::to_string(c) + "w" + std::to_string(w);
}

Dataset generate_split(const GenConfig& cfg, const Directions& dirs, const Rho& rho, std::size_t n,
                       std::uint64_t split_id) {
  const auto& v = cfg.vocab;
  Dataset d;
  d.t_v = cfg.t_v;
  d.t_a = cfg.t_a;
  d.x_t = Tensor({n, cfg.d_t});
  d.x_i = Tensor({n, cfg.d_i});
  d.x_v = Tensor({n * cfg.t_v, cfg.d_v});
  d.x_a = Tensor({n * cfg.t_a, cfg.d_a});
  d.tokens.resize(n);
  d.labels.resize(n);
  d.latents.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Each sample draws from its own stream so generation order does not matter.
    std::seed_seq seq{std::uint64_t(cfg.seed), split_id, std::uint64_t(i)};
    std::mt19937_64 rng(seq);
    const int y = std::bernoulli_distribution(0.5)(rng) ? 1 : 0;
    const std::array<int, 3> z{agree(rng, y, rho.lsc), agree(rng, y, rho.lvc), agree(rng, y, rho.dccc)};
    const double ys = 2.0 * y - 1.0;
    d.labels[i] = y;
    d.latents[i] = z;

    auto xt = d.x_t.row_span(i);
    add_row(xt, dirs.causal[0], cfg.causal_snr * ys);
    add_row(xt, dirs.spurious[0], cfg.lsc_shift * (2.0 * z[LSC] - 1.0));
    add_noise(xt, rng);

    auto xi = d.x_i.row_span(i);
    add_row(xi, dirs.causal[1], cfg.causal_snr * ys);
    add_row(xi, dirs.spurious[1], cfg.lvc_shift * (2.0 * z[LVC] - 1.0));
    add_noise(xi, rng);

    const double couple = cfg.dccc_shift * (2.0 * z[DCCC] - 1.0);
    for (std::size_t s = 0; s < cfg.t_v; ++s) {
      auto row = d.x_v.row_span(i * cfg.t_v + s);
      add_row(row, dirs.causal[2], cfg.causal_snr * ys);
      add_row(row, dirs.spurious[2], couple);
      add_noise(row, rng);
    }
    for (std::size_t s = 0; s < cfg.t_a; ++s) {
      auto row = d.x_a.row_span(i * cfg.t_a + s);
      add_row(row, dirs.causal[3], cfg.causal_snr * ys);
      add_row(row, dirs.spurious[3], couple);
      add_noise(row, rng);
    }

    auto& toks = d.tokens[i];
    std::uniform_int_distribution<std::size_t> filler(0, v.filler_words - 1), word(0, v.words_per_category - 1);
    std::uniform_int_distribution<std::size_t> other(1, std::max<std::size_t>(v.categories, 2) - 1);
    std::bernoulli_distribution use_other(v.categories > 1 ? v.other_category_rate : 0.0);
    for (std::size_t k = 0; k < v.tokens_per_sample; ++k)
      toks.push_back(use_other(rng) ? category_word(other(rng), word(rng)) : "w" + std::to_string(filler(rng)));
    if (z[LSC] == 1)
      for (std::size_t k = 0; k < v.deceptive_tokens; ++k) toks.push_back(category_word(0, word(rng)));
    std::shuffle(toks.begin(), toks.end(), rng);
  }
  return d;
}

template <class F>
void write_lines(const std::filesystem::path& p, std::size_t n, F line) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  for (std::size_t i = 0; i < n; ++i) os << line(i).dump() << "\n";
}

std::vector<nlohmann::json> read_lines(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw DataError("cannot open " + p.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(is, line)) {
    ++no;
    if (line.empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(p.string() + " line " + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

Tensor rows_of(const Tensor& x, std::size_t t, const std::vector<std::size_t>& idx) {
  Tensor out({idx.size() * t, x.cols()});
  for (std::size_t k = 0; k < idx.size(); ++k)
    for (std::size_t s = 0; s < t; ++s) {
      auto src = x.row_span(idx[k] * t + s);
      std::copy(src.begin(), src.end(), out.row_span(k * t + s).begin());
    }
  return out;
}

}  // namespace

void GenConfig::validate() const {
  check_rho(rho_train, "rho_train");
  check_rho(rho_test, "rho_test");
  if (!(causal_snr >= 0.0) || !std::isfinite(causal_snr)) throw ConfigError("causal_snr must be finite and >= 0");
  for (std::size_t d : {d_t, d_i, d_v, d_a, t_v, t_a})
    if (d == 0) throw ConfigError("generator dims must be positive");
  for (std::size_t d : {d_t, d_i, d_v, d_a})
    if (d < 2) throw ConfigError("feature dims must be at least 2 to hold a causal and a spurious direction");
  if (vocab.categories == 0 || vocab.words_per_category == 0 || vocab.filler_words == 0)
    throw ConfigError("vocabulary sizes must be positive");
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig c;
  try {
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    if (j.contains("rho_train")) c.rho_train = rho_from_json(j["rho_train"]);
    if (j.contains("rho_test")) c.rho_test = rho_from_json(j["rho_test"]);
    c.causal_snr = j.value("causal_snr", c.causal_snr);
    c.d_t = j.value("d_t", c.d_t);
    c.d_i = j.value("d_i", c.d_i);
    c.d_v = j.value("d_v", c.d_v);
    c.d_a = j.value("d_a", c.d_a);
    c.t_v = j.value("t_v", c.t_v);
    c.t_a = j.value("t_a", c.t_a);
    c.lsc_shift = j.value("lsc_shift", c.lsc_shift);
    c.lvc_shift = j.value("lvc_shift", c.lvc_shift);
    c.dccc_shift = j.value("dccc_shift", c.dccc_shift);
    c.seed = j.value("seed", c.seed);
    if (j.contains("vocab")) {
      const auto& v = j["vocab"];
      c.vocab.categories = v.value("categories", c.vocab.categories);
      c.vocab.words_per_category = v.value("words_per_category", c.vocab.words_per_category);
      c.vocab.filler_words = v.value("filler_words", c.vocab.filler_words);
      c.vocab.tokens_per_sample = v.value("tokens_per_sample", c.vocab.tokens_per_sample);
      c.vocab.deceptive_tokens = v.value("deceptive_tokens", c.vocab.deceptive_tokens);
      c.vocab.other_category_rate = v.value("other_category_rate", c.vocab.other_category_rate);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json GenConfig::to_json() const {
  return {{"n_train", n_train},
          {"n_test", n_test},
          {"rho_train", rho_to_json(rho_train)},
          {"rho_test", rho_to_json(rho_test)},
          {"causal_snr", causal_snr},
          {"d_t", d_t},
          {"d_i", d_i},
          {"d_v", d_v},
          {"d_a", d_a},
          {"t_v", t_v},
          {"t_a", t_a},
          {"lsc_shift", lsc_shift},
          {"lvc_shift", lvc_shift},
          {"dccc_shift", dccc_shift},
          {"seed", seed},
          {"vocab",
           {{"categories", vocab.categories},
            {"words_per_category", vocab.words_per_category},
            {"filler_words", vocab.filler_words},
            {"tokens_per_sample", vocab.tokens_per_sample},
            {"deceptive_tokens", vocab.deceptive_tokens},
            {"other_category_rate", vocab.other_category_rate}}}};
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset d;
  d.t_v = t_v;
  d.t_a = t_a;
  for (auto i : idx)
    if (i >= size()) throw DataError("subset index " + std::to_string(i) + " out of range");
  d.x_t = rows_of(x_t, 1, idx);
  d.x_i = rows_of(x_i, 1, idx);
  d.x_v = rows_of(x_v, t_v, idx);
  d.x_a = rows_of(x_a, t_a, idx);
  for (auto i : idx) {
    d.tokens.push_back(tokens[i]);
    d.labels.push_back(labels[i]);
    d.latents.push_back(latents[i]);
  }
  return d;
}

Directions make_directions(const GenConfig& cfg) {
  std::seed_seq seq{std::uint64_t(cfg.seed), std::uint64_t(0xd1'7ec7)};
  std::mt19937_64 rng(seq);
  Directions d;
  const std::array<std::size_t, 4> dims{cfg.d_t, cfg.d_i, cfg.d_v, cfg.d_a};
  for (std::size_t m = 0; m < 4; ++m) {
    d.causal[m] = random_unit(rng, dims[m], nullptr);
    d.spurious[m] = random_unit(rng, dims[m], &d.causal[m]);
  }
  return d;
}

lbdr::ConfounderLexicon make_lexicon(const VocabConfig& v) {
  std::vector<std::string> names;
  std::vector<std::vector<std::string>> words;
  for (std::size_t c = 0; c < v.categories; ++c) {
    names.push_back(c == 0 ? "deceptive" : "cat" + std::to_string(c));
    words.emplace_back();
    for (std::size_t w = 0; w < v.words_per_category; ++w) words.back().push_back(category_word(c, w));
  }
  return lbdr::ConfounderLexicon(std::move(names), std::move(words));
}

Splits generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const auto dirs = make_directions(cfg);
  return {generate_split(cfg, dirs, cfg.rho_train, cfg.n_train, 1),
          generate_split(cfg, dirs, cfg.rho_test, cfg.n_test, 2)};
}

double bayes_accuracy(const GenConfig& cfg, const std::string& split) {
  if (split != "train" && split != "test") throw ConfigError("split must be 'train' or 'test'");
  // The causal projections are 2 + t_v + t_a independent N(snr * ys, 1) draws;
  // their sum has mean +-snr*k and sd sqrt(k).
  const double k = 2.0 + double(cfg.t_v) + double(cfg.t_a);
  return 0.5 * std::erfc(-cfg.causal_snr * std::sqrt(k) / std::sqrt(2.0));
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t n = d.size();
  write_lines(dir / "tokens.jsonl", n, [&](std::size_t i) { return nlohmann::json{{"tokens", d.tokens[i]}}; });
  write_lines(dir / "labels.jsonl", n, [&](std::size_t i) {
    return nlohmann::json{
        {"label", d.labels[i]}, {"lsc", d.latents[i][0]}, {"lvc", d.latents[i][1]}, {"dccc", d.latents[i][2]}};
  });
  write_tensor(d.x_t, dir / "x_t.cimd");
  write_tensor(d.x_i, dir / "x_i.cimd");
  write_tensor(d.x_v.reshaped({n, d.t_v, d.x_v.cols()}), dir / "x_v.cimd");
  write_tensor(d.x_a.reshaped({n, d.t_a, d.x_a.cols()}), dir / "x_a.cimd");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  for (const auto& j : read_lines(dir / "tokens.jsonl")) d.tokens.push_back(j.at("tokens").get<std::vector<std::string>>());
  for (const auto& j : read_lines(dir / "labels.jsonl")) {
    const int y = j.at("label").get<int>();
    if (y != 0 && y != 1) throw DataError("label " + std::to_string(y) + " is not 0 or 1");
    d.labels.push_back(y);
    d.latents.push_back({j.value("lsc", -1), j.value("lvc", -1), j.value("dccc", -1)});
  }
  const std::size_t n = d.labels.size();
  if (d.tokens.size() != n)
    throw DataError(dir.string() + ": " + std::to_string(d.tokens.size()) + " token rows but " + std::to_string(n) +
                    " labels");
  d.x_t = read_tensor(dir / "x_t.cimd");
  d.x_i = read_tensor(dir / "x_i.cimd");
  Tensor v = read_tensor(dir / "x_v.cimd"), a = read_tensor(dir / "x_a.cimd");
  if (d.x_t.ndim() != 2 || d.x_i.ndim() != 2 || v.ndim() != 3 || a.ndim() != 3)
    throw DataError(dir.string() + ": modality tensors must be [n x d] (text, image) and [n x t x d] (video, audio)");
  for (std::size_t m : {d.x_t.dim(0), d.x_i.dim(0), v.dim(0), a.dim(0)})
    if (m != n) throw DataError(dir.string() + ": modality tensor has " + std::to_string(m) + " rows, expected " +
                                std::to_string(n));
  d.t_v = v.dim(1);
  d.t_a = a.dim(1);
  d.x_v = v.reshaped({n * d.t_v, v.dim(2)});
  d.x_a = a.reshaped({n * d.t_a, a.dim(2)});
  return d;
}

void save_splits(const Splits& s, const GenConfig& cfg, const std::filesystem::path& dir) {
  save_dataset(s.train, dir / "train");
  save_dataset(s.test, dir / "test");
  std::ofstream lex(dir / "lexicon.json");
  lex << make_lexicon(cfg.vocab).to_json().dump(2) << "\n";
  std::ofstream gc(dir / "gen_config.json");
  gc << cfg.to_json().dump(2) << "\n";
}

}  // namespace cimdd::synth
