#include "cimdd/experiment.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "cimdd/error.hpp"
#include "cimdd/tensor_io.hpp"

namespace cimdd {

void ExperimentConfig::validate() const {
  model.validate();
  gen.validate();
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (!(optim.lr >= 0.0) || !std::isfinite(optim.lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in [0, 1)");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

namespace {

// Every key in `j` must exist in `known`, recursively through objects.
void reject_unknown(const nlohmann::json& j, const nlohmann::json& known, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("unknown config key '" + where + k + "'");
    if (v.is_object() && known[k].is_object()) reject_unknown(v, known[k], where + k + ".");
  }
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  reject_unknown(j, c.to_json(), "");
  try {
    c.data_dir = j.value("data_dir", c.data_dir);
    c.lexicon = j.value("lexicon", c.lexicon);
    if (j.contains("gen")) c.gen = synth::GenConfig::from_json(j["gen"]);
    if (j.contains("model")) c.model = ModelConfig::from_json(j["model"]);
    if (j.contains("optim")) {
      const auto& o = j["optim"];
      c.optim.lr = o.value("lr", c.optim.lr);
      c.optim.beta1 = o.value("beta1", c.optim.beta1);
      c.optim.beta2 = o.value("beta2", c.optim.beta2);
      c.optim.eps = o.value("eps", c.optim.eps);
      c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.seed = j.value("seed", c.seed);
    c.seeds = j.value("seeds", c.seeds);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  // Input widths follow the generator unless the model block sets them.
  if (!j.contains("model") || !j["model"].contains("d_t")) c.model.d_t = c.gen.d_t;
  if (!j.contains("model") || !j["model"].contains("d_i")) c.model.d_i = c.gen.d_i;
  if (!j.contains("model") || !j["model"].contains("d_v")) c.model.d_v = c.gen.d_v;
  if (!j.contains("model") || !j["model"].contains("d_a")) c.model.d_a = c.gen.d_a;
  c.validate();
  return c;
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"data_dir", data_dir},
          {"lexicon", lexicon},
          {"gen", gen.to_json()},
          {"model", model.to_json()},
          {"optim",
           {{"lr", optim.lr},
            {"beta1", optim.beta1},
            {"beta2", optim.beta2},
            {"eps", optim.eps},
            {"weight_decay", optim.weight_decay}}},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patience", patience},
          {"val_fraction", val_fraction},
          {"seed", seed},
          {"seeds", seeds},
          {"out_dir", out_dir}};
}

ExperimentData load_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  if (cfg.data_dir.empty()) {
    auto s = synth::generate_dataset(cfg.gen);
    d.train = std::move(s.train);
    d.test = std::move(s.test);
    d.lexicon = cfg.lexicon.empty() ? synth::make_lexicon(cfg.gen.vocab) : lbdr::ConfounderLexicon::load(cfg.lexicon);
  } else {
    const std::filesystem::path dir(cfg.data_dir);
    d.train = synth::load_dataset(dir / "train");
    d.test = synth::load_dataset(dir / "test");
    d.lexicon = lbdr::ConfounderLexicon::load(cfg.lexicon.empty() ? dir / "lexicon.json"
                                                                   : std::filesystem::path(cfg.lexicon));
  }
  for (const auto* s : {&d.train, &d.test}) {
    if (s->x_t.cols() != cfg.model.d_t || s->x_i.cols() != cfg.model.d_i || s->x_v.cols() != cfg.model.d_v ||
        s->x_a.cols() != cfg.model.d_a)
      throw DimensionError("dataset feature widths do not match the model config");
  }
  return d;
}

namespace {

std::uint64_t index_hash(const std::vector<std::size_t>& idx) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto i : idx)
    for (int b = 0; b < 8; ++b) h = (h ^ ((std::uint64_t(i) >> (8 * b)) & 0xff)) * 1099511628211ULL;
  return h;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw DataError("cannot write " + p.string());
  os << s;
}

std::string csv_line(const std::vector<std::string>& cells) {
  std::string s;
  for (std::size_t i = 0; i < cells.size(); ++i) s += (i ? "," : "") + cells[i];
  return s + "\n";
}

}  // namespace

Metrics evaluate(Model& model, const synth::Dataset& d, const Tensor& counts) {
  std::vector<int> pred;
  pred.reserve(d.size());
  const std::size_t chunk = 256;
  for (std::size_t s = 0; s < d.size(); s += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, d.size() - s));
    std::iota(idx.begin(), idx.end(), s);
    auto p = model.predict(make_batch(d, counts, idx));
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return evaluate_metrics(pred, d.labels);
}

TrainResult run_train(const ExperimentConfig& cfg, const ExperimentData& data) {
  const std::size_t n_fit = data.train.size() - std::size_t(std::floor(double(data.train.size()) * cfg.val_fraction));
  std::vector<std::size_t> fit(n_fit);
  std::iota(fit.begin(), fit.end(), 0);
  return run_train(cfg, data, build_buffers(cfg.model, data.train.subset(fit), data.lexicon, cfg.seed));
}

TrainResult run_train(const ExperimentConfig& cfg, const ExperimentData& data, const Buffers& buffers) {
  cfg.validate();
  const std::size_t n = data.train.size();
  const std::size_t n_val = std::size_t(std::floor(double(n) * cfg.val_fraction));
  const std::size_t n_fit = n - n_val;
  if (n_fit == 0) throw DataError("training split is empty after the validation hold-out");
  if (cfg.batch_size > n_fit)
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds the " + std::to_string(n_fit) +
                      " training rows");
  std::vector<std::size_t> fit_idx(n_fit), val_idx(n_val);
  std::iota(fit_idx.begin(), fit_idx.end(), 0);
  std::iota(val_idx.begin(), val_idx.end(), n_fit);
  const synth::Dataset fit = data.train.subset(fit_idx);
  const synth::Dataset val = n_val ? data.train.subset(val_idx) : fit;
  const Tensor fit_counts = count_matrix(fit, data.lexicon), val_counts = count_matrix(val, data.lexicon);
  const Tensor test_counts = count_matrix(data.test, data.lexicon);

  Model model(cfg.model, buffers, data.lexicon.size(), cfg.seed, &fit);
  std::optional<AdamW> opt;
  if (cfg.optim.lr > 0.0) opt.emplace(model.parameters(), cfg.optim);

  std::filesystem::path out;
  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    out = cfg.out_dir;
    std::filesystem::create_directories(out);
    log.open(out / "train_log.jsonl");
    if (!log) throw DataError("cannot write " + (out / "train_log.jsonl").string());
    log << nlohmann::json{{"event", "split"},
                          {"rule", "by sample index: first rows train, last rows validation; test split separate"},
                          {"train", n_fit},
                          {"validation", n_val},
                          {"validation_source", n_val ? "held-out rows" : "training rows"},
                          {"test", data.test.size()}}
               .dump()
        << "\n";
  }

  TrainResult res;
  std::vector<Tensor> best(model.parameters().size());
  auto snapshot = [&] {
    for (std::size_t i = 0; i < best.size(); ++i) best[i] = model.parameters()[i]->value;
  };
  snapshot();
  double best_acc = -1.0;
  std::size_t since_best = 0;
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  std::vector<std::size_t> order(n_fit);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n_fit; s += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + s, order.begin() + std::min(n_fit, s + cfg.batch_size));
      auto abort = [&](const std::string& what) {
        char hash[24];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(index_hash(idx)));
        const std::string msg = what + " at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(res.steps + 1) + ", batch hash " + hash;
        if (log) log << nlohmann::json{{"event", "abort"}, {"reason", msg}}.dump() << "\n";
        throw NumericError(msg);
      };
      Tape t;
      Var loss;
      double l = 0.0;
      try {
        Batch b = make_batch(fit, fit_counts, idx);
        loss = model.loss(t, b);
        l = loss.value()[0];
        if (!std::isfinite(l)) abort("non-finite loss");
        t.backward(loss);
      } catch (const NumericError& e) {
        if (std::string_view(e.what()).find("batch hash") != std::string_view::npos) throw;
        abort(e.what());
      }
      if (opt) opt->step();
      for (auto* p : model.parameters()) p->zero_grad();
      loss_sum += l;
      ++batches;
      ++res.steps;
    }
    res.epoch_loss.push_back(loss_sum / double(batches));
    res.epochs_run = epoch;
    Metrics vm = evaluate(model, val, val_counts);
    const bool improved = vm.accuracy > best_acc;
    if (improved) {
      best_acc = vm.accuracy;
      res.best_epoch = epoch;
      res.val = vm;
      since_best = 0;
      snapshot();
    } else {
      ++since_best;
    }
    if (log)
      log << nlohmann::json{{"event", "epoch"},
                            {"epoch", epoch},
                            {"train_loss", res.epoch_loss.back()},
                            {"val", vm.to_json()},
                            {"best", improved}}
                 .dump()
          << "\n";
    if (cfg.patience > 0 && since_best >= cfg.patience) break;
  }

  for (std::size_t i = 0; i < best.size(); ++i) model.parameters()[i]->value = best[i];
  res.test = evaluate(model, data.test, test_counts);
  res.train = evaluate(model, fit, fit_counts);

  if (!out.empty()) {
    const auto ck = out / "checkpoint";
    model.save_parameters(ck);
    buffers.save(ck / "buffers");
    auto saved = cfg.to_json();
    saved.erase("out_dir");  // keeps checkpoints relocatable and byte-comparable
    write_text(ck / "config.json", saved.dump(2) + "\n");
    nlohmann::json m{{"best_epoch", res.best_epoch},
                     {"epochs_run", res.epochs_run},
                     {"steps", res.steps},
                     {"train", res.train.to_json()},
                     {"validation", res.val.to_json()},
                     {"test", res.test.to_json()}};
    write_text(out / "metrics.json", m.dump(2) + "\n");
    std::vector<std::string> head{"split"};
    for (const auto& c : Metrics::csv_columns()) head.push_back(c);
    std::string csv = csv_line(head);
    for (auto [name, mm] : {std::pair{"train", &res.train}, {"validation", &res.val}, {"test", &res.test}}) {
      std::vector<std::string> row{name};
      for (const auto& v : mm->csv_values()) row.push_back(v);
      csv += csv_line(row);
    }
    write_text(out / "metrics.csv", csv);
    log << nlohmann::json{{"event", "done"}, {"best_epoch", res.best_epoch}, {"test", res.test.to_json()}}.dump()
        << "\n";
  }
  return res;
}

Metrics evaluate_checkpoint(const std::filesystem::path& run_dir, const ExperimentData& data) {
  const auto ck = run_dir / "checkpoint";
  std::ifstream is(ck / "config.json");
  if (!is) throw DataError("missing " + (ck / "config.json").string());
  ExperimentConfig cfg;
  try {
    cfg = ExperimentConfig::from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint config: ") + e.what());
  }
  Buffers buf = Buffers::load(ck / "buffers");
  Model model(cfg.model, buf, data.lexicon.size(), cfg.seed);
  model.load_parameters(ck);
  return evaluate(model, data.test, count_matrix(data.test, data.lexicon));
}

std::vector<std::pair<std::string, double>> AblationTable::mean_accuracy() const {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& v : ablation_variants()) {
    double s = 0.0;
    std::size_t k = 0;
    for (const auto& r : rows)
      if (r.variant == v) s += r.result.test.accuracy, ++k;
    if (k) out.emplace_back(v, s / double(k));
  }
  return out;
}

AblationTable run_ablation(const ExperimentConfig& cfg, const ExperimentData& data,
                           const std::vector<std::string>& variants) {
  AblationTable table;
  const std::size_t n_fit =
      data.train.size() - std::size_t(std::floor(double(data.train.size()) * cfg.val_fraction));
  std::vector<std::size_t> fit(n_fit);
  std::iota(fit.begin(), fit.end(), 0);
  const synth::Dataset fit_data = data.train.subset(fit);
  for (auto seed : cfg.seeds) {
    const Buffers buf = build_buffers(cfg.model, fit_data, data.lexicon, seed);
    for (const auto& v : variants) {
      ExperimentConfig c = cfg;
      c.model = with_variant(cfg.model, v);
      c.seed = seed;
      c.out_dir = cfg.out_dir.empty() ? ""
                                      : (std::filesystem::path(cfg.out_dir) / v / ("seed_" + std::to_string(seed))).string();
      table.rows.push_back({v, seed, run_train(c, data, buf)});
    }
  }
  if (!cfg.out_dir.empty()) {
    const std::filesystem::path out(cfg.out_dir);
    std::filesystem::create_directories(out);
    std::vector<std::string> head{"variant", "seed", "best_epoch"};
    for (const auto& c : Metrics::csv_columns()) head.push_back(c);
    std::string csv = csv_line(head);
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : table.rows) {
      std::vector<std::string> row{r.variant, std::to_string(r.seed), std::to_string(r.result.best_epoch)};
      for (const auto& v : r.result.test.csv_values()) row.push_back(v);
      csv += csv_line(row);
      rows.push_back({{"variant", r.variant},
                      {"seed", r.seed},
                      {"best_epoch", r.result.best_epoch},
                      {"validation", r.result.val.to_json()},
                      {"test", r.result.test.to_json()}});
    }
    nlohmann::json means = nlohmann::json::object();
    for (const auto& [v, acc] : table.mean_accuracy()) means[v] = acc;
    write_text(out / "ablation.csv", csv);
    write_text(out / "ablation.json", nlohmann::json{{"rows", rows}, {"mean_test_accuracy", means}}.dump(2) + "\n");
  }
  return table;
}

ModelConfig gradcheck_model_config() {
  ModelConfig c;
  c.d_t = c.d_i = c.d_v = c.d_a = 3;
  c.branch_dim = 4;
  c.lexicon_dim = 3;
  c.lexicon_attn_dim = 3;
  c.fuse_dim = 3;
  c.vfdr_dict = 4;
  c.vfdr_mediators = 3;
  c.joint_dict = 3;
  c.cjdr_mediators = 2;
  c.d_h = 4;
  c.heads = 2;
  return c;
}

GradCheckReport pipeline_grad_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch,
                                    const GradCheckOptions& opts) {
  synth::GenConfig g;
  g.n_train = std::max<std::size_t>({cfg.vfdr_dict, cfg.vfdr_mediators, cfg.joint_dict, cfg.cjdr_mediators, batch}) + 8;
  g.n_test = 1;
  g.d_t = cfg.d_t;
  g.d_i = cfg.d_i;
  g.d_v = cfg.d_v;
  g.d_a = cfg.d_a;
  g.t_v = 2;
  g.t_a = 3;
  g.vocab.categories = 4;
  g.vocab.words_per_category = 2;
  g.vocab.filler_words = 5;
  g.vocab.tokens_per_sample = 6;
  g.vocab.other_category_rate = 0.5;
  g.seed = seed;
  auto data = synth::generate_dataset(g);
  auto lex = synth::make_lexicon(g.vocab);
  Buffers buf = build_buffers(cfg, data.train, lex, seed);
  Model model(cfg, buf, lex.size(), seed, &data.train);
  std::vector<std::size_t> idx(batch);
  std::iota(idx.begin(), idx.end(), 0);
  Batch b = make_batch(data.train, count_matrix(data.train, lex), idx);
  return grad_check([&](Tape& t) { return model.loss(t, b); }, model.parameters(), opts);
}

}  // namespace cimdd
