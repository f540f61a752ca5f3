// Command-line entry points: gen, cluster, train, eval, ablate, gradcheck, oracle.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "cimdd/error.hpp"
#include "cimdd/experiment.hpp"
#include "cimdd/scm.hpp"

using namespace cimdd;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// "--a.b value" pairs left over by CLI11, applied on top of the config file.
void apply_overrides(json& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    std::string key = extras[i];
    if (key.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + key + "'");
    key = key.substr(2);
    std::string value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw ConfigError("override --" + key + " has no value");
      value = extras[++i];
    }
    json v = json::parse(value, nullptr, false);
    if (v.is_discarded()) v = value;
    json* node = &cfg;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
      if (!node->contains(parts[k]) || !(*node)[parts[k]].is_object()) (*node)[parts[k]] = json::object();
      node = &(*node)[parts[k]];
    }
    (*node)[parts.back()] = v;
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& extras) {
  json j = path.empty() ? json::object() : read_json(path);
  apply_overrides(j, extras);
  return ExperimentConfig::from_json(j);
}

void require_out(const ExperimentConfig& cfg, const char* cmd) {
  if (cfg.out_dir.empty()) throw ConfigError(std::string(cmd) + " needs out_dir (config key or --out_dir)");
}

int cmd_gen(const ExperimentConfig& cfg) {
  require_out(cfg, "gen");
  auto s = synth::generate_dataset(cfg.gen);
  synth::save_splits(s, cfg.gen, cfg.out_dir);
  std::cout << json{{"out_dir", cfg.out_dir},
                    {"train", s.train.size()},
                    {"test", s.test.size()},
                    {"bayes_accuracy", synth::bayes_accuracy(cfg.gen)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_cluster(const ExperimentConfig& cfg) {
  require_out(cfg, "cluster");
  auto data = load_data(cfg);
  const std::size_t n_fit =
      data.train.size() - std::size_t(std::floor(double(data.train.size()) * cfg.val_fraction));
  std::vector<std::size_t> fit(n_fit);
  std::iota(fit.begin(), fit.end(), 0);
  auto buf = build_buffers(cfg.model, data.train.subset(fit), data.lexicon, cfg.seed);
  buf.save(cfg.out_dir);
  std::cout << json{{"out_dir", cfg.out_dir},
                    {"vfdr_dict", buf.vfdr_dict.size()},
                    {"joint_dict", buf.joint.size()},
                    {"dict_mode", to_string(buf.vfdr_dict.mode)}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
  auto data = load_data(cfg);
  auto r = run_train(cfg, data);
  std::cout << json{{"best_epoch", r.best_epoch}, {"validation", r.val.to_json()}, {"test", r.test.to_json()}}.dump()
            << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, const std::string& run_dir) {
  auto data = load_data(cfg);
  auto m = evaluate_checkpoint(run_dir.empty() ? cfg.out_dir : run_dir, data);
  std::cout << m.to_json().dump() << "\n";
  return 0;
}

int cmd_ablate(const ExperimentConfig& cfg) {
  auto data = load_data(cfg);
  auto t = run_ablation(cfg, data);
  json means = json::object();
  for (const auto& [v, a] : t.mean_accuracy()) means[v] = a;
  std::cout << json{{"mean_test_accuracy", means}}.dump() << "\n";
  return 0;
}

int cmd_gradcheck(const json& overrides, std::uint64_t seed, double tol) {
  json base = gradcheck_model_config().to_json();
  base.update(overrides);
  auto r = pipeline_grad_check(ModelConfig::from_json(base), seed);
  json entries = json::array();
  for (const auto& e : r.entries) entries.push_back({{"name", e.name}, {"max_rel_error", e.max_rel_error}, {"checked", e.checked}});
  const bool ok = r.max_error() <= tol;
  std::cout << json{{"max_rel_error", r.max_error()}, {"tolerance", tol}, {"pass", ok}, {"entries", entries}}.dump()
            << "\n";
  return ok ? 0 : 1;
}

scm::Assignment assignment(const json& j) {
  scm::Assignment a;
  if (j.is_null()) return a;
  for (const auto& [k, v] : j.items()) a[k] = v.get<std::size_t>();
  return a;
}

int cmd_oracle(const std::string& path) {
  json j = read_json(path);
  scm::DiscreteSCM model = scm::DiscreteSCM::from_json(j);
  json out = json::array();
  if (!j.contains("queries")) throw QueryError("SCM file has no \"queries\" section");
  for (const auto& q : j["queries"]) {
    const std::string type = q.value("type", "interventional");
    json r{{"type", type}};
    try {
      if (type == "interventional") {
        scm::InterventionQuery iq{q.at("target").get<std::string>(), assignment(q.value("do", json())),
                                  assignment(q.value("given", json()))};
        r["distribution"] = scm::evaluate(model, iq);
      } else if (type == "backdoor") {
        const auto x = q.at("treatment").get<std::string>(), y = q.at("outcome").get<std::string>();
        r["adjusted"] = scm::backdoor_adjust(model, x, y, q.at("adjust").get<std::vector<std::string>>());
        r["enumerated"] = scm::interventional_by_enumeration(model, {x}, y);
      } else if (type == "frontdoor") {
        const auto x = q.at("treatment").get<std::string>(), y = q.at("outcome").get<std::string>();
        r["adjusted"] = scm::frontdoor_adjust(model, x, q.at("mediator").get<std::string>(), y);
        r["enumerated"] = scm::interventional_by_enumeration(model, {x}, y);
      } else if (type == "joint") {
        const auto t = q.at("treatments").get<std::vector<std::string>>();
        if (t.size() != 2) throw QueryError("joint query needs exactly two treatments");
        const auto y = q.at("outcome").get<std::string>();
        r["adjusted"] = scm::joint_intervention_adjust(model, t[0], t[1], q.at("mediator").get<std::string>(), y);
        r["enumerated"] = scm::interventional_by_enumeration(model, t, y);
      } else {
        throw QueryError("unknown query type '" + type + "'");
      }
    } catch (const json::exception& e) {
      throw QueryError(std::string("malformed query: ") + e.what());
    }
    out.push_back(r);
  }
  std::cout << json{{"results", out}}.dump() << "\n";
  return 0;
}

void fail(const std::string& kind, const std::string& msg) {
  std::cerr << json{{"error", kind}, {"message", msg}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal-intervention multimodal deconfounding toolkit"};
  app.require_subcommand(1);
  std::string config_path, run_dir, scm_path;
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;

  auto add_cfg = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Experiment config JSON");
    sub->allow_extras();
    return sub;
  };
  auto* gen = add_cfg(app.add_subcommand("gen", "Write a synthetic dataset to out_dir"));
  auto* cluster = add_cfg(app.add_subcommand("cluster", "Build feature dictionaries into out_dir"));
  auto* train = add_cfg(app.add_subcommand("train", "Train one model"));
  auto* eval = add_cfg(app.add_subcommand("eval", "Evaluate a trained run on the test split"));
  eval->add_option("--run", run_dir, "Run directory holding checkpoint/ (default: out_dir)");
  auto* ablate = add_cfg(app.add_subcommand("ablate", "Train and evaluate every ablation variant"));
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full pipeline");
  gc->add_option("--config", config_path, "Model config JSON overriding the small check widths");
  gc->add_option("--seed", gc_seed, "Seed");
  gc->add_option("--tolerance", gc_tol, "Maximum relative error");
  gc->allow_extras();
  auto* oracle = app.add_subcommand("oracle", "Answer causal queries on a discrete SCM");
  oracle->add_option("--scm", scm_path, "SCM JSON with a \"queries\" array")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }

  try {
    auto* sub = app.get_subcommands().front();
    const auto extras = sub->remaining();
    if (sub == gen) return cmd_gen(load_config(config_path, extras));
    if (sub == cluster) return cmd_cluster(load_config(config_path, extras));
    if (sub == train) return cmd_train(load_config(config_path, extras));
    if (sub == eval) return cmd_eval(load_config(config_path, extras), run_dir);
    if (sub == ablate) return cmd_ablate(load_config(config_path, extras));
    if (sub == gc) {
      json j = config_path.empty() ? json::object() : read_json(config_path);
      apply_overrides(j, extras);
      return cmd_gradcheck(j, gc_seed, gc_tol);
    }
    if (sub == oracle) return cmd_oracle(scm_path);
  } catch (const Error& e) {
    fail(e.kind(), e.what());
    return 1;
  } catch (const std::exception& e) {
    fail("internal", e.what());
    return 1;
  }
  return 0;
}
