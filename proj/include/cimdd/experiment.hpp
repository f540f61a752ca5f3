#pragma once

// Experiment configuration, training loop, evaluation and ablations.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cimdd/gradcheck.hpp"
#include "cimdd/metrics.hpp"
#include "cimdd/model.hpp"
#include "cimdd/optim.hpp"
#include "cimdd/synth.hpp"

namespace cimdd {

struct ExperimentConfig {
  /// Dataset directory written by `gen`; when empty the data is generated from `gen`.
  std::string data_dir;
  /// Lexicon file; defaults to `data_dir`/lexicon.json, or the generator's lexicon.
  std::string lexicon;
  synth::GenConfig gen;
  ModelConfig model;
  AdamWConfig optim;  // lr 5e-5, weight decay 0.01
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  /// Epochs without validation improvement before stopping; 0 disables.
  std::size_t patience = 5;
  /// Fraction of the training split held out for validation (15 of 85 by
  /// default, i.e. 70/15 of the whole with the test split as the last 15).
  /// 0 validates on the training rows themselves.
  double val_fraction = 15.0 / 85.0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};  // ablation
  std::string out_dir;

  void validate() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

struct ExperimentData {
  synth::Dataset train, test;
  lbdr::ConfounderLexicon lexicon;
};

ExperimentData load_data(const ExperimentConfig& cfg);

struct TrainResult {
  std::size_t best_epoch = 0;  // 1-based; 0 if no epoch ran
  std::size_t epochs_run = 0;
  std::size_t steps = 0;
  Metrics val, test, train;
  std::vector<double> epoch_loss;
};

/// Trains one model and returns metrics of the best-by-validation-accuracy
/// parameters. If cfg.out_dir is set, writes train_log.jsonl, metrics.json,
/// metrics.csv and checkpoint/ there.
TrainResult run_train(const ExperimentConfig& cfg, const ExperimentData& data);
/// Same, with buffers supplied by the caller (shared between ablation variants).
TrainResult run_train(const ExperimentConfig& cfg, const ExperimentData& data, const Buffers& buffers);

/// Metrics of `model` over `d`, evaluated in chunks.
Metrics evaluate(Model& model, const synth::Dataset& d, const Tensor& counts);

/// Loads checkpoint/ under `run_dir` and evaluates it on the test split of `data`.
Metrics evaluate_checkpoint(const std::filesystem::path& run_dir, const ExperimentData& data);

struct AblationRow {
  std::string variant;
  std::uint64_t seed;
  TrainResult result;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  /// Mean test accuracy per variant, in ablation_variants() order.
  std::vector<std::pair<std::string, double>> mean_accuracy() const;
};

/// Trains every variant for every seed in cfg.seeds. Writes ablation.csv and
/// ablation.json to cfg.out_dir when set.
AblationTable run_ablation(const ExperimentConfig& cfg, const ExperimentData& data,
                           const std::vector<std::string>& variants = ablation_variants());

/// Small widths for finite-difference checks of the whole pipeline.
ModelConfig gradcheck_model_config();

/// Builds a model on a tiny generated dataset and checks the gradient of the
/// mean cross-entropy over `batch` samples against central differences.
GradCheckReport pipeline_grad_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t batch = 2,
                                    const GradCheckOptions& opts = {});

}  // namespace cimdd
