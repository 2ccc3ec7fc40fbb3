#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "psl/dataset.hpp"
#include "psl/engine.hpp"
#include "psl/model.hpp"
#include "psl/partition.hpp"
#include "psl/sampling.hpp"

namespace psl {

struct ModelConfig {
  int client_hidden = 64;
  int server_hidden = 64;
  bool group_norm = false;
  int norm_groups = 4;

  bool operator==(const ModelConfig&) const = default;
};

struct ExperimentConfig {
  SyntheticSpec dataset;
  PartitionSpec partition;
  Strategy strategy = Strategy::gpsl;
  std::size_t global_batch = 128;
  int epochs = 50;
  OptimizerConfig optimizer;
  ModelConfig model;
  GradientWeighting weighting = GradientWeighting::dataset_size;
  std::vector<std::uint64_t> seeds{0};
  double ema_factor = 0.1;
  unsigned workers = 1;
  /// Wall-clock timings make reports non-reproducible, so they are opt-in.
  bool record_timing = false;
  std::string output_dir;

  /// Throws std::invalid_argument before any work is done.
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

ExperimentConfig load_config(const std::filesystem::path& path);

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  std::size_t global_batch = 0;
  double loss = 0.0;
  double deviation = 0.0;
};

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<double> accuracy_curve;  // one point per epoch
  std::vector<std::size_t> steps_per_epoch;
  std::vector<StepRecord> steps;
  double final_accuracy = 0.0;
  double mean_deviation = 0.0;
  std::size_t first_step_global_batch = 0;
  double train_seconds = 0.0;
};

struct RunReport {
  Strategy strategy = Strategy::gpsl;
  int clients = 1;
  std::size_t global_batch = 0;
  std::vector<SeedRun> runs;
  double accuracy_mean = 0.0;
  std::optional<double> accuracy_std;  // sample std, present with >= 2 seeds
  std::vector<double> accuracy_curve_mean;
  double mean_deviation = 0.0;
  double mean_steps_per_epoch = 0.0;
  std::size_t total_steps = 0;
  std::size_t first_step_global_batch = 0;
  std::optional<double> train_seconds;
};

/// Trains every seed and aggregates. Does not touch the filesystem.
RunReport run_experiment(const ExperimentConfig& config);

/// Writes config.json, summary.json and curves/seed_<s>.csv under `dir`.
void write_report(const ExperimentConfig& config, const RunReport& report,
                  const std::filesystem::path& dir);

nlohmann::json summary_json(const ExperimentConfig& config, const RunReport& report);

/// Curve CSV: epoch,step,loss,deviation,accuracy (accuracy only on the last
/// step of each epoch).
std::string curve_csv(const SeedRun& run);

struct ComparisonRow {
  Strategy strategy = Strategy::gpsl;
  int clients = 0;
  std::size_t global_batch = 0;
  std::size_t seed_count = 0;
  double accuracy_mean = 0.0;
  std::optional<double> accuracy_std;
  double mean_deviation = 0.0;
  double steps_per_epoch = 0.0;
  std::size_t first_step_global_batch = 0;
  std::optional<double> train_seconds;
};

/// Runs each config and tabulates (strategy, K, B) cells. All configs must
/// share the dataset spec and the partition seed.
std::vector<ComparisonRow> compare_strategies(const std::vector<ExperimentConfig>& configs,
                                              std::vector<RunReport>* reports = nullptr);

nlohmann::json comparison_json(const std::vector<ComparisonRow>& rows);
std::string comparison_csv(const std::vector<ComparisonRow>& rows);

/// Sample standard deviation; nullopt for fewer than two values.
std::optional<double> sample_std(const std::vector<double>& values);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace psl
