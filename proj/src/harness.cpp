#include "psl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "psl/deviation.hpp"

namespace psl {

void ExperimentConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("config: epochs must be >= 1");
  if (seeds.empty()) throw std::invalid_argument("config: at least one seed is required");
  if (global_batch < 1) throw std::invalid_argument("config: global batch size must be >= 1");
  if (!(ema_factor > 0.0 && ema_factor <= 1.0))
    throw std::invalid_argument("config: ema_factor must lie in (0, 1]");
  if (model.client_hidden < 1 || model.server_hidden < 1)
    throw std::invalid_argument("config: hidden widths must be positive");
  if (model.group_norm && (model.norm_groups < 1 || model.client_hidden % model.norm_groups != 0))
    throw std::invalid_argument("config: norm_groups must divide client_hidden");
  optimizer.validate();
  if (dataset.classes < 1 || dataset.per_class_count < 1 || dataset.feature_dim < 1)
    throw std::invalid_argument("config: dataset sizes must be positive");
  if (dataset.test_per_class_count < 1)
    throw std::invalid_argument("config: test_per_class_count must be positive");
  const std::size_t pool = dataset.per_class_count * static_cast<std::size_t>(dataset.classes);
  if (global_batch > pool) throw std::invalid_argument("config: B exceeds the pool size");
  partition.validate(dataset.classes);
  if (static_cast<std::size_t>(partition.clients) > pool)
    throw std::invalid_argument("config: more clients than samples");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"client_hidden", c.client_hidden},
                     {"server_hidden", c.server_hidden},
                     {"group_norm", c.group_norm},
                     {"norm_groups", c.norm_groups}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.client_hidden = j.value("client_hidden", d.client_hidden);
  c.server_hidden = j.value("server_hidden", d.server_hidden);
  c.group_norm = j.value("group_norm", d.group_norm);
  c.norm_groups = j.value("norm_groups", d.norm_groups);
}

namespace {

std::string weighting_name(GradientWeighting w) {
  return w == GradientWeighting::dataset_size ? "dataset_size" : "step_batch";
}

GradientWeighting weighting_from_string(const std::string& s) {
  if (s == "dataset_size") return GradientWeighting::dataset_size;
  if (s == "step_batch") return GradientWeighting::step_batch;
  throw std::invalid_argument("unknown gradient weighting '" + s + "'");
}

}  // namespace

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"dataset", c.dataset},
                     {"partition", c.partition},
                     {"strategy", to_string(c.strategy)},
                     {"global_batch", c.global_batch},
                     {"epochs", c.epochs},
                     {"optimizer", c.optimizer},
                     {"model", c.model},
                     {"weighting", weighting_name(c.weighting)},
                     {"seeds", c.seeds},
                     {"ema_factor", c.ema_factor},
                     {"workers", c.workers},
                     {"record_timing", c.record_timing},
                     {"output_dir", c.output_dir}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const char* known[] = {"dataset", "partition", "strategy",   "global_batch", "epochs",
                                "optimizer", "model",   "weighting",  "seeds",        "ema_factor",
                                "workers",  "record_timing", "output_dir"};
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(known), std::end(known), key) == std::end(known))
      throw std::invalid_argument("config: unknown key '" + key + "'");
  ExperimentConfig d;
  c.dataset = j.value("dataset", d.dataset);
  c.partition = j.value("partition", d.partition);
  c.strategy = strategy_from_string(j.value("strategy", to_string(d.strategy)));
  c.global_batch = j.value("global_batch", d.global_batch);
  c.epochs = j.value("epochs", d.epochs);
  c.optimizer = j.value("optimizer", d.optimizer);
  c.model = j.value("model", d.model);
  c.weighting = weighting_from_string(j.value("weighting", weighting_name(d.weighting)));
  c.seeds = j.value("seeds", d.seeds);
  c.ema_factor = j.value("ema_factor", d.ema_factor);
  c.workers = j.value("workers", d.workers);
  c.record_timing = j.value("record_timing", d.record_timing);
  c.output_dir = j.value("output_dir", d.output_dir);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("config '" + path.string() + "': " + e.what());
  }
}

std::optional<double> sample_std(const std::vector<double>& values) {
  if (values.size() < 2) return std::nullopt;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / (n - 1.0));
}

namespace {

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

SeedRun run_seed(const ExperimentConfig& config, const SyntheticData& data, std::uint64_t seed) {
  using Clock = std::chrono::steady_clock;
  SeedRun run;
  run.seed = seed;

  const auto pool_dist = class_distribution(data.train.labels, data.train.num_classes);
  const Architecture arch =
      default_mlp(config.dataset.feature_dim, config.model.client_hidden,
                  config.model.server_hidden, config.dataset.classes, config.model.group_norm,
                  config.model.norm_groups);
  const bool centralized = config.strategy == Strategy::centralized;

  PartitionSpec pspec = config.partition;
  pspec.seed = derive_seed(config.partition.seed, seed);
  std::optional<Partition> partition;
  if (!centralized) partition = build_partition(data.train, pspec);

  SplitModel model = SplitModel::create(arch, centralized ? 1 : pspec.clients, seed);
  std::optional<SplitTrainer> split;
  std::optional<CentralizedTrainer> central;
  if (centralized)
    central.emplace(model, config.optimizer);
  else
    split.emplace(model, config.optimizer, partition->client_sizes, config.weighting,
                  config.workers);

  std::vector<double> deviations;
  const std::uint64_t epoch_root = derive_seed(seed, stream::kEpoch);
  for (int e = 0; e < config.epochs; ++e) {
    const std::uint64_t epoch_seed = derive_seed(epoch_root, static_cast<std::uint64_t>(e));
    const auto start = Clock::now();
    std::vector<StepTrace> traces;
    if (centralized) {
      traces = centralized_train_epoch(*central, data.train, config.global_batch, epoch_seed);
    } else {
      const auto schedule =
          make_schedule(config.strategy, partition->client_sizes, config.global_batch, epoch_seed);
      traces = train_epoch(*split, data.train, *partition, schedule, epoch_seed);
    }
    run.train_seconds += std::chrono::duration<double>(Clock::now() - start).count();

    run.steps_per_epoch.push_back(traces.size());
    if (e == 0 && !traces.empty()) run.first_step_global_batch = traces.front().global_batch;
    for (const auto& tr : traces) {
      std::vector<std::size_t> counts(static_cast<std::size_t>(data.train.num_classes), 0);
      for (const auto& b : tr.local_batches)
        for (std::size_t idx : b) ++counts[static_cast<std::size_t>(data.train.labels[idx])];
      StepRecord rec;
      rec.epoch = e;
      rec.step = tr.step;
      rec.global_batch = tr.global_batch;
      rec.loss = tr.loss;
      rec.deviation = l1_deviation_from_counts(counts, pool_dist);
      deviations.push_back(rec.deviation);
      run.steps.push_back(rec);
    }
    run.accuracy_curve.push_back(evaluate(model, data.test));
  }
  run.final_accuracy = run.accuracy_curve.back();
  run.mean_deviation = mean_of(deviations);
  return run;
}

}  // namespace

RunReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  const SyntheticData data = make_synthetic(config.dataset);

  RunReport report;
  report.strategy = config.strategy;
  report.clients = config.strategy == Strategy::centralized ? 1 : config.partition.clients;
  report.global_batch = config.global_batch;
  for (std::uint64_t seed : config.seeds) report.runs.push_back(run_seed(config, data, seed));

  std::vector<double> finals, devs, steps;
  double seconds = 0.0;
  report.accuracy_curve_mean.assign(static_cast<std::size_t>(config.epochs), 0.0);
  for (const auto& r : report.runs) {
    finals.push_back(r.final_accuracy);
    devs.push_back(r.mean_deviation);
    for (std::size_t e = 0; e < r.accuracy_curve.size(); ++e)
      report.accuracy_curve_mean[e] += r.accuracy_curve[e] / static_cast<double>(report.runs.size());
    for (std::size_t s : r.steps_per_epoch) {
      steps.push_back(static_cast<double>(s));
      report.total_steps += s;
    }
    seconds += r.train_seconds;
  }
  report.accuracy_mean = mean_of(finals);
  report.accuracy_std = sample_std(finals);
  report.mean_deviation = mean_of(devs);
  report.mean_steps_per_epoch = mean_of(steps);
  report.first_step_global_batch = report.runs.front().first_step_global_batch;
  if (config.record_timing) report.train_seconds = seconds / static_cast<double>(report.runs.size());
  return report;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json summary_json(const ExperimentConfig& config, const RunReport& report) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : report.runs) {
    nlohmann::json jr{{"seed", r.seed},
                      {"final_accuracy", r.final_accuracy},
                      {"accuracy_curve", r.accuracy_curve},
                      {"steps_per_epoch", r.steps_per_epoch},
                      {"mean_deviation", r.mean_deviation},
                      {"first_step_global_batch", r.first_step_global_batch}};
    if (config.record_timing) jr["train_seconds"] = r.train_seconds;
    runs.push_back(std::move(jr));
  }
  nlohmann::json j{{"strategy", to_string(report.strategy)},
                   {"K", report.clients},
                   {"B", report.global_batch},
                   {"epochs", config.epochs},
                   {"seed_count", report.runs.size()},
                   {"accuracy_mean", report.accuracy_mean},
                   {"accuracy_std", optional_json(report.accuracy_std)},
                   {"accuracy_curve_mean", report.accuracy_curve_mean},
                   {"mean_deviation", report.mean_deviation},
                   {"mean_steps_per_epoch", report.mean_steps_per_epoch},
                   {"total_steps", report.total_steps},
                   {"first_step_global_batch", report.first_step_global_batch},
                   {"runs", runs}};
  if (config.record_timing) j["train_seconds"] = optional_json(report.train_seconds);
  return j;
}

std::string curve_csv(const SeedRun& run) {
  std::ostringstream out;
  out << "epoch,step,loss,deviation,accuracy\n";
  for (std::size_t i = 0; i < run.steps.size(); ++i) {
    const auto& s = run.steps[i];
    const bool last = i + 1 == run.steps.size() || run.steps[i + 1].epoch != s.epoch;
    out << s.epoch << ',' << s.step << ',' << fmt(s.loss) << ',' << fmt(s.deviation) << ',';
    if (last) out << fmt(run.accuracy_curve[static_cast<std::size_t>(s.epoch)]);
    out << '\n';
  }
  return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

void write_report(const ExperimentConfig& config, const RunReport& report,
                  const std::filesystem::path& dir) {
  write_text(dir / "config.json", nlohmann::json(config).dump(2) + "\n");
  write_text(dir / "summary.json", summary_json(config, report).dump(2) + "\n");
  for (const auto& r : report.runs)
    write_text(dir / "curves" / ("seed_" + std::to_string(r.seed) + ".csv"), curve_csv(r));
}

std::vector<ComparisonRow> compare_strategies(const std::vector<ExperimentConfig>& configs,
                                              std::vector<RunReport>* reports) {
  if (configs.empty()) throw std::invalid_argument("compare: no configs");
  for (const auto& c : configs) {
    if (!(c.dataset == configs.front().dataset))
      throw std::invalid_argument("compare: configs use different dataset specs");
    if (c.partition.seed != configs.front().partition.seed)
      throw std::invalid_argument("compare: configs use different partition seeds");
    c.validate();
  }
  std::vector<ComparisonRow> rows;
  for (const auto& c : configs) {
    RunReport r = run_experiment(c);
    ComparisonRow row;
    row.strategy = r.strategy;
    row.clients = r.clients;
    row.global_batch = r.global_batch;
    row.seed_count = r.runs.size();
    row.accuracy_mean = r.accuracy_mean;
    row.accuracy_std = r.accuracy_std;
    row.mean_deviation = r.mean_deviation;
    row.steps_per_epoch = r.mean_steps_per_epoch;
    row.first_step_global_batch = r.first_step_global_batch;
    row.train_seconds = r.train_seconds;
    rows.push_back(row);
    if (reports) reports->push_back(std::move(r));
  }
  return rows;
}

nlohmann::json comparison_json(const std::vector<ComparisonRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"strategy", to_string(r.strategy)},
                     {"K", r.clients},
                     {"B", r.global_batch},
                     {"seed_count", r.seed_count},
                     {"accuracy_mean", r.accuracy_mean},
                     {"accuracy_std", optional_json(r.accuracy_std)},
                     {"mean_deviation", r.mean_deviation},
                     {"steps_per_epoch", r.steps_per_epoch},
                     {"first_step_global_batch", r.first_step_global_batch}};
    if (r.train_seconds) j["train_seconds"] = *r.train_seconds;
    out.push_back(std::move(j));
  }
  return out;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream out;
  out << "strategy,K,B,seed_count,accuracy_mean,accuracy_std,mean_deviation,steps_per_epoch,"
         "first_step_global_batch,train_seconds\n";
  for (const auto& r : rows) {
    out << to_string(r.strategy) << ',' << r.clients << ',' << r.global_batch << ','
        << r.seed_count << ',' << fmt(r.accuracy_mean) << ','
        << (r.accuracy_std ? fmt(*r.accuracy_std) : "") << ',' << fmt(r.mean_deviation) << ','
        << fmt(r.steps_per_epoch) << ',' << r.first_step_global_batch << ','
        << (r.train_seconds ? fmt(*r.train_seconds) : "") << '\n';
  }
  return out.str();
}

}  // namespace psl
