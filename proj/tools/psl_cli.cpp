#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "psl/deviation.hpp"
#include "psl/harness.hpp"
#include "psl/partition.hpp"
#include "psl/random.hpp"
#include "psl/sampling.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("'" + path + "': " + e.what());
  }
}

// Empty when neither --out nor PSL_OUTPUT_DIR is given: data goes to stdout.
std::string resolve_out(const std::string& out, const char* default_name) {
  if (!out.empty()) return out;
  if (const char* dir = std::getenv("PSL_OUTPUT_DIR"); dir && *dir) return (fs::path(dir) / default_name).string();
  return {};
}

void emit(const json& data, const std::string& out_path, bool as_json, const std::string& text) {
  if (!out_path.empty()) {
    psl::write_text(out_path, data.dump(2) + "\n");
    if (as_json) std::cout << data.dump(2) << "\n";
    else std::cout << text << "wrote " << out_path << "\n";
  } else if (as_json) {
    std::cout << data.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

struct DatasetFlags {
  std::optional<int> classes;
  std::optional<std::size_t> per_class, test_per_class, dim;
  std::optional<double> separation, noise;
  std::optional<std::uint64_t> seed;

  void add(CLI::App* app) {
    app->add_option("--classes", classes, "number of classes M (default 10)");
    app->add_option("--per-class", per_class, "training samples per class (default 1000)");
    app->add_option("--test-per-class", test_per_class, "test samples per class (default 200)");
    app->add_option("--dim", dim, "feature dimension (default 32)");
    app->add_option("--separation", separation, "distance of class means from the origin (default 3)");
    app->add_option("--noise", noise, "per-feature noise sigma (default 1)");
    app->add_option("--data-seed", seed, "dataset seed (required without --config)");
  }
  void apply(psl::SyntheticSpec& s) const {
    if (classes) s.classes = *classes;
    if (per_class) s.per_class_count = *per_class;
    if (test_per_class) s.test_per_class_count = *test_per_class;
    if (dim) s.feature_dim = *dim;
    if (separation) s.class_separation = *separation;
    if (noise) s.noise_sigma = *noise;
    if (seed) s.seed = *seed;
  }
};

struct PartitionFlags {
  std::optional<std::string> kind;
  std::optional<int> clients, classes_per_client;
  std::optional<double> alpha;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "iid or dirichlet (default iid)")
        ->check(CLI::IsMember({"iid", "dirichlet"}));
    app->add_option("--clients,-K", clients, "number of clients K (default 1)");
    app->add_option("--classes-per-client,-C", classes_per_client, "classes per client C (default 1)");
    app->add_option("--alpha", alpha, "Dirichlet concentration (default 1)");
  }
  void apply(psl::PartitionSpec& s) const {
    if (kind) s.kind = psl::partition_kind_from_string(*kind);
    if (clients) s.clients = *clients;
    if (classes_per_client) s.classes_per_client = *classes_per_client;
    if (alpha) s.alpha = *alpha;
  }
};

// A partition file carries its dataset spec so it can be rebuilt.
struct LoadedPartition {
  psl::SyntheticSpec spec;
  psl::SyntheticData data;
  psl::Partition partition;
};

LoadedPartition load_partition(const std::string& path) {
  const json j = read_json(path);
  if (!j.contains("dataset")) throw std::runtime_error("'" + path + "': missing dataset spec");
  LoadedPartition lp{j.at("dataset").get<psl::SyntheticSpec>(), {}, {}};
  lp.data = psl::make_synthetic(lp.spec);
  lp.partition = psl::partition_from_json(j, lp.data.train);
  return lp;
}

std::string sizes_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(v[i]);
  return s;
}

// ---- partition ----

struct PartitionCmd {
  std::string config, out;
  DatasetFlags data;
  PartitionFlags part;
  std::optional<std::uint64_t> seed;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("partition", "build a client partition of a synthetic dataset");
    c->add_option("--config", config, "experiment config supplying dataset and partition")->check(CLI::ExistingFile);
    data.add(c);
    part.add(c);
    c->add_option("--seed", seed, "partition seed")->required();
    c->add_option("--out", out, "output file (default $PSL_OUTPUT_DIR/partition.json, else stdout)");
    c->add_flag("--json", as_json, "machine-readable output");
    c->callback([this] { run(); });
  }

  void run() {
    psl::ExperimentConfig cfg;
    if (!config.empty()) cfg = psl::load_config(config);
    else if (!data.seed) throw UsageError("--data-seed is required without --config");
    data.apply(cfg.dataset);
    part.apply(cfg.partition);
    cfg.partition.seed = *seed;
    cfg.partition.validate(cfg.dataset.classes);
    const auto ds = psl::make_synthetic(cfg.dataset);
    const auto p = psl::build_partition(ds.train, cfg.partition);
    json j = psl::partition_to_json(p);
    j["dataset"] = cfg.dataset;
    j["client_sizes"] = p.client_sizes;

    std::ostringstream text;
    text << "kind " << psl::to_string(p.spec.kind) << ", K=" << p.num_clients() << ", D0=" << ds.train.size() << "\n";
    for (int k = 0; k < p.num_clients(); ++k)
      text << "client " << k << ": " << p.client_sizes[static_cast<std::size_t>(k)] << " samples, "
           << psl::distinct_classes(p, k) << " classes\n";
    if (p.short_class_warning) std::cerr << "warning: some class had fewer samples than assigned clients\n";
    if (p.reallocated) std::cerr << "note: zero allocations were repaired from the largest recipient\n";
    emit(j, resolve_out(out, "partition.json"), as_json, text.str());
  }
};

// ---- schedule ----

struct ScheduleCmd {
  std::string strategy, partition, out;
  std::vector<std::size_t> sizes;
  std::size_t batch = 0;
  std::uint64_t seed = 0;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("schedule", "draw one epoch of per-client local batch sizes");
    c->add_option("--strategy", strategy, "gpsl, fls or fpls")->required()->check(CLI::IsMember({"gpsl", "fls", "fpls"}));
    c->add_option("--global-batch,-B", batch, "global batch size B")->required()->check(CLI::PositiveNumber);
    auto* pf = c->add_option("--partition", partition, "partition file")->check(CLI::ExistingFile);
    auto* sf = c->add_option("--sizes", sizes, "client dataset sizes D_1..D_K");
    pf->excludes(sf);
    c->add_option("--seed", seed, "schedule seed")->required();
    c->add_option("--out", out, "output file (default $PSL_OUTPUT_DIR/schedule.json, else stdout)");
    c->add_flag("--json", as_json, "machine-readable output");
    c->callback([this] { run(); });
  }

  void run() {
    if (partition.empty() && sizes.empty()) throw UsageError("one of --partition or --sizes is required");
    if (!partition.empty()) sizes = load_partition(partition).partition.client_sizes;
    const auto s = psl::make_schedule(psl::strategy_from_string(strategy), sizes, batch, seed);
    std::ostringstream text;
    text << "T=" << psl::steps_per_epoch(s) << "\n";
    for (std::size_t t = 0; t < s.steps.size(); ++t)
      text << "step " << t + 1 << ": " << sizes_text(s.steps[t]) << " (global " << s.global_size(t) << ")\n";
    emit(psl::schedule_to_json(s), resolve_out(out, "schedule.json"), as_json, text.str());
  }
};

// ---- bound ----

struct BoundCmd {
  psl::BoundInputs in;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("bound", "Serfling union bound on Pr(Delta >= M eps)");
    c->add_option("--eps", in.epsilon, "per-class deviation epsilon")->required();
    c->add_option("--batch", in.batch, "batch size B")->required();
    c->add_option("--pool", in.pool, "pool size D_0")->required();
    c->add_option("--classes", in.classes, "number of classes M")->required();
    c->add_flag("--json", as_json, "machine-readable output");
    c->callback([this] { run(); });
  }

  void run() {
    in.validate();
    const double b = psl::serfling_union_bound(in);
    if (as_json) {
      json j{{"epsilon", in.epsilon},
             {"batch", in.batch},
             {"pool", in.pool},
             {"classes", in.classes},
             {"bound", b},
             {"unclipped", psl::serfling_union_bound_unclipped(in)},
             {"log_bound", psl::serfling_log_bound(in)}};
      std::cout << j.dump(2) << "\n";
    } else {
      std::cout << fmt(b, "%.3g") << "\n";
    }
  }
};

// ---- analyze ----

struct AnalyzeCmd {
  std::string schedule, partition, out;
  std::size_t trials = 10000;
  std::uint64_t seed = 0;
  std::vector<double> eps{0.05, 0.1, 0.2};
  double ema = 0.1;
  unsigned workers = 1;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("analyze", "per-step batch deviation of a schedule and first-step tails");
    c->add_option("--schedule", schedule, "schedule file")->required()->check(CLI::ExistingFile);
    c->add_option("--partition", partition, "partition file")->required()->check(CLI::ExistingFile);
    c->add_option("--trials", trials, "Monte Carlo first-step batches")->capture_default_str();
    c->add_option("--seed", seed, "draw seed")->required();
    c->add_option("--eps", eps, "tail epsilons")->capture_default_str();
    c->add_option("--ema", ema, "smoothing factor")->capture_default_str();
    c->add_option("--workers", workers, "Monte Carlo threads")->capture_default_str();
    c->add_option("--out", out, "report file; the CSV goes next to it (default $PSL_OUTPUT_DIR/report.json)");
    c->add_flag("--json", as_json, "machine-readable output");
    c->callback([this] { run(); });
  }

  void run() {
    const auto lp = load_partition(partition);
    const auto s = psl::schedule_from_json(read_json(schedule));
    s.validate(lp.partition.client_sizes);
    auto r = psl::summarize_deviation(s.strategy, psl::epoch_deviation_curve(s, lp.partition, lp.data.train, seed), ema);
    if (trials > 0) {
      const auto devs = psl::first_step_deviations(s.strategy, lp.partition, lp.data.train, s.global_target,
                                                   trials, seed, workers);
      const int m = lp.data.train.num_classes;
      for (double e : eps) {
        r.tails.push_back(psl::tail_from_deviations(devs, e, m));
        r.bounds.push_back(psl::serfling_union_bound({e, s.global_target, lp.data.train.size(), m}));
      }
    }
    const json j = psl::to_json(r);
    std::ostringstream csv;
    csv << "step,deviation,smoothed\n";
    for (std::size_t t = 0; t < r.per_step_delta.size(); ++t)
      csv << t + 1 << "," << fmt(r.per_step_delta[t]) << "," << fmt(r.smoothed_delta[t]) << "\n";

    std::ostringstream text;
    text << psl::to_string(r.strategy) << ": T=" << r.per_step_delta.size() << ", mean Delta " << fmt(r.mean, "%.4f")
         << ", std " << fmt(r.stddev, "%.4f") << "\n";
    for (std::size_t i = 0; i < r.tails.size(); ++i)
      text << "eps " << r.tails[i].epsilon << ": Pr(Delta >= " << r.tails[i].threshold << ") = "
           << fmt(r.tails[i].probability, "%.4g") << " +/- " << fmt(r.tails[i].std_error, "%.2g") << ", bound "
           << fmt(r.bounds[i], "%.3g") << "\n";

    const auto path = resolve_out(out, "report.json");
    if (!path.empty()) psl::write_text(fs::path(path).replace_extension(".csv"), csv.str());
    emit(j, path, as_json, text.str());
  }
};

// ---- train / compare ----

struct ExperimentFlags {
  std::string config;
  DatasetFlags data;
  PartitionFlags part;
  std::optional<std::uint64_t> partition_seed;
  std::optional<std::size_t> batch;
  std::optional<int> epochs, client_hidden, server_hidden;
  std::optional<double> lr, momentum, weight_decay;
  std::optional<std::string> weighting;
  std::vector<std::uint64_t> seeds;
  std::optional<unsigned> workers;
  bool group_norm = false, timing = false;

  void add(CLI::App* c) {
    c->add_option("--config", config, "experiment config (JSON); flags override it")->check(CLI::ExistingFile);
    data.add(c);
    part.add(c);
    c->add_option("--partition-seed", partition_seed, "partition seed (required without --config)");
    c->add_option("--global-batch,-B", batch, "global batch size (default 128)");
    c->add_option("--epochs,-E", epochs, "epochs (default 50)");
    c->add_option("--lr", lr, "learning rate (default 0.01)");
    c->add_option("--momentum", momentum, "momentum (default 0.9)");
    c->add_option("--weight-decay", weight_decay, "weight decay (default 5e-4)");
    c->add_option("--client-hidden", client_hidden, "client hidden width (default 64)");
    c->add_option("--server-hidden", server_hidden, "server hidden width (default 64)");
    c->add_flag("--group-norm", group_norm, "GroupNorm after the client hidden layer");
    c->add_option("--weighting", weighting, "dataset_size or step_batch (default dataset_size)")
        ->check(CLI::IsMember({"dataset_size", "step_batch"}));
    c->add_option("--seeds", seeds, "run seeds (required without --config)");
    c->add_option("--workers", workers, "client threads (default 1)");
    c->add_flag("--timing", timing, "record wall-clock time (reports stop being reproducible)");
  }

  psl::ExperimentConfig resolve() const {
    psl::ExperimentConfig cfg;
    if (!config.empty()) {
      cfg = psl::load_config(config);
    } else {
      if (!data.seed) throw UsageError("--data-seed is required without --config");
      if (!partition_seed) throw UsageError("--partition-seed is required without --config");
      if (seeds.empty()) throw UsageError("--seeds is required without --config");
    }
    data.apply(cfg.dataset);
    part.apply(cfg.partition);
    if (partition_seed) cfg.partition.seed = *partition_seed;
    if (batch) cfg.global_batch = *batch;
    if (epochs) cfg.epochs = *epochs;
    if (lr) cfg.optimizer.learning_rate = *lr;
    if (momentum) cfg.optimizer.momentum = *momentum;
    if (weight_decay) cfg.optimizer.weight_decay = *weight_decay;
    if (client_hidden) cfg.model.client_hidden = *client_hidden;
    if (server_hidden) cfg.model.server_hidden = *server_hidden;
    if (group_norm) cfg.model.group_norm = true;
    if (weighting) cfg.weighting = *weighting == "step_batch" ? psl::GradientWeighting::step_batch
                                                              : psl::GradientWeighting::dataset_size;
    if (!seeds.empty()) cfg.seeds = seeds;
    if (workers) cfg.workers = *workers;
    if (timing) cfg.record_timing = true;
    return cfg;
  }
};

std::string out_dir(const std::string& flag, const std::string& from_config, const char* name) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  if (const char* dir = std::getenv("PSL_OUTPUT_DIR"); dir && *dir) return (fs::path(dir) / name).string();
  return name;
}

struct TrainCmd {
  ExperimentFlags flags;
  std::optional<std::string> strategy;
  std::string out;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "train one strategy over every seed and write a report");
    flags.add(c);
    c->add_option("--strategy", strategy, "gpsl, fls, fpls or cl (default gpsl)")
        ->check(CLI::IsMember({"gpsl", "fls", "fpls", "cl", "centralized"}));
    c->add_option("--out", out, "report directory (default: config output_dir, $PSL_OUTPUT_DIR/report, ./report)");
    c->add_flag("--json", as_json, "print summary.json to stdout");
    c->callback([this] { run(); });
  }

  void run() {
    auto cfg = flags.resolve();
    if (strategy) cfg.strategy = psl::strategy_from_string(*strategy);
    cfg.output_dir = out_dir(out, cfg.output_dir, "report");
    cfg.validate();
    const auto report = psl::run_experiment(cfg);
    psl::write_report(cfg, report, cfg.output_dir);
    if (as_json) {
      std::cout << psl::summary_json(cfg, report).dump(2) << "\n";
      return;
    }
    std::cout << psl::to_string(report.strategy) << " K=" << report.clients << " B=" << report.global_batch
              << ": accuracy " << fmt(100 * report.accuracy_mean, "%.2f");
    if (report.accuracy_std) std::cout << " +/- " << fmt(100 * *report.accuracy_std, "%.2f");
    std::cout << " %, mean Delta " << fmt(report.mean_deviation, "%.4f") << ", steps/epoch "
              << fmt(report.mean_steps_per_epoch, "%.1f") << "\nwrote " << cfg.output_dir << "\n";
  }
};

struct CompareCmd {
  ExperimentFlags flags;
  std::vector<std::string> strategies{"gpsl", "fls", "fpls", "cl"};
  std::vector<int> clients;
  std::vector<std::size_t> batches;
  std::string out;
  bool as_json = false;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("compare", "run a (strategy, K, B) grid on a shared dataset and partition seed");
    flags.add(c);
    c->add_option("--strategies", strategies, "strategies to compare")
        ->capture_default_str()
        ->check(CLI::IsMember({"gpsl", "fls", "fpls", "cl", "centralized"}));
    c->add_option("--grid-clients", clients, "client counts K (default: the config's)");
    c->add_option("--grid-batches", batches, "global batch sizes B (default: the config's)");
    c->add_option("--out", out, "output directory (default: config output_dir, $PSL_OUTPUT_DIR/compare, ./compare)");
    c->add_flag("--json", as_json, "print comparison.json to stdout");
    c->callback([this] { run(); });
  }

  void run() {
    const auto base = flags.resolve();
    if (clients.empty()) clients = {base.partition.clients};
    if (batches.empty()) batches = {base.global_batch};
    std::vector<psl::ExperimentConfig> configs;
    for (const auto& s : strategies) {
      const auto st = psl::strategy_from_string(s);
      const auto ks = st == psl::Strategy::centralized ? std::vector<int>{clients.front()} : clients;
      for (int k : ks) {
        for (std::size_t b : batches) {
          auto cfg = base;
          cfg.strategy = st;
          cfg.partition.clients = k;
          cfg.global_batch = b;
          cfg.validate();
          configs.push_back(cfg);
        }
      }
    }
    const auto dir = fs::path(out_dir(out, base.output_dir, "compare"));
    const auto rows = psl::compare_strategies(configs);
    const json j = psl::comparison_json(rows);
    psl::write_text(dir / "comparison.json", j.dump(2) + "\n");
    psl::write_text(dir / "comparison.csv", psl::comparison_csv(rows));
    if (as_json) std::cout << j.dump(2) << "\n";
    else std::cout << psl::comparison_csv(rows) << "wrote " << dir.string() << "\n";
  }
};

const CLI::App* failing_subcommand(const CLI::App& app) {
  for (const auto* sub : app.get_subcommands([](const CLI::App* s) { return s->parsed(); })) return sub;
  return &app;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel split learning batch-sampling simulator"};
  app.name("psl");
  app.require_subcommand(1);
  PartitionCmd partition;
  ScheduleCmd schedule;
  BoundCmd bound;
  AnalyzeCmd analyze;
  TrainCmd train;
  CompareCmd compare;
  partition.add(app);
  schedule.add(app);
  bound.add(app);
  analyze.add(app);
  train.add(app);
  compare.add(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << failing_subcommand(app)->help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << failing_subcommand(app)->help();
    return 1;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << failing_subcommand(app)->help();
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
