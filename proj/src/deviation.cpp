#include "psl/deviation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace psl {

double l1_deviation_from_counts(std::span<const std::size_t> class_counts,
                                const ClassDistribution& pool) {
  if (class_counts.size() != pool.probs.size())
    throw std::invalid_argument("l1 deviation: class count mismatch");
  const std::size_t n = std::accumulate(class_counts.begin(), class_counts.end(), std::size_t{0});
  if (n == 0) throw std::invalid_argument("l1 deviation: empty batch");
  double delta = 0.0;
  for (std::size_t m = 0; m < class_counts.size(); ++m)
    delta += std::abs(static_cast<double>(class_counts[m]) / static_cast<double>(n) - pool.probs[m]);
  return delta;
}

double l1_deviation(std::span<const ClassId> batch_labels, const ClassDistribution& pool) {
  if (batch_labels.empty()) throw std::invalid_argument("l1 deviation: empty batch");
  return l1_deviation_from_counts(class_counts(batch_labels, pool.num_classes()), pool);
}

void BoundInputs::validate() const {
  if (classes < 1) throw std::invalid_argument("bound: class count must be >= 1");
  if (batch < 1 || pool < 1 || batch > pool)
    throw std::invalid_argument("bound: need 1 <= B <= D_0");
  if (!(epsilon > 0.0) || epsilon > 1.0 - 1.0 / static_cast<double>(pool))
    throw std::invalid_argument("bound: need 0 < eps <= 1 - 1/D_0");
}

double serfling_log_bound(const BoundInputs& in) {
  in.validate();
  const double b = static_cast<double>(in.batch);
  const double correction = 1.0 - (b - 1.0) / static_cast<double>(in.pool);
  return std::log(2.0 * in.classes) - 2.0 * in.epsilon * in.epsilon * b / correction;
}

double serfling_union_bound_unclipped(const BoundInputs& in) {
  return std::exp(serfling_log_bound(in));
}

double serfling_union_bound(const BoundInputs& in) {
  const double log_bound = serfling_log_bound(in);
  return log_bound >= 0.0 ? 1.0 : std::exp(log_bound);
}

RoundingBias rounding_bias(std::span<const std::size_t> client_sizes,
                           std::span<const ClassDistribution> client_distributions,
                           std::size_t global_batch) {
  if (global_batch < 1) throw std::invalid_argument("rounding bias: B must be >= 1");
  if (client_sizes.size() != client_distributions.size() || client_sizes.empty())
    throw std::invalid_argument("rounding bias: sizes and distributions disagree");
  const std::size_t classes = client_distributions.front().probs.size();
  for (const auto& d : client_distributions)
    if (d.probs.size() != classes)
      throw std::invalid_argument("rounding bias: class count mismatch");

  const double pool = static_cast<double>(
      std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0}));
  const double b = static_cast<double>(global_batch);

  RoundingBias out;
  out.local_sizes = fpls_local_sizes(client_sizes, global_batch);
  out.mixture.assign(classes, 0.0);
  std::vector<double> pool_dist(classes, 0.0);
  for (std::size_t k = 0; k < client_sizes.size(); ++k) {
    const double local_share = static_cast<double>(out.local_sizes[k]) / b;
    const double data_share = static_cast<double>(client_sizes[k]) / pool;
    out.size_mismatch += std::abs(local_share - data_share);
    for (std::size_t m = 0; m < classes; ++m) {
      out.mixture[m] += local_share * client_distributions[k].probs[m];
      pool_dist[m] += data_share * client_distributions[k].probs[m];
    }
  }
  out.per_class_bias.resize(classes);
  for (std::size_t m = 0; m < classes; ++m) {
    out.per_class_bias[m] = std::abs(out.mixture[m] - pool_dist[m]);
    out.total_bias += out.per_class_bias[m];
    if (out.per_class_bias[m] > out.size_mismatch + 1e-12)
      throw std::logic_error("rounding bias exceeds the size mismatch");
  }
  out.kb_ratio = static_cast<double>(client_sizes.size()) / b;
  return out;
}

std::vector<std::size_t> first_step_sizes(Strategy strategy,
                                          std::span<const std::size_t> client_sizes,
                                          std::size_t global_batch, std::uint64_t seed) {
  switch (strategy) {
    case Strategy::gpsl: {
      if (global_batch < 1) throw std::invalid_argument("gpsl: global batch size must be >= 1");
      GpslSampler sampler(client_sizes, seed);
      return sampler.next_step(global_batch);
    }
    case Strategy::fls:
    case Strategy::fpls: {
      auto sizes = strategy == Strategy::fls ? fls_local_sizes(client_sizes.size(), global_batch)
                                             : fpls_local_sizes(client_sizes, global_batch);
      for (std::size_t k = 0; k < sizes.size(); ++k) sizes[k] = std::min(sizes[k], client_sizes[k]);
      return sizes;
    }
    case Strategy::centralized: {
      const std::size_t pool =
          std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0});
      return {std::min(global_batch, pool)};
    }
  }
  throw std::invalid_argument("unknown strategy");
}

namespace {

// Counts the classes of n labels drawn without replacement from `labels`,
// leaving `labels` exactly as it was.
void draw_class_counts(std::vector<ClassId>& labels, std::size_t n, Rng& rng,
                       std::vector<std::size_t>& counts, std::vector<std::size_t>& swaps) {
  swaps.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_below(rng, labels.size() - i);
    std::swap(labels[i], labels[j]);
    swaps.push_back(j);
    ++counts[static_cast<std::size_t>(labels[i])];
  }
  for (std::size_t i = n; i-- > 0;) std::swap(labels[i], labels[swaps[i]]);
}

}  // namespace

std::vector<double> first_step_deviations(Strategy strategy, const Partition& partition,
                                          const LabeledDataset& dataset, std::size_t global_batch,
                                          std::size_t trials, std::uint64_t seed,
                                          unsigned workers) {
  if (trials < 1) throw std::invalid_argument("deviation tail: trials must be >= 1");
  const auto pool_dist = class_distribution(dataset.labels, dataset.num_classes);

  std::vector<std::vector<ClassId>> group_labels;
  std::vector<std::size_t> group_sizes;
  if (strategy == Strategy::centralized) {
    group_labels.push_back(dataset.labels);
    group_sizes.push_back(dataset.size());
  } else {
    for (const auto& idx : partition.client_indices) {
      group_labels.push_back(dataset.gather_labels(idx));
      group_sizes.push_back(idx.size());
    }
  }

  const std::uint64_t trial_seed = derive_seed(seed, stream::kTrial);
  std::vector<double> deltas(trials, 0.0);
  auto run = [&](std::size_t begin, std::size_t end) {
    auto labels = group_labels;
    std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.num_classes));
    std::vector<std::size_t> swaps;
    for (std::size_t i = begin; i < end; ++i) {
      const std::uint64_t s = derive_seed(trial_seed, i);
      const auto sizes = first_step_sizes(strategy, group_sizes, global_batch, s);
      Rng rng = make_rng(s, stream::kClientDraw);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t k = 0; k < sizes.size(); ++k)
        draw_class_counts(labels[k], sizes[k], rng, counts, swaps);
      deltas[i] = l1_deviation_from_counts(counts, pool_dist);
    }
  };

  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(trials)));
  if (workers == 1) {
    run(0, trials);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (trials + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t begin = w * chunk;
      const std::size_t end = std::min(trials, begin + chunk);
      if (begin < end) pool.emplace_back(run, begin, end);
    }
    for (auto& t : pool) t.join();
  }
  return deltas;
}

TailEstimate tail_from_deviations(std::span<const double> deviations, double epsilon,
                                  int num_classes) {
  if (deviations.empty()) throw std::invalid_argument("deviation tail: no trials");
  TailEstimate t;
  t.epsilon = epsilon;
  t.threshold = num_classes * epsilon;
  t.trials = deviations.size();
  t.hits = static_cast<std::size_t>(std::count_if(
      deviations.begin(), deviations.end(), [&](double d) { return d >= t.threshold; }));
  t.probability = static_cast<double>(t.hits) / static_cast<double>(t.trials);
  t.std_error = std::sqrt(t.probability * (1.0 - t.probability) / static_cast<double>(t.trials));
  return t;
}

TailEstimate empirical_deviation_tail(Strategy strategy, const Partition& partition,
                                      const LabeledDataset& dataset, std::size_t global_batch,
                                      double epsilon, std::size_t trials, std::uint64_t seed,
                                      unsigned workers) {
  const auto deltas =
      first_step_deviations(strategy, partition, dataset, global_batch, trials, seed, workers);
  return tail_from_deviations(deltas, epsilon, dataset.num_classes);
}

std::vector<double> epoch_deviation_curve(const BatchSchedule& schedule, const Partition& partition,
                                          const LabeledDataset& dataset, std::uint64_t seed) {
  schedule.validate(partition.client_sizes);
  const auto pool_dist = class_distribution(dataset.labels, dataset.num_classes);
  DepletionState state(partition.client_indices);
  std::vector<Rng> rngs;
  for (std::size_t k = 0; k < state.num_clients(); ++k) rngs.push_back(client_draw_rng(seed, k));

  std::vector<double> curve;
  std::vector<std::size_t> counts(static_cast<std::size_t>(dataset.num_classes));
  for (const auto& row : schedule.steps) {
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t k = 0; k < row.size(); ++k)
      for (std::size_t idx : state.draw(k, row[k], rngs[k]))
        ++counts[static_cast<std::size_t>(dataset.labels[idx])];
    curve.push_back(l1_deviation_from_counts(counts, pool_dist));
  }
  return curve;
}

std::vector<double> centralized_deviation_curve(const LabeledDataset& dataset,
                                                std::size_t global_batch, std::uint64_t seed) {
  const auto pool_dist = class_distribution(dataset.labels, dataset.num_classes);
  std::vector<double> curve;
  for (const auto& batch : centralized_batches(dataset.size(), global_batch, seed))
    curve.push_back(l1_deviation(dataset.gather_labels(batch), pool_dist));
  return curve;
}

std::vector<double> ema_smooth(std::span<const double> values, double factor) {
  if (!(factor > 0.0 && factor <= 1.0))
    throw std::invalid_argument("ema: smoothing factor must lie in (0, 1]");
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(out.empty() ? v : (1.0 - factor) * out.back() + factor * v);
  return out;
}

namespace {

double log_binomial(std::size_t n, std::size_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

}  // namespace

std::map<std::vector<std::size_t>, double> exact_composition_distribution(
    std::span<const std::size_t> group_sizes, std::size_t batch) {
  const std::size_t pool =
      std::accumulate(group_sizes.begin(), group_sizes.end(), std::size_t{0});
  if (batch > pool) throw std::invalid_argument("oracle: B exceeds the pool size");
  if (log_binomial(pool, batch) > std::log(1e7) + 1e-9)
    throw std::invalid_argument("oracle scale exceeded");

  std::vector<std::size_t> owner;
  for (std::size_t g = 0; g < group_sizes.size(); ++g) owner.insert(owner.end(), group_sizes[g], g);

  std::map<std::vector<std::size_t>, std::size_t> tally;
  std::size_t subsets = 0;
  std::vector<std::size_t> pick(batch);
  std::iota(pick.begin(), pick.end(), std::size_t{0});
  std::vector<std::size_t> comp(group_sizes.size());
  while (true) {
    std::fill(comp.begin(), comp.end(), 0);
    for (std::size_t i : pick) ++comp[owner[i]];
    ++tally[comp];
    ++subsets;
    // Advance to the next B-subset in lexicographic order.
    std::size_t i = batch;
    while (i > 0 && pick[i - 1] == pool - batch + (i - 1)) --i;
    if (i == 0) break;
    ++pick[i - 1];
    for (std::size_t j = i; j < batch; ++j) pick[j] = pick[j - 1] + 1;
  }

  std::map<std::vector<std::size_t>, double> out;
  for (const auto& [c, n] : tally)
    out.emplace(c, static_cast<double>(n) / static_cast<double>(subsets));
  return out;
}

DeviationReport summarize_deviation(Strategy strategy, std::vector<double> per_step_delta,
                                    double ema_factor) {
  DeviationReport r;
  r.strategy = strategy;
  r.per_step_delta = std::move(per_step_delta);
  if (!r.per_step_delta.empty()) {
    const double n = static_cast<double>(r.per_step_delta.size());
    r.mean = std::accumulate(r.per_step_delta.begin(), r.per_step_delta.end(), 0.0) / n;
    double ss = 0.0;
    for (double d : r.per_step_delta) ss += (d - r.mean) * (d - r.mean);
    r.stddev = std::sqrt(ss / n);
    r.smoothed_delta = ema_smooth(r.per_step_delta, ema_factor);
  }
  return r;
}

nlohmann::json to_json(const TailEstimate& t) {
  return nlohmann::json{{"epsilon", t.epsilon},     {"threshold", t.threshold},
                        {"hits", t.hits},           {"trials", t.trials},
                        {"probability", t.probability}, {"std_error", t.std_error}};
}

nlohmann::json to_json(const DeviationReport& r) {
  nlohmann::json tails = nlohmann::json::array();
  for (std::size_t i = 0; i < r.tails.size(); ++i) {
    auto t = to_json(r.tails[i]);
    if (i < r.bounds.size()) t["serfling_bound"] = r.bounds[i];
    tails.push_back(std::move(t));
  }
  return nlohmann::json{{"strategy", to_string(r.strategy)},
                        {"steps", r.per_step_delta.size()},
                        {"mean", r.mean},
                        {"std", r.stddev},
                        {"per_step_delta", r.per_step_delta},
                        {"smoothed_delta", r.smoothed_delta},
                        {"tails", tails}};
}

}  // namespace psl
