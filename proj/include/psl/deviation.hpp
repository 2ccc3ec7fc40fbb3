#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "psl/dataset.hpp"
#include "psl/partition.hpp"
#include "psl/sampling.hpp"

namespace psl {

/// l1 distance between a batch's class fractions and the pool distribution.
/// Always in [0, 2].
double l1_deviation(std::span<const ClassId> batch_labels, const ClassDistribution& pool);
double l1_deviation_from_counts(std::span<const std::size_t> class_counts,
                                const ClassDistribution& pool);

struct BoundInputs {
  double epsilon = 0.0;
  std::size_t batch = 0;
  std::size_t pool = 0;
  int classes = 0;

  /// Requires 1 <= B <= D_0, M >= 1 and 0 < eps <= 1 - 1/D_0.
  void validate() const;
};

/// Union bound over classes of the finite-population Serfling tail:
///   2M exp(-2 eps^2 B / (1 - (B-1)/D_0))
/// bounds Pr(Delta >= M eps) for a uniform without-replacement batch.
/// The unclipped form is evaluated in log space and may exceed 1.
double serfling_union_bound_unclipped(const BoundInputs& in);
double serfling_log_bound(const BoundInputs& in);
/// min(1, unclipped).
double serfling_union_bound(const BoundInputs& in);

/// Systematic per-class error of fixed proportional local batches.
struct RoundingBias {
  std::vector<std::size_t> local_sizes;  // ceil(B D_k / D_0)
  std::vector<double> mixture;           // sum_k (local_k / B) beta_k
  std::vector<double> per_class_bias;    // |mixture_m - beta_0m|
  double total_bias = 0.0;               // sum over classes
  double size_mismatch = 0.0;            // sum_k |local_k / B - D_k / D_0|
  double kb_ratio = 0.0;                 // K / B
};

/// Throws std::logic_error if any per-class bias exceeds the size mismatch
/// (beyond 1e-12 of rounding slack); that inequality is a theorem, so a
/// violation means the inputs were inconsistent.
RoundingBias rounding_bias(std::span<const std::size_t> client_sizes,
                           std::span<const ClassDistribution> client_distributions,
                           std::size_t global_batch);

/// Composition of the first step of a freshly scheduled epoch.
std::vector<std::size_t> first_step_sizes(Strategy strategy,
                                          std::span<const std::size_t> client_sizes,
                                          std::size_t global_batch, std::uint64_t seed);

/// l1 deviations of `trials` independent first-step global batches. Trial i
/// uses only streams derived from (seed, i), so the result does not depend on
/// `workers`. For the centralized strategy the batch is a uniform draw of
/// min(B, D_0) samples from the pool.
std::vector<double> first_step_deviations(Strategy strategy, const Partition& partition,
                                          const LabeledDataset& dataset, std::size_t global_batch,
                                          std::size_t trials, std::uint64_t seed,
                                          unsigned workers = 1);

struct TailEstimate {
  double epsilon = 0.0;
  double threshold = 0.0;  // M * epsilon
  std::size_t hits = 0;
  std::size_t trials = 0;
  double probability = 0.0;
  double std_error = 0.0;  // sqrt(p (1 - p) / trials)
};

TailEstimate tail_from_deviations(std::span<const double> deviations, double epsilon,
                                  int num_classes);

/// Fraction of first-step batches with Delta >= M * epsilon.
TailEstimate empirical_deviation_tail(Strategy strategy, const Partition& partition,
                                      const LabeledDataset& dataset, std::size_t global_batch,
                                      double epsilon, std::size_t trials, std::uint64_t seed,
                                      unsigned workers = 1);

/// Per-step deviation over one epoch of `schedule`, drawing the local batches
/// exactly as the training engine does for the same seed.
std::vector<double> epoch_deviation_curve(const BatchSchedule& schedule, const Partition& partition,
                                          const LabeledDataset& dataset, std::uint64_t seed);

/// Per-step deviation of one epoch of uniformly shuffled pooled batches.
std::vector<double> centralized_deviation_curve(const LabeledDataset& dataset,
                                                std::size_t global_batch, std::uint64_t seed);

/// Exponential moving average, s_0 = v_0 and s_t = (1 - f) s_{t-1} + f v_t.
std::vector<double> ema_smooth(std::span<const double> values, double factor = 0.1);

/// Exact law of the per-group composition of a uniform B-subset of the pool,
/// found by enumerating every subset. Groups may be clients or classes.
/// Throws "oracle scale exceeded" when C(D_0, B) > 1e7.
std::map<std::vector<std::size_t>, double> exact_composition_distribution(
    std::span<const std::size_t> group_sizes, std::size_t batch);

struct DeviationReport {
  Strategy strategy = Strategy::gpsl;
  std::vector<double> per_step_delta;
  std::vector<double> smoothed_delta;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<TailEstimate> tails;
  std::vector<double> bounds;  // clipped Serfling bound per tail epsilon
};

/// Mean and population standard deviation of the curve, plus EMA smoothing.
DeviationReport summarize_deviation(Strategy strategy, std::vector<double> per_step_delta,
                                    double ema_factor = 0.1);

nlohmann::json to_json(const DeviationReport& r);
nlohmann::json to_json(const TailEstimate& t);

}  // namespace psl
