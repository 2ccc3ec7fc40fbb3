#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "psl/deviation.hpp"

namespace psl {
namespace {

using Sizes = std::vector<std::size_t>;

TEST(L1Deviation, MatchingBatchIsZero) {
  const ClassDistribution pool{{0.5, 0.25, 0.25}};
  EXPECT_DOUBLE_EQ(l1_deviation(std::vector<ClassId>{0, 1, 0, 2}, pool), 0.0);
}

TEST(L1Deviation, ExtremeBatch) {
  const ClassDistribution pool{{0.5, 0.5}};
  EXPECT_DOUBLE_EQ(l1_deviation(std::vector<ClassId>{0, 0, 0}, pool), 1.0);
}

TEST(L1Deviation, HandArithmetic) {
  const ClassDistribution pool{{0.5, 0.3, 0.2}};
  const std::vector<ClassId> batch{0, 0, 0, 0, 0, 0, 1, 1, 1, 2};
  EXPECT_NEAR(l1_deviation(batch, pool), 0.2, 1e-15);
}

TEST(L1Deviation, EmptyBatchErrors) {
  EXPECT_THROW(l1_deviation(std::vector<ClassId>{}, ClassDistribution{{1.0}}), std::invalid_argument);
}

TEST(L1Deviation, AlwaysWithinZeroTwo) {
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    const int m = 1 + static_cast<int>(uniform_below(rng, 8));
    std::vector<ClassId> pool_labels(1 + uniform_below(rng, 50));
    for (auto& y : pool_labels) y = static_cast<ClassId>(uniform_below(rng, static_cast<std::uint64_t>(m)));
    std::vector<ClassId> batch(1 + uniform_below(rng, 20));
    for (auto& y : batch) y = static_cast<ClassId>(uniform_below(rng, static_cast<std::uint64_t>(m)));
    const double d = l1_deviation(batch, class_distribution(pool_labels, m));
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0 + 1e-12);
  }
}

TEST(SerflingBound, FullPoolIsNegligible) {
  const BoundInputs in{0.1, 1000, 1000, 3};
  EXPECT_EQ(serfling_union_bound(in), 0.0);  // exp(-20000) underflows
  EXPECT_LT(serfling_log_bound(in), -1e4);
}

TEST(SerflingBound, LargeBatchValue) {
  // 20 exp(-20.48 / 0.97954), evaluated at 40 digits: 1.66302790699e-8.
  const BoundInputs in{0.1, 1024, 50000, 10};
  EXPECT_NEAR(serfling_union_bound(in), 1.66302790699124e-8, 1e-20);
  EXPECT_NEAR(serfling_union_bound_unclipped(in), 1.66302790699124e-8, 1e-20);
}

TEST(SerflingBound, VacuousRegimeIsClipped) {
  // 20 exp(-2.56 / 0.99746) = 1.53604866228732.
  const BoundInputs in{0.1, 128, 50000, 10};
  EXPECT_EQ(serfling_union_bound(in), 1.0);
  EXPECT_NEAR(serfling_union_bound_unclipped(in), 1.53604866228732, 1e-12);
}

TEST(SerflingBound, InvalidInputs) {
  EXPECT_THROW(serfling_union_bound({0.0, 10, 100, 2}), std::invalid_argument);
  EXPECT_THROW(serfling_union_bound({0.995, 10, 100, 2}), std::invalid_argument);
  EXPECT_THROW(serfling_union_bound({0.1, 101, 100, 2}), std::invalid_argument);
  EXPECT_THROW(serfling_union_bound({0.1, 0, 100, 2}), std::invalid_argument);
  EXPECT_NO_THROW(serfling_union_bound({0.99, 10, 100, 2}));
}

std::vector<ClassDistribution> one_hot(std::size_t k, std::size_t m) {
  std::vector<ClassDistribution> out;
  for (std::size_t i = 0; i < k; ++i) {
    ClassDistribution d{std::vector<double>(m, 0.0)};
    d.probs[i % m] = 1.0;
    out.push_back(d);
  }
  return out;
}

TEST(RoundingBias, NoRoundingNoBias) {
  const Sizes d{25, 25, 25, 25};
  const std::vector<ClassDistribution> iid(4, ClassDistribution{{0.2, 0.3, 0.5}});
  const auto r = rounding_bias(d, iid, 8);
  for (double b : r.per_class_bias) EXPECT_NEAR(b, 0.0, 1e-15);
  EXPECT_NEAR(r.size_mismatch, 0.0, 1e-15);
  EXPECT_DOUBLE_EQ(r.kb_ratio, 0.5);
}

TEST(RoundingBias, OneHotClientsHandComputed) {
  const Sizes d{10, 10, 10};
  const auto r = rounding_bias(d, one_hot(3, 3), 4);
  EXPECT_EQ(r.local_sizes, (Sizes{2, 2, 2}));
  for (double p : r.mixture) EXPECT_DOUBLE_EQ(p, 0.5);
  for (double b : r.per_class_bias) EXPECT_NEAR(b, 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(r.size_mismatch, 3.0 * (0.5 - 1.0 / 3.0), 1e-15);
}

TEST(RoundingBias, InequalityHoldsOnRandomInputs) {
  Rng rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t k = 1 + uniform_below(rng, 40);
    const std::size_t m = 1 + uniform_below(rng, 10);
    Sizes d(k);
    std::vector<ClassDistribution> dist(k);
    for (std::size_t i = 0; i < k; ++i) {
      d[i] = 1 + uniform_below(rng, 500);
      dist[i].probs.resize(m);
      double s = 0.0;
      for (auto& p : dist[i].probs) s += (p = u(rng));
      for (auto& p : dist[i].probs) p /= s;
    }
    const std::size_t b = 1 + uniform_below(rng, 256);
    const auto r = rounding_bias(d, dist, b);  // throws on violation
    for (double bias : r.per_class_bias) EXPECT_LE(bias, r.size_mismatch + 1e-12);
  }
}

TEST(RoundingBias, MismatchShrinksAsBatchGrows) {
  // Monte Carlo over random size vectors: doubling B (K fixed) weakly lowers
  // the size mismatch on average, following O(K / B).
  Rng rng(12);
  const std::size_t k = 32;
  double small_b = 0.0, large_b = 0.0;
  for (int c = 0; c < 1000; ++c) {
    Sizes d(k);
    for (auto& x : d) x = 1 + uniform_below(rng, 1000);
    const std::vector<ClassDistribution> dist(k, ClassDistribution{{1.0}});
    small_b += rounding_bias(d, dist, 64).size_mismatch;
    large_b += rounding_bias(d, dist, 128).size_mismatch;
  }
  EXPECT_LT(large_b, small_b);
  EXPECT_LE(small_b / 1000.0, static_cast<double>(k) / 64.0);
}

TEST(RoundingBias, Errors) {
  EXPECT_THROW(rounding_bias(Sizes{1, 2}, one_hot(2, 2), 0), std::invalid_argument);
  EXPECT_THROW(rounding_bias(Sizes{1, 2}, one_hot(3, 2), 4), std::invalid_argument);
}

TEST(ExactComposition, TinyInstances) {
  const auto a = exact_composition_distribution(Sizes{2, 3, 1}, 3);
  EXPECT_NEAR(a.at({1, 1, 1}), 0.3, 1e-15);
  double total = 0.0;
  for (const auto& [c, p] : a) {
    EXPECT_NEAR(p, oracle::mv_hypergeometric_pmf({2, 3, 1}, c), 1e-12);
    total += p;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);

  const auto full = exact_composition_distribution(Sizes{2, 3}, 5);
  ASSERT_EQ(full.size(), 1u);
  EXPECT_DOUBLE_EQ(full.begin()->second, 1.0);

  const auto pair = exact_composition_distribution(Sizes{1, 1}, 1);
  EXPECT_DOUBLE_EQ(pair.at({1, 0}), 0.5);
  EXPECT_DOUBLE_EQ(pair.at({0, 1}), 0.5);
}

TEST(ExactComposition, AgreesWithDrawPathWalk) {
  for (const Sizes& d : {Sizes{4, 4}, Sizes{1, 2, 3, 4}, Sizes{3, 0, 2}}) {
    const std::size_t b = std::min<std::size_t>(5, std::accumulate(d.begin(), d.end(), std::size_t{0}));
    EXPECT_LT(oracle::total_variation(exact_composition_distribution(d, b),
                                      oracle::gpsl_draw_paths(d, b)),
              1e-12);
  }
}

TEST(ExactComposition, ScaleGuard) {
  try {
    exact_composition_distribution(Sizes{30, 30}, 20);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("oracle scale exceeded"), std::string::npos);
  }
}

LabeledDataset pool_of(int classes, std::size_t per_class) {
  std::vector<ClassId> y;
  for (int m = 0; m < classes; ++m) y.insert(y.end(), per_class, m);
  return oracle::labels_only(y, classes);
}

TEST(EmpiricalTail, CentralizedFullBatchHasNoDeviation) {
  const auto ds = pool_of(4, 25);
  const auto p = iid_partition(ds, 1, 0);
  const auto t = empirical_deviation_tail(Strategy::centralized, p, ds, 100, 0.01, 200, 3);
  EXPECT_EQ(t.hits, 0u);
  EXPECT_EQ(t.probability, 0.0);
}

TEST(EmpiricalTail, IndependentOfWorkerCount) {
  const auto ds = pool_of(5, 40);
  const auto p = iid_partition(ds, 7, 1);
  const auto serial = first_step_deviations(Strategy::gpsl, p, ds, 20, 3000, 8, 1);
  const auto parallel = first_step_deviations(Strategy::gpsl, p, ds, 20, 3000, 8, 4);
  EXPECT_EQ(serial, parallel);
}

TEST(EmpiricalTail, GpslClassCountsFollowHypergeometricMoments) {
  // D_0 = 200 with class fractions (0.1, 0.3, 0.6), B = 40, severe partition.
  std::vector<ClassId> y;
  y.insert(y.end(), 20, 0);
  y.insert(y.end(), 60, 1);
  y.insert(y.end(), 120, 2);
  const auto ds = oracle::labels_only(y, 3);
  PartitionSpec spec;
  spec.kind = PartitionKind::extended_dirichlet;
  spec.clients = 6;
  spec.classes_per_client = 1;
  spec.alpha = 1.0;
  spec.seed = 2;
  const auto p = extended_dirichlet_partition(ds, spec);

  const std::size_t b = 40, trials = 20000;
  std::vector<double> sum(3, 0.0), sumsq(3, 0.0);
  for (std::size_t i = 0; i < trials; ++i) {
    const auto sizes = first_step_sizes(Strategy::gpsl, p.client_sizes, b, 1000 + i);
    // With one class per client the client composition is the class composition.
    std::vector<double> cls(3, 0.0);
    for (std::size_t k = 0; k < sizes.size(); ++k)
      for (std::size_t m = 0; m < 3; ++m)
        cls[m] += p.client_distributions[k].probs[m] > 0 ? static_cast<double>(sizes[k]) : 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      sum[m] += cls[m];
      sumsq[m] += cls[m] * cls[m];
    }
  }
  const double beta[3] = {0.1, 0.3, 0.6};
  for (std::size_t m = 0; m < 3; ++m) {
    const double mean = sum[m] / trials;
    const double var = sumsq[m] / trials - mean * mean;
    const double hyper_var = b * beta[m] * (1 - beta[m]) * (200.0 - b) / (200.0 - 1.0);
    EXPECT_NEAR(mean, b * beta[m], 3.0 * std::sqrt(hyper_var / trials));
    EXPECT_NEAR(var / hyper_var, 1.0, 0.1);
  }
}

TEST(EpochCurve, OneValuePerStepAndFullEpochHasZeroFinalDeviationForFullBatch) {
  const auto ds = pool_of(3, 10);
  const auto p = iid_partition(ds, 3, 0);
  const auto s = gpsl_schedule(p.client_sizes, 30, 1);
  const auto curve = epoch_deviation_curve(s, p, ds, 1);
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_NEAR(curve[0], 0.0, 1e-15);
  const auto c2 = epoch_deviation_curve(gpsl_schedule(p.client_sizes, 7, 1), p, ds, 1);
  EXPECT_EQ(c2.size(), 5u);
  EXPECT_EQ(centralized_deviation_curve(ds, 7, 1).size(), 5u);
}

TEST(Ema, SmoothsWithFactor) {
  const std::vector<double> v{1.0, 0.0, 0.0};
  const auto s = ema_smooth(v, 0.1);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 0.9);
  EXPECT_NEAR(s[2], 0.81, 1e-15);
  EXPECT_THROW(ema_smooth(v, 0.0), std::invalid_argument);
}

TEST(DeviationReport, Summary) {
  const auto r = summarize_deviation(Strategy::fls, {0.2, 0.4});
  EXPECT_NEAR(r.mean, 0.3, 1e-15);
  EXPECT_NEAR(r.stddev, 0.1, 1e-15);
  const auto j = to_json(r);
  EXPECT_EQ(j["strategy"], "fls");
  EXPECT_EQ(j["steps"], 2);
}

}  // namespace
}  // namespace psl

namespace psl {
namespace {

Partition one_hot_partition(const LabeledDataset& data) {
  PartitionSpec ps;
  ps.kind = PartitionKind::extended_dirichlet;
  ps.clients = 64;
  ps.classes_per_client = 1;
  ps.alpha = 3.0;
  ps.seed = 3;
  return build_partition(data, ps);
}

LabeledDataset ten_class_pool() {
  SyntheticSpec s;
  s.classes = 10;
  s.per_class_count = 1000;
  s.test_per_class_count = 1;
  s.feature_dim = 2;
  s.seed = 3;
  return make_synthetic(s).train;
}

// Mean and population std of the per-step deviation, averaged over 5 seeds.
std::pair<double, double> epoch_stats(Strategy st, const Partition& part, const LabeledDataset& data) {
  double mean = 0.0, sd = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = summarize_deviation(
        st, epoch_deviation_curve(make_schedule(st, part.client_sizes, 128, seed), part, data, seed));
    mean += r.mean / 5.0;
    sd += r.stddev / 5.0;
  }
  return {mean, sd};
}

TEST(EpochDeviation, FplsMeanAboveGpslOnOneHotClients) {
  const auto data = ten_class_pool();
  const auto part = one_hot_partition(data);
  for (int k = 0; k < part.num_clients(); ++k) ASSERT_EQ(distinct_classes(part, k), 1);
  EXPECT_GT(epoch_stats(Strategy::fpls, part, data).first, epoch_stats(Strategy::gpsl, part, data).first);
}

TEST(EpochDeviation, FplsFluctuatesMoreThanGpslOnOneHotClients) {
  const auto data = ten_class_pool();
  const auto part = one_hot_partition(data);
  EXPECT_GT(epoch_stats(Strategy::fpls, part, data).second, epoch_stats(Strategy::gpsl, part, data).second);
  EXPECT_GT(epoch_stats(Strategy::fls, part, data).second, epoch_stats(Strategy::gpsl, part, data).second);
}

}  // namespace
}  // namespace psl
