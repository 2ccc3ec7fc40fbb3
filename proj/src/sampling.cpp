#include "psl/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace psl {

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::gpsl: return "gpsl";
    case Strategy::fls: return "fls";
    case Strategy::fpls: return "fpls";
    case Strategy::centralized: return "cl";
  }
  return "unknown";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "gpsl") return Strategy::gpsl;
  if (s == "fls") return Strategy::fls;
  if (s == "fpls") return Strategy::fpls;
  if (s == "cl" || s == "centralized") return Strategy::centralized;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

std::size_t BatchSchedule::global_size(std::size_t t) const {
  const auto& row = steps.at(t);
  return std::accumulate(row.begin(), row.end(), std::size_t{0});
}

std::vector<std::size_t> BatchSchedule::client_totals() const {
  std::vector<std::size_t> totals(num_clients(), 0);
  for (const auto& row : steps)
    for (std::size_t k = 0; k < row.size(); ++k) totals[k] += row[k];
  return totals;
}

void BatchSchedule::validate(std::span<const std::size_t> client_sizes) const {
  for (const auto& row : steps) {
    if (row.size() != client_sizes.size())
      throw std::invalid_argument("schedule/partition mismatch: client count differs");
    if (std::accumulate(row.begin(), row.end(), std::size_t{0}) == 0)
      throw std::invalid_argument("schedule contains an empty step");
  }
  const auto totals = client_totals();
  for (std::size_t k = 0; k < totals.size(); ++k) {
    if (totals[k] > client_sizes[k])
      throw std::invalid_argument("schedule/partition mismatch: client " + std::to_string(k) +
                                  " over-drawn");
    if (strategy == Strategy::gpsl && totals[k] != client_sizes[k])
      throw std::invalid_argument("schedule/partition mismatch: client " + std::to_string(k) +
                                  " not exhausted");
  }
  if (strategy == Strategy::gpsl) {
    for (std::size_t t = 0; t + 1 < steps.size(); ++t)
      if (global_size(t) != global_target)
        throw std::invalid_argument("gpsl schedule: step size differs from B");
  }
}

GpslSampler::GpslSampler(std::span<const std::size_t> client_sizes, std::uint64_t seed)
    : remaining_(client_sizes.begin(), client_sizes.end()),
      remaining_total_(std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0})),
      rng_(make_rng(seed, stream::kSchedule)) {}

std::vector<std::size_t> GpslSampler::next_step(std::size_t global_batch) {
  std::vector<std::size_t> counts(remaining_.size(), 0);
  const std::size_t draws = std::min(global_batch, remaining_total_);
  for (std::size_t i = 0; i < draws; ++i) {
    // Inverse CDF over the cumulative remaining counts; one uniform variate
    // per draw, exact in integer arithmetic.
    std::uint64_t u = uniform_below(rng_, remaining_total_);
    std::size_t k = 0;
    while (u >= remaining_[k]) {
      u -= remaining_[k];
      ++k;
    }
    ++counts[k];
    --remaining_[k];
    --remaining_total_;
  }
  return counts;
}

BatchSchedule gpsl_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch,
                            std::uint64_t seed) {
  if (global_batch < 1) throw std::invalid_argument("gpsl: global batch size must be >= 1");
  if (std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0}) == 0)
    throw std::invalid_argument("gpsl: empty pool");
  BatchSchedule s;
  s.strategy = Strategy::gpsl;
  s.global_target = global_batch;
  s.seed = seed;
  GpslSampler sampler(client_sizes, seed);
  while (!sampler.exhausted()) s.steps.push_back(sampler.next_step(global_batch));
  return s;
}

namespace {

BatchSchedule fixed_schedule(Strategy strategy, std::span<const std::size_t> client_sizes,
                             std::span<const std::size_t> per_step, std::size_t global_batch) {
  BatchSchedule s;
  s.strategy = strategy;
  s.global_target = global_batch;
  std::vector<std::size_t> remaining(client_sizes.begin(), client_sizes.end());
  std::size_t total = std::accumulate(remaining.begin(), remaining.end(), std::size_t{0});
  while (total > 0) {
    std::vector<std::size_t> row(remaining.size());
    std::size_t step_total = 0;
    for (std::size_t k = 0; k < remaining.size(); ++k) {
      row[k] = std::min(per_step[k], remaining[k]);
      remaining[k] -= row[k];
      step_total += row[k];
    }
    if (step_total == 0) throw std::logic_error("fixed schedule: no client can contribute");
    total -= step_total;
    s.steps.push_back(std::move(row));
  }
  return s;
}

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace

std::vector<std::size_t> fls_local_sizes(std::size_t clients, std::size_t global_batch) {
  if (clients < 1) throw std::invalid_argument("fls: client count must be >= 1");
  if (global_batch < 1) throw std::invalid_argument("fls: global batch size must be >= 1");
  return std::vector<std::size_t>(clients, ceil_div(global_batch, clients));
}

std::vector<std::size_t> fpls_local_sizes(std::span<const std::size_t> client_sizes,
                                          std::size_t global_batch) {
  if (global_batch < 1) throw std::invalid_argument("fpls: global batch size must be >= 1");
  const std::size_t pool =
      std::accumulate(client_sizes.begin(), client_sizes.end(), std::size_t{0});
  if (pool == 0) throw std::invalid_argument("fpls: empty pool");
  std::vector<std::size_t> out;
  out.reserve(client_sizes.size());
  for (std::size_t d : client_sizes) out.push_back(ceil_div(global_batch * d, pool));
  return out;
}

BatchSchedule fls_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch) {
  const auto per_step = fls_local_sizes(client_sizes.size(), global_batch);
  return fixed_schedule(Strategy::fls, client_sizes, per_step, global_batch);
}

BatchSchedule fpls_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch) {
  const auto per_step = fpls_local_sizes(client_sizes, global_batch);
  return fixed_schedule(Strategy::fpls, client_sizes, per_step, global_batch);
}

BatchSchedule make_schedule(Strategy strategy, std::span<const std::size_t> client_sizes,
                            std::size_t global_batch, std::uint64_t seed) {
  BatchSchedule s;
  switch (strategy) {
    case Strategy::gpsl: return gpsl_schedule(client_sizes, global_batch, seed);
    case Strategy::fls: s = fls_schedule(client_sizes, global_batch); break;
    case Strategy::fpls: s = fpls_schedule(client_sizes, global_batch); break;
    case Strategy::centralized:
      throw std::invalid_argument("centralized training has no client schedule");
  }
  s.seed = seed;
  return s;
}

std::size_t steps_per_epoch(const BatchSchedule& schedule) {
  std::size_t t = 0;
  for (std::size_t i = 0; i < schedule.steps.size(); ++i)
    if (schedule.global_size(i) >= 1) ++t;
  return t;
}

DepletionState::DepletionState(std::vector<std::vector<std::size_t>> client_indices)
    : remaining_indices_(std::move(client_indices)) {}

std::vector<std::size_t> DepletionState::draw(std::size_t client, std::size_t n, Rng& rng) {
  auto& pool = remaining_indices_.at(client);
  if (n > pool.size())
    throw std::out_of_range("client depleted: client " + std::to_string(client) + " has " +
                            std::to_string(pool.size()) + " samples left, asked for " +
                            std::to_string(n));
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = uniform_below(rng, pool.size());
    out.push_back(pool[j]);
    pool[j] = pool.back();
    pool.pop_back();
  }
  return out;
}

std::vector<std::vector<std::size_t>> centralized_batches(std::size_t pool,
                                                          std::size_t global_batch,
                                                          std::uint64_t seed) {
  if (global_batch < 1) throw std::invalid_argument("centralized: global batch size must be >= 1");
  if (global_batch > pool) throw std::invalid_argument("centralized: B exceeds the pool size");
  std::vector<std::size_t> order(pool);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, stream::kSchedule);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t pos = 0; pos < pool; pos += global_batch) {
    const std::size_t end = std::min(pool, pos + global_batch);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(pos),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

Rng client_draw_rng(std::uint64_t seed, std::size_t client) {
  return make_rng(derive_seed(seed, stream::kClientDraw), client);
}

nlohmann::json schedule_to_json(const BatchSchedule& s) {
  return nlohmann::json{{"strategy", to_string(s.strategy)},
                        {"B", s.global_target},
                        {"seed", s.seed},
                        {"T", steps_per_epoch(s)},
                        {"steps", s.steps}};
}

BatchSchedule schedule_from_json(const nlohmann::json& j) {
  BatchSchedule s;
  s.strategy = strategy_from_string(j.at("strategy").get<std::string>());
  s.global_target = j.at("B").get<std::size_t>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.steps = j.at("steps").get<std::vector<std::vector<std::size_t>>>();
  return s;
}

}  // namespace psl
