#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "psl/random.hpp"

namespace psl {

/// Batch sampling strategy. `centralized` pools all data at the server and
/// has no per-client schedule.
enum class Strategy { gpsl, fls, fpls, centralized };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

/// Per-step local batch sizes for one epoch.
struct BatchSchedule {
  Strategy strategy = Strategy::gpsl;
  std::size_t global_target = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> steps;  // steps[t][k]

  std::size_t num_steps() const { return steps.size(); }
  std::size_t num_clients() const { return steps.empty() ? 0 : steps.front().size(); }
  std::size_t global_size(std::size_t t) const;
  /// Samples contributed by each client over the whole epoch.
  std::vector<std::size_t> client_totals() const;

  /// Checks the strategy-specific invariants against the client sizes the
  /// schedule was built for.
  void validate(std::span<const std::size_t> client_sizes) const;
};

/// Server-driven global sampling. Each step performs min(B, remaining) draws;
/// a draw picks client k with probability remaining_k / remaining_total and
/// decrements it. Remaining counts carry over between steps and the epoch
/// ends when every client is exhausted.
BatchSchedule gpsl_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch,
                            std::uint64_t seed);

/// Incremental form of gpsl_schedule, one step at a time.
class GpslSampler {
 public:
  GpslSampler(std::span<const std::size_t> client_sizes, std::uint64_t seed);

  bool exhausted() const { return remaining_total_ == 0; }
  std::size_t remaining_total() const { return remaining_total_; }
  std::vector<std::size_t> next_step(std::size_t global_batch);

 private:
  std::vector<std::size_t> remaining_;
  std::size_t remaining_total_ = 0;
  Rng rng_;
};

/// Fixed local sampling: every client contributes ceil(B/K), clipped to what
/// it has left.
BatchSchedule fls_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch);

/// Fixed proportional sampling: client k contributes ceil(B * D_k / D_0) with
/// the proportions frozen at epoch start, clipped to what it has left.
BatchSchedule fpls_schedule(std::span<const std::size_t> client_sizes, std::size_t global_batch);

/// Dispatch for the three federated strategies. Throws for centralized.
BatchSchedule make_schedule(Strategy strategy, std::span<const std::size_t> client_sizes,
                            std::size_t global_batch, std::uint64_t seed);

/// The local batch sizes a fixed scheme uses before any clipping.
std::vector<std::size_t> fls_local_sizes(std::size_t clients, std::size_t global_batch);
std::vector<std::size_t> fpls_local_sizes(std::span<const std::size_t> client_sizes,
                                          std::size_t global_batch);

/// Number of steps with a non-empty global batch.
std::size_t steps_per_epoch(const BatchSchedule& schedule);

/// Remaining (not yet drawn) sample indices of every client in one epoch.
class DepletionState {
 public:
  explicit DepletionState(std::vector<std::vector<std::size_t>> client_indices);

  std::size_t num_clients() const { return remaining_indices_.size(); }
  std::size_t remaining(std::size_t client) const { return remaining_indices_.at(client).size(); }
  std::span<const std::size_t> remaining_indices(std::size_t client) const {
    return remaining_indices_.at(client);
  }

  /// Draws n indices uniformly without replacement from the client's
  /// remaining set and removes them. Throws "client depleted" when n exceeds
  /// what is left.
  std::vector<std::size_t> draw(std::size_t client, std::size_t n, Rng& rng);

 private:
  std::vector<std::vector<std::size_t>> remaining_indices_;
};

inline std::vector<std::size_t> draw_local_batch(DepletionState& state, std::size_t client,
                                                 std::size_t n, Rng& rng) {
  return state.draw(client, n, rng);
}

/// Uniformly shuffled pool [0, pool) cut into consecutive batches of B; the
/// last batch holds the remainder. This is the centralized baseline's epoch.
std::vector<std::vector<std::size_t>> centralized_batches(std::size_t pool,
                                                          std::size_t global_batch,
                                                          std::uint64_t seed);

/// RNG stream client k uses for its local draws in a given epoch.
Rng client_draw_rng(std::uint64_t seed, std::size_t client);

nlohmann::json schedule_to_json(const BatchSchedule& s);
BatchSchedule schedule_from_json(const nlohmann::json& j);

}  // namespace psl
