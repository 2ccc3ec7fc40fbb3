#pragma once

#include <cstdint>
#include <random>

namespace psl {

using Rng = std::mt19937_64;

/// Derives an independent 64-bit seed for a named sub-stream (a client, an
/// epoch, a Monte Carlo trial) from a master seed. The mapping is two rounds
/// of the splitmix64 finalizer over (seed, stream), so the result depends only
/// on the pair and never on the order in which streams are requested.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) {
  return Rng(derive_seed(seed, stream));
}

// Stream tags keep sub-streams of one master seed apart.
namespace stream {
inline constexpr std::uint64_t kPartition = 0x70617274ULL;
inline constexpr std::uint64_t kSchedule = 0x73636864ULL;
inline constexpr std::uint64_t kClientDraw = 0x64726177ULL;
inline constexpr std::uint64_t kInit = 0x696e6974ULL;
inline constexpr std::uint64_t kEpoch = 0x65706f63ULL;
inline constexpr std::uint64_t kTrial = 0x7472696cULL;
}  // namespace stream

/// Uniform integer in [0, n). n must be positive.
std::uint64_t uniform_below(Rng& rng, std::uint64_t n);

}  // namespace psl
