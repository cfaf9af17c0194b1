#pragma once

#include <cstdint>
#include <random>

namespace xroute {

using Rng = std::mt19937_64;

/// Seeds an independent generator for (seed, stream). Distinct streams give
/// decorrelated sequences, so per-task or per-expert work can be scheduled in
/// any order and still reproduce the serial result.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return Rng(seq);
}

} // namespace xroute
