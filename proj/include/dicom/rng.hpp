#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace dicom {

using Rng = std::mt19937_64;

// Derives an independent generator from a root seed and a list of stream
// coordinates (step, worker, purpose ...).
template <typename... Ints>
Rng derive_rng(std::uint64_t seed, Ints... coords) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(coords)...};
  return Rng(seq);
}

std::string serialize_rng(const Rng& rng);
Rng deserialize_rng(const std::string& text);

double uniform(Rng& rng, double lo, double hi);
double normal(Rng& rng, double mean, double stddev);
// Normal sample truncated to [-2 stddev, 2 stddev] by rejection.
double trunc_normal(Rng& rng, double stddev);

}  // namespace dicom
