#include "dicom/rng.hpp"

#include <cmath>
#include <sstream>

namespace dicom {

std::string serialize_rng(const Rng& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

Rng deserialize_rng(const std::string& text) {
  Rng rng;
  std::istringstream in(text);
  in >> rng;
  return rng;
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

double normal(Rng& rng, double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(rng);
}

double trunc_normal(Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (;;) {
    double z = dist(rng);
    if (std::abs(z) <= 2.0) return z * stddev;
  }
}

}  // namespace dicom
