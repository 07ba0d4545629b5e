#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cyto {

struct GradCheckResult {
  std::string name;   // op or layer under test
  double max_error;   // worst relative error over all instances
  bool pass;          // max_error <= tolerance
};

/// Central-difference gradient checks for every op kind and every layer on
/// `instances` random small inputs each (n <= 16, d <= 8); tolerance 1e-3.
std::vector<GradCheckResult> run_gradient_suite(int instances,
                                                std::uint64_t seed);

}  // namespace cyto
