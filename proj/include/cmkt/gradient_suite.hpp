#pragma once

#include <string>
#include <vector>

#include "cmkt/gradcheck.hpp"

namespace cmkt {

struct GradSuiteEntry {
  std::string name;
  GradReport report;
  bool passed = false;
};

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradStep = 1e-5;

// Finite-difference checks of every differentiable component, from single ops
// up to the end-to-end composite loss of the tiny preset.
std::vector<GradSuiteEntry> run_gradient_suite(std::uint64_t seed = 2024);

}  // namespace cmkt
