#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cimdd/tape.hpp"

namespace cimdd {

struct GradCheckOptions {
  double eps = 1e-5;
  /// 0 checks every entry; otherwise a seeded random subset per parameter.
  std::size_t max_entries_per_param = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_error() const;
};

/// Builds a scalar loss on the supplied tape from the given parameters.
using LossFn = std::function<Var(Tape&)>;

/// Compares reverse-mode gradients with central finite differences.
/// Relative error is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).
/// Throws DeterminismError if two evaluations of `f` disagree.
GradCheckReport grad_check(const LossFn& f, const std::vector<Parameter*>& params,
                           const GradCheckOptions& opts = {});

}  // namespace cimdd
