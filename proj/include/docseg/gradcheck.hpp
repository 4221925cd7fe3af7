#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "docseg/config.hpp"

namespace docseg {

struct GradcheckOptions {
  int num_params = 10;
  double eps = 1e-5;
  uint64_t seed = 0;
  /// Zero every loss weight; both gradients should vanish.
  bool zero_loss = false;
  bool float64 = true;
  /// Gaussian noise added to every parameter first, so zero-initialised
  /// projections do not hide gradient paths.
  double jitter = 0.02;
};

struct GradcheckEntry {
  std::string parameter;
  int64_t index = 0;  // flat element index
  double analytic = 0.0;
  double numeric = 0.0;
  double abs_error = 0.0;
  double rel_error = 0.0;  // |a - n| / max(|a|, |n|), 0 when both vanish
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  double loss = 0.0;
  std::map<std::string, double> terms;
  /// Parameter groups with no usable element (all gradients negligible).
  std::vector<std::string> skipped_groups;

  nlohmann::json to_json() const;
};

/// D=16, one layer per transformer stage, 64x64 images.
RunConfig tiny_gradcheck_config();

/// Module groups sampled round-robin so every part of the network is probed.
const std::vector<std::string>& gradcheck_groups();

/// Central differences on randomly chosen parameter elements against the
/// analytic gradient of total_loss on one synthetic sample. Elements whose
/// perturbation changes a discrete decision (token selection, anchors,
/// prototype assignment) are redrawn.
GradcheckReport gradcheck(const RunConfig& cfg, const GradcheckOptions& opts = {});

}  // namespace docseg
