#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "docseg/matchloss.hpp"
#include "docseg/model.hpp"
#include "docseg/synthdoc.hpp"

namespace docseg {

struct ScheduleConfig {
  /// Negative values mean "derive from weights.mask" (3x and 1x).
  double w_start = -1.0;
  double w_end = -1.0;
  /// Portion of the run over which the weight decays.
  double fraction = 0.5;
  matchloss::DomainShiftSchedule::Shape shape = matchloss::DomainShiftSchedule::Shape::cosine;

  matchloss::DomainShiftSchedule resolve(double w_mask, int64_t steps) const;
};

struct RunConfig {
  RunConfig() { model.tau = queryselect::tau_preset(preset); }

  std::string preset = "publaynet";
  std::string dataset_path;  // empty selects synthetic data
  int synth_count = 10;
  uint64_t synth_seed = 0;
  synthdoc::SynthConfig synth;

  ModelConfig model;
  matchloss::LossConfig loss;
  ScheduleConfig schedule;

  double lr = 1e-4;
  double lr_final_fraction = 1.0;  // cosine decay to lr * fraction; 1 keeps lr constant
  int64_t steps = 2000;
  int batch = 2;
  uint64_t seed = 0;
  double grad_clip = 0.1;

  std::string out_dir = "runs/default";
  int64_t checkpoint_every = 500;
  bool float64 = false;

  double score_threshold = 0.05;
  int gradcheck_params = 10;
  double gradcheck_eps = 1e-5;

  void validate() const;
  /// Flat document with dotted keys.
  nlohmann::json to_json() const;
  /// Accepts flat dotted keys or nested objects; unknown keys throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::string& path);
};

/// All recognised dotted keys, in document order.
std::vector<std::string> config_keys();

/// Nested objects become dotted keys.
nlohmann::json flatten_config(const nlohmann::json& j);

}  // namespace docseg
