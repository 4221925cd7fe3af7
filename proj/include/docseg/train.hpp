#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "docseg/config.hpp"
#include "docseg/model.hpp"
#include "docseg/synthdoc.hpp"

namespace docseg {

struct StepRecord {
  int64_t step = 0;
  double total = 0.0;
  std::map<std::string, double> terms;
  double w_mask_eff = 0.0;

  nlohmann::json to_json() const;
};

struct TrainOptions {
  std::string resume;         // continue from this checkpoint (model + optimizer)
  std::string finetune_from;  // start from these weights with the mask-weight schedule
  std::ostream* log = nullptr;  // JSON lines; defaults to <out_dir>/metrics.jsonl
  std::function<void(const StepRecord&)> on_step;
  /// Overrides the configured data source when non-empty.
  std::vector<synthdoc::LayoutSample> samples;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::string final_checkpoint;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Synthetic samples or the dataset at cfg.dataset_path.
std::vector<synthdoc::LayoutSample> load_samples(const RunConfig& cfg);

/// Sample indices of one step; every epoch visits each sample once in an
/// order seeded by (seed, epoch).
std::vector<int64_t> batch_indices(uint64_t seed, int64_t step, int batch, int64_t num_samples);

/// Learning rate at `step`: constant, or cosine decay to lr * lr_final_fraction at the last step.
double learning_rate(const RunConfig& cfg, int64_t step);

/// Builds a model for `cfg` with weights seeded from cfg.seed, in the
/// configured precision.
DocSegmenter build_model(const RunConfig& cfg);

/// Adam on the summed batch loss; single-threaded runs are reproducible.
/// Throws TrainingError on a non-finite loss, naming the last good checkpoint.
TrainResult train(const RunConfig& cfg, const TrainOptions& opts = {});

}  // namespace docseg
