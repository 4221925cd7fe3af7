#pragma once

#include <cstdint>
#include <map>
#include <string>

#include <json.hpp>
#include <torch/torch.h>

#include "docseg/config.hpp"
#include "docseg/model.hpp"

namespace docseg {

/// On-disk layout: 8-byte magic, little-endian u64 header length, JSON
/// header, then raw tensor bytes at the offsets listed in the header.
/// Tensor names are "param.<name>", "buffer.<name>" and
/// "adam.<name>.exp_avg" / "adam.<name>.exp_avg_sq".
struct Checkpoint {
  nlohmann::json config;  // flat run configuration snapshot
  std::string preset;
  int64_t step = 0;
  std::map<std::string, int64_t> adam_steps;
  std::map<std::string, torch::Tensor> tensors;

  RunConfig run_config() const;
};

/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::string& path, DocSegmenter& model, const torch::optim::Adam* optimizer,
                     const RunConfig& cfg, int64_t step);
Checkpoint read_checkpoint(const std::string& path);

/// Copies parameters and buffers; a missing tensor or a shape mismatch
/// throws ConfigError naming the parameter.
void load_model_state(DocSegmenter& model, const Checkpoint& ckpt);
void load_optimizer_state(torch::optim::Adam& optimizer, DocSegmenter& model, const Checkpoint& ckpt);

}  // namespace docseg
