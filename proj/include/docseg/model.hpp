#pragma once

#include <random>
#include <vector>

#include <torch/torch.h>

#include "docseg/backbone.hpp"
#include "docseg/queryselect.hpp"
#include "docseg/segbranch.hpp"
#include "docseg/synthdoc.hpp"
#include "docseg/transformer.hpp"

namespace docseg {

struct ModelConfig {
  backbone::BackboneConfig backbone;
  int num_classes = 5;
  int hidden_dim = 128;
  int mask_dim = 64;
  int ffn_dim = 256;
  int encoder_layers = 3;
  int decoder_layers = 3;
  int num_queries = 20;
  int attn_heads = 4;
  int num_points = 4;
  int low_dim = 32;
  int prototypes = 16;
  double prototype_momentum = 0.99;
  queryselect::ConcentrationParams concentration;
  double tau = 0.1;
  double anchor_threshold = 0.5;
  /// Encoder-stage masks go through the high-level projection first.
  bool use_high_projection = true;
  bool look_forward_twice = true;
  /// Adds the selected encoder tokens (detached) to the learnable content queries.
  bool content_from_tokens = false;
  transformer::CDNConfig cdn;

  /// Pyramid strides fed to the encoder (every stage but the first).
  std::vector<int> encoder_strides() const;
  void validate() const;
};

/// Everything one forward pass produces for a single image.
struct ModelOutput {
  /// Per decoder layer; denoising rows first, then num_queries matching rows.
  std::vector<segbranch::InstancePrediction> layers;
  std::vector<transformer::DecoderLayerOutput> decoder;
  transformer::CdnGroups cdn;
  int64_t num_cdn = 0;

  /// Encoder-stage predictions for the selected tokens; class logits are
  /// [K, C] without a background column.
  segbranch::InstancePrediction encoder;
  std::vector<int64_t> selected;
  torch::Tensor initial_anchors;  // [K, 4], derived from the encoder masks
  torch::Tensor initial_content;  // [K, D], matching content queries fed to the decoder

  queryselect::LowEmbeddings low;
  torch::Tensor high_features;  // [K, D_m] unit-norm
  std::vector<int64_t> prototype_assignment;
  torch::Tensor prototypes;  // snapshot of the bank used for the loss
  torch::Tensor phi;

  torch::Tensor pem;  // [D_m, H/4, W/4]

  /// Matching rows of the last decoder layer.
  segbranch::InstancePrediction final_matching() const;
};

class DocSegmenterImpl : public torch::nn::Module {
 public:
  explicit DocSegmenterImpl(ModelConfig cfg);

  /// image [3, H, W]. In train mode with `gt` and `rng` set and denoising
  /// enabled, denoising groups are built from the ground truth.
  ModelOutput forward(const torch::Tensor& image, transformer::Mode mode,
                      const std::vector<synthdoc::Instance>* gt = nullptr, std::mt19937_64* rng = nullptr);

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }

  backbone::SwinBackbone backbone{nullptr};
  std::vector<torch::nn::Conv2d> input_proj;
  transformer::PositionalEmbedding pos_embed{nullptr};
  torch::Tensor level_embed;
  transformer::Encoder encoder{nullptr};
  segbranch::PixelEmbedding pem{nullptr};
  queryselect::EncoderHeads enc_heads{nullptr};
  queryselect::ProjectionHead low_proj{nullptr};
  queryselect::ProjectionHead high_proj{nullptr};
  queryselect::PrototypeBank bank{nullptr};
  torch::nn::Embedding query_embed{nullptr};
  torch::nn::Embedding label_embed{nullptr};
  transformer::Decoder decoder{nullptr};
  segbranch::ClassInstanceMap instance_map{nullptr};

 private:
  ModelConfig cfg_;
};
TORCH_MODULE(DocSegmenter);

}  // namespace docseg
