#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include <torch/torch.h>

#include "docseg/attention.hpp"
#include "docseg/layers.hpp"
#include "docseg/synthdoc.hpp"

namespace docseg::transformer {

/// Flattened multi-scale tokens with their positional embeddings.
struct TokenSequence {
  torch::Tensor tokens;     // [N, D]
  torch::Tensor positions;  // [N, D]
  LevelLayout layout;

  int64_t size() const { return tokens.size(0); }
  torch::Tensor level_index() const { return layout.level_index(); }
  /// Tokens of pyramid level `level_id` as a [D, h, w] map.
  torch::Tensor level_map(int level_id) const;
};

/// Centres of every token cell in normalized (x, y), [N, 2].
torch::Tensor token_reference_points(const LevelLayout& layout, const torch::TensorOptions& options);

/// Two 3x3 convolutions with a GELU in between, padding 1.
class PositionalEmbeddingImpl : public torch::nn::Module {
 public:
  PositionalEmbeddingImpl(int in_channels, int dim);
  torch::Tensor forward(const torch::Tensor& feature_map);  // [C, h, w] -> [D, h, w]

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(PositionalEmbedding);

class EncoderLayerImpl : public torch::nn::Module {
 public:
  EncoderLayerImpl(int dim, int heads, int num_levels, int points, int ffn_dim);
  torch::Tensor forward(const torch::Tensor& src, const torch::Tensor& pos, const torch::Tensor& ref,
                        const LevelLayout& layout);

 private:
  DeformableAttention self_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(EncoderLayer);

/// Deformable self-attention over all tokens. Positions steer the sampling
/// (queries) but are never mixed into the values.
class EncoderImpl : public torch::nn::Module {
 public:
  EncoderImpl(int layers, int dim, int heads, int num_levels, int points, int ffn_dim);
  TokenSequence forward(const TokenSequence& input);

  int num_layers() const { return static_cast<int>(layers_.size()); }

 private:
  std::vector<EncoderLayer> layers_;
};
TORCH_MODULE(Encoder);

// ---------------------------------------------------------------------------
// Contrastive denoising queries

struct CDNConfig {
  double lambda_p = 0.02;
  double lambda_e = 0.1;
  int num_groups = 2;
  double label_flip_prob = 0.2;
  bool enabled = true;

  void validate() const;
};

enum class Polarity { none, positive, negative };

/// Decoder queries. Denoising groups come first, matching queries last.
struct QuerySet {
  torch::Tensor content;  // [Q, D]
  torch::Tensor anchors;  // [Q, 4] cx, cy, w, h in (0, 1)
  std::vector<int> cdn_group;      // -1 for matching queries
  std::vector<Polarity> polarity;  // none for matching queries

  int64_t size() const { return static_cast<int64_t>(cdn_group.size()); }
  int64_t num_cdn() const;
  bool has_cdn() const { return num_cdn() > 0; }
  /// Denoising queries of `cdn` followed by the matching queries of `matching`.
  static QuerySet concat(const QuerySet& cdn, const QuerySet& matching);
  static QuerySet matching(torch::Tensor content, torch::Tensor anchors);
};

/// Noised ground truth for all denoising groups. Within a group: one
/// positive per GT box, then one negative per GT box.
struct CdnGroups {
  torch::Tensor anchors;         // [Qc, 4] float64
  torch::Tensor relative_noise;  // [Qc, 4] applied per-coordinate relative noise
  std::vector<int> input_labels;   // noised labels that seed the content queries
  std::vector<int> target_class;   // GT class for positives, num_classes (background) for negatives
  std::vector<int> gt_index;       // source GT for every query
  std::vector<int> group;
  std::vector<Polarity> polarity;
  int num_groups = 0;
  int per_group = 0;

  int64_t size() const { return static_cast<int64_t>(group.size()); }
};

/// Relative per-coordinate noise of `noised` w.r.t. `gt`: centre shifts in
/// units of half the GT extent, size changes as ratios minus one.
std::array<double, 4> relative_box_noise(const BoxCXCYWH& noised, const BoxCXCYWH& gt);

/// Positives get |noise| < lambda_p on every coordinate, negatives
/// lambda_p < |noise| < lambda_e. Throws ConfigError if lambda_p >= lambda_e.
CdnGroups build_cdn_groups(const std::vector<synthdoc::Instance>& gt, const CDNConfig& cfg, int num_classes,
                           std::mt19937_64& rng);

/// [Q, Q] boolean mask, true where attention is blocked: denoising groups
/// only see themselves, matching queries only see matching queries.
torch::Tensor cdn_attention_mask(const QuerySet& queries);

/// Checks a mask against the isolation rules; returns the number of entries
/// that differ from the required pattern (0 = valid).
int64_t attention_mask_violations(const QuerySet& queries, const torch::Tensor& mask);

// ---------------------------------------------------------------------------
// Decoder

enum class Mode { train, infer };

struct DecoderLayerOutput {
  torch::Tensor embeddings;  // [Q, D], normalized
  torch::Tensor anchors;     // [Q, 4] refined boxes used for the loss
};

class DecoderLayerImpl : public torch::nn::Module {
 public:
  DecoderLayerImpl(int dim, int heads, int num_levels, int points, int ffn_dim);
  torch::Tensor forward(const torch::Tensor& tgt, const torch::Tensor& query_pos, const torch::Tensor& anchors,
                        const torch::Tensor& blocked, const TokenSequence& memory);

 private:
  MultiHeadAttention self_attn{nullptr};
  DeformableAttention cross_attn{nullptr};
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
  torch::nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(DecoderLayer);

/// Largest |logit| an anchor coordinate may reach.
inline constexpr double kAnchorLogitClamp = 8.0;

class DecoderImpl : public torch::nn::Module {
 public:
  DecoderImpl(int layers, int dim, int heads, int num_levels, int points, int ffn_dim, bool look_forward_twice);

  /// One entry per layer. Throws ContractError if denoising queries reach
  /// inference.
  std::vector<DecoderLayerOutput> forward(const QuerySet& queries, const TokenSequence& memory, Mode mode);

  int num_layers() const { return static_cast<int>(layers_.size()); }
  bool look_forward_twice() const { return look_forward_twice_; }
  void set_look_forward_twice(bool on) { look_forward_twice_ = on; }
  Mlp bbox_head(int layer) const { return bbox_heads_.at(layer); }

 private:
  int dim_;
  bool look_forward_twice_;
  std::vector<DecoderLayer> layers_;
  std::vector<Mlp> bbox_heads_;
  Mlp ref_point_head{nullptr};
  torch::nn::LayerNorm norm{nullptr};
};
TORCH_MODULE(Decoder);

}  // namespace docseg::transformer
