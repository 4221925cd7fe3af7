#pragma once

#include <utility>
#include <vector>

#include <torch/torch.h>

namespace docseg::transformer {

/// Bilinear interpolation of `map` at normalized (x, y) points, zero outside
/// the map. Point (x, y) addresses pixel coordinates (x * w - 0.5, y * h - 0.5),
/// so cell centres land exactly on cell values. Differentiable in both inputs.
///
/// map [C, h, w], points [P, 2] -> [P, C]; or the grouped form
/// map [G, C, h, w], points [G, P, 2] -> [G, P, C].
torch::Tensor bilinear_sample(const torch::Tensor& map, const torch::Tensor& points);

/// Where each pyramid level lives inside a flattened token sequence.
/// `level_ids` name the pyramid level (and therefore the per-level
/// parameters) of each block, independent of the block order.
struct LevelLayout {
  std::vector<std::pair<int64_t, int64_t>> shapes;  // (h, w) per block
  std::vector<int> level_ids;

  int64_t total_tokens() const;
  int64_t start(size_t block) const;
  size_t num_blocks() const { return shapes.size(); }
  /// [N] level id of every token.
  torch::Tensor level_index() const;
  void validate(int num_levels) const;
};

/// Multi-scale deformable attention: each query samples `points` locations
/// per head and level around its reference point (2-d) or box (4-d) and
/// mixes them with softmax weights normalised over all levels x points.
class DeformableAttentionImpl : public torch::nn::Module {
 public:
  DeformableAttentionImpl(int dim, int heads, int num_levels, int points);

  /// query [Q, D], ref [Q, 2] or [Q, 4], value [N, D] laid out per `layout`.
  /// `weights` receives the attention weights [Q, heads, blocks, points].
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& ref, const torch::Tensor& value,
                        const LevelLayout& layout, torch::Tensor* weights = nullptr);

  int heads() const { return heads_; }
  int points() const { return points_; }

  torch::nn::Linear value_proj{nullptr};
  torch::nn::Linear sampling_offsets{nullptr};
  torch::nn::Linear attention_weights{nullptr};
  torch::nn::Linear output_proj{nullptr};

 private:
  int dim_, heads_, levels_, points_;
};
TORCH_MODULE(DeformableAttention);

/// Standard multi-head attention with a boolean mask (true = blocked).
class MultiHeadAttentionImpl : public torch::nn::Module {
 public:
  MultiHeadAttentionImpl(int dim, int heads);

  /// query [Q, D], key/value [K, D], blocked [Q, K] or undefined.
  /// `probs` receives [heads, Q, K].
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& key, const torch::Tensor& value,
                        const torch::Tensor& blocked = {}, torch::Tensor* probs = nullptr);

  torch::nn::Linear q_proj{nullptr}, k_proj{nullptr}, v_proj{nullptr}, out_proj{nullptr};

 private:
  int dim_, heads_;
};
TORCH_MODULE(MultiHeadAttention);

}  // namespace docseg::transformer
