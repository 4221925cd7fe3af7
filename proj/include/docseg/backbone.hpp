#pragma once

#include <map>
#include <vector>

#include <torch/torch.h>

namespace docseg::backbone {

struct BackboneConfig {
  int patch_size = 4;
  int in_channels = 3;
  int embed_dim = 64;
  std::vector<int> depths{1, 1, 2, 1};
  std::vector<int> heads{2, 4, 8, 8};
  int window_size = 8;
  double mlp_ratio = 4.0;
  bool relative_position_bias = false;
  /// Odd blocks of a stage use cyclically shifted windows.
  bool shifted_windows = true;

  int num_stages() const { return static_cast<int>(depths.size()); }
  int channels(int stage) const { return embed_dim << stage; }
  int stride(int stage) const { return patch_size << stage; }
  /// Input sides must be multiples of this.
  int input_multiple() const { return stride(num_stages() - 1); }
  void validate() const;
};

/// Backbone feature maps keyed by stride, each [C_s, H / stride, W / stride].
struct FeaturePyramid {
  std::map<int, torch::Tensor> levels;

  const torch::Tensor& at(int stride) const;
  bool all_finite() const;
};

/// Multi-head self-attention restricted to non-overlapping windows of a
/// [h, w, C] token grid, optionally on cyclically shifted windows.
class WindowAttentionImpl : public torch::nn::Module {
 public:
  WindowAttentionImpl(int dim, int heads, int max_window, bool relative_position_bias);

  /// When `attn` is given it receives the softmax weights, [num_windows, heads, N, N].
  torch::Tensor forward(const torch::Tensor& x, int window, bool shifted, torch::Tensor* attn = nullptr);

  int heads() const { return heads_; }
  torch::nn::Linear qkv{nullptr};
  torch::nn::Linear proj{nullptr};

 private:
  torch::Tensor relative_bias(int window) const;

  int dim_;
  int heads_;
  int max_window_;
  torch::Tensor bias_table_;
};
TORCH_MODULE(WindowAttention);

class SwinBlockImpl : public torch::nn::Module {
 public:
  SwinBlockImpl(int dim, int heads, int window, double mlp_ratio, bool shifted, bool relative_position_bias);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  int window_;
  bool shifted_;
  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  WindowAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(SwinBlock);

/// 2x2 neighbourhood concatenation followed by LayerNorm and a linear map 4C -> 2C.
class PatchMergingImpl : public torch::nn::Module {
 public:
  explicit PatchMergingImpl(int dim);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::LayerNorm norm{nullptr};
  torch::nn::Linear reduction{nullptr};
};
TORCH_MODULE(PatchMerging);

/// Non-overlapping patch_size x patch_size convolution: [3, H, W] -> [E, H/p, W/p].
class PatchEmbedImpl : public torch::nn::Module {
 public:
  PatchEmbedImpl(int in_channels, int embed_dim, int patch_size);
  torch::Tensor forward(const torch::Tensor& image);

  torch::nn::Conv2d proj{nullptr};

 private:
  int patch_size_;
};
TORCH_MODULE(PatchEmbed);

class SwinBackboneImpl : public torch::nn::Module {
 public:
  explicit SwinBackboneImpl(BackboneConfig cfg);

  /// image: [3, H, W] with H, W multiples of cfg.input_multiple().
  FeaturePyramid forward(const torch::Tensor& image);

  const BackboneConfig& config() const { return cfg_; }
  PatchEmbed patch_embed{nullptr};

 private:
  BackboneConfig cfg_;
  std::vector<std::vector<SwinBlock>> stages_;
  std::vector<PatchMerging> merges_;
  std::vector<torch::nn::LayerNorm> norms_;
};
TORCH_MODULE(SwinBackbone);

}  // namespace docseg::backbone
