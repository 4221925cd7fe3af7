#pragma once

#include <vector>

#include <torch/torch.h>

namespace docseg {

/// Fully connected stack with GELU between layers.
class MlpImpl : public torch::nn::Module {
 public:
  /// dims = {in, hidden..., out}; at least two entries.
  explicit MlpImpl(std::vector<int> dims);

  /// `hidden` receives the activation feeding the last linear layer.
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* hidden = nullptr);

  torch::nn::Linear layer(size_t i) const { return layers_.at(i); }
  size_t num_layers() const { return layers_.size(); }
  /// Zero the last layer, so the MLP starts out as the constant zero map.
  void zero_last();

 private:
  std::vector<torch::nn::Linear> layers_;
};
TORCH_MODULE(Mlp);

/// log(x / (1 - x)) with x clamped to [eps, 1 - eps].
torch::Tensor inverse_sigmoid(const torch::Tensor& x, double eps = 1e-5);

/// Sinusoidal embedding of normalized coordinates [Q, k] -> [Q, k * feats_per_coord].
torch::Tensor sine_embedding(const torch::Tensor& coords, int feats_per_coord, double temperature = 10000.0);

}  // namespace docseg
