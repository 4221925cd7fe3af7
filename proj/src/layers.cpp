#include "docseg/layers.hpp"

#include <cmath>

#include "docseg/errors.hpp"

namespace docseg {

MlpImpl::MlpImpl(std::vector<int> dims) {
  if (dims.size() < 2) throw ConfigError("mlp: needs input and output dims");
  for (size_t i = 0; i + 1 < dims.size(); ++i)
    layers_.push_back(register_module("fc" + std::to_string(i), torch::nn::Linear(dims[i], dims[i + 1])));
}

torch::Tensor MlpImpl::forward(const torch::Tensor& x, torch::Tensor* hidden) {
  torch::Tensor h = x;
  for (size_t i = 0; i + 1 < layers_.size(); ++i) h = torch::gelu(layers_[i](h));
  if (hidden) *hidden = h;
  return layers_.back()(h);
}

void MlpImpl::zero_last() {
  torch::NoGradGuard guard;
  layers_.back()->weight.zero_();
  layers_.back()->bias.zero_();
}

torch::Tensor inverse_sigmoid(const torch::Tensor& x, double eps) {
  auto c = x.clamp(eps, 1.0 - eps);
  return torch::log(c / (1.0 - c));
}

torch::Tensor sine_embedding(const torch::Tensor& coords, int feats_per_coord, double temperature) {
  if (feats_per_coord % 2 != 0) throw ConfigError("sine embedding: feature count must be even");
  const auto opts = coords.options();
  auto i = torch::arange(feats_per_coord, opts);
  auto dim_t = torch::pow(temperature, 2.0 * torch::floor(i / 2.0) / feats_per_coord);
  auto scaled = coords.unsqueeze(-1) * (2.0 * M_PI) / dim_t;  // [Q, k, F]
  auto even = scaled.index({"...", torch::indexing::Slice(0, torch::indexing::None, 2)}).sin();
  auto odd = scaled.index({"...", torch::indexing::Slice(1, torch::indexing::None, 2)}).cos();
  return torch::stack({even, odd}, -1).flatten(-2).flatten(-2);
}

}  // namespace docseg
