#pragma once

#include <vector>

#include <torch/torch.h>

#include "docseg/box.hpp"
#include "docseg/layers.hpp"

namespace docseg::segbranch {

/// Bilinear 2x upsampling of a [C, h, w] map (half-pixel centres).
torch::Tensor upsample2x(const torch::Tensor& map);

/// Fuses the stride-4 backbone map with the upsampled stride-8 encoder map:
///   pem = head( gamma(S_b) + upsample2x(T_e) )
/// gamma is a 1x1 convolution onto the transformer width; head is a
/// residual pair of 3x3 convolutions followed by a 1x1 projection to D_m.
class PixelEmbeddingImpl : public torch::nn::Module {
 public:
  PixelEmbeddingImpl(int backbone_channels, int dim, int mask_dim);

  /// s_b [C4, H/4, W/4], t_e [D, H/8, W/8] -> [D_m, H/4, W/4]
  torch::Tensor forward(const torch::Tensor& s_b, const torch::Tensor& t_e);

  torch::nn::Conv2d gamma{nullptr};
  torch::nn::Conv2d head_a{nullptr}, head_b{nullptr}, head_out{nullptr};
};
TORCH_MODULE(PixelEmbedding);

/// mask_logits[q, y, x] = sum_d q_e[q, d] * pem[d, y, x]
torch::Tensor predict_masks(const torch::Tensor& q_e, const torch::Tensor& pem);

/// Class, box and mask of every query, all derived from the same embedding.
struct InstancePrediction {
  torch::Tensor class_logits;  // [Q, C + 1], last column is background
  torch::Tensor boxes;         // [Q, 4]
  torch::Tensor mask_logits;   // [Q, H/4, W/4]

  int64_t size() const { return class_logits.size(0); }
  InstancePrediction slice(int64_t begin, int64_t end) const;
};

class ClassInstanceMapImpl : public torch::nn::Module {
 public:
  ClassInstanceMapImpl(int dim, int num_classes, int mask_dim);
  InstancePrediction forward(const torch::Tensor& embeddings, const torch::Tensor& anchors, const torch::Tensor& pem);

  torch::nn::Linear class_head{nullptr};
  Mlp mask_embed{nullptr};
};
TORCH_MODULE(ClassInstanceMap);

struct Detection {
  int class_id = 0;
  double score = 0.0;
  BoxCXCYWH box;
  torch::Tensor mask;  // bool [H, W] at image resolution
};

/// Queries whose arg-max class is not background, in query order.
std::vector<int64_t> foreground_queries(const torch::Tensor& class_logits);

/// Inference filter: drop background-argmax queries and scores below
/// `score_threshold`; masks are upsampled to (height, width) and binarised at
/// sigmoid > 0.5. Score = best foreground class probability. Sorted by score.
std::vector<Detection> postprocess(const InstancePrediction& pred, int height, int width, double score_threshold);

}  // namespace docseg::segbranch
