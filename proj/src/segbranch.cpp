#include "docseg/segbranch.hpp"

#include <algorithm>

#include "docseg/errors.hpp"

namespace docseg::segbranch {

namespace F = torch::nn::functional;

torch::Tensor upsample2x(const torch::Tensor& map) {
  if (map.dim() != 3) throw ShapeError("upsample2x: expected [C, h, w]");
  return F::interpolate(map.unsqueeze(0), F::InterpolateFuncOptions()
                                              .size(std::vector<int64_t>{2 * map.size(1), 2 * map.size(2)})
                                              .mode(torch::kBilinear)
                                              .align_corners(false))
      .squeeze(0);
}

PixelEmbeddingImpl::PixelEmbeddingImpl(int backbone_channels, int dim, int mask_dim) {
  gamma = register_module("gamma", torch::nn::Conv2d(torch::nn::Conv2dOptions(backbone_channels, dim, 1)));
  head_a = register_module("head_a", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
  head_b = register_module("head_b", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
  head_out = register_module("head_out", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, mask_dim, 1)));
}

torch::Tensor PixelEmbeddingImpl::forward(const torch::Tensor& s_b, const torch::Tensor& t_e) {
  if (s_b.dim() != 3 || t_e.dim() != 3) throw ShapeError("pixel embedding: expected [C, h, w] inputs");
  auto up = upsample2x(t_e);
  if (up.size(1) != s_b.size(1) || up.size(2) != s_b.size(2))
    throw ShapeError("pixel embedding: upsampled encoder map does not match the stride-4 map");
  auto fused = gamma(s_b.unsqueeze(0)) + up.unsqueeze(0);
  auto refined = fused + head_b(torch::gelu(head_a(fused)));
  return head_out(refined).squeeze(0);
}

torch::Tensor predict_masks(const torch::Tensor& q_e, const torch::Tensor& pem) {
  if (q_e.dim() != 2 || pem.dim() != 3 || q_e.size(1) != pem.size(0))
    throw ShapeError("predict_masks: query width must match the pixel embedding channels");
  const int64_t h = pem.size(1), w = pem.size(2);
  return torch::matmul(q_e, pem.reshape({pem.size(0), h * w})).view({q_e.size(0), h, w});
}

InstancePrediction InstancePrediction::slice(int64_t begin, int64_t end) const {
  return {class_logits.slice(0, begin, end), boxes.slice(0, begin, end), mask_logits.slice(0, begin, end)};
}

ClassInstanceMapImpl::ClassInstanceMapImpl(int dim, int num_classes, int mask_dim) {
  class_head = register_module("class_head", torch::nn::Linear(dim, num_classes + 1));
  mask_embed = register_module("mask_embed", Mlp(std::vector<int>{dim, dim, mask_dim}));
}

InstancePrediction ClassInstanceMapImpl::forward(const torch::Tensor& embeddings, const torch::Tensor& anchors,
                                                 const torch::Tensor& pem) {
  InstancePrediction out;
  out.class_logits = class_head(embeddings);
  out.boxes = anchors;
  out.mask_logits = predict_masks(mask_embed(embeddings), pem);
  return out;
}

std::vector<int64_t> foreground_queries(const torch::Tensor& class_logits) {
  const int64_t background = class_logits.size(1) - 1;
  auto arg = class_logits.detach().argmax(1).contiguous();
  std::vector<int64_t> keep;
  const int64_t* a = arg.data_ptr<int64_t>();
  for (int64_t q = 0; q < arg.numel(); ++q)
    if (a[q] != background) keep.push_back(q);
  return keep;
}

std::vector<Detection> postprocess(const InstancePrediction& pred, int height, int width, double score_threshold) {
  torch::NoGradGuard guard;
  std::vector<Detection> dets;
  auto probs = torch::softmax(pred.class_logits.detach().to(torch::kFloat64), 1);
  const int64_t num_classes = probs.size(1) - 1;
  for (int64_t q : foreground_queries(pred.class_logits)) {
    auto fg = probs[q].slice(0, 0, num_classes);
    auto best = fg.max(0);
    const double score = std::get<0>(best).item<double>();
    if (score < score_threshold) continue;
    Detection d;
    d.class_id = static_cast<int>(std::get<1>(best).item<int64_t>());
    d.score = score;
    auto b = pred.boxes[q].detach().to(torch::kFloat64);
    d.box = {b[0].item<double>(), b[1].item<double>(), b[2].item<double>(), b[3].item<double>()};
    auto logits = pred.mask_logits[q].detach().unsqueeze(0).unsqueeze(0);
    auto up = F::interpolate(logits, F::InterpolateFuncOptions()
                                         .size(std::vector<int64_t>{height, width})
                                         .mode(torch::kBilinear)
                                         .align_corners(false));
    d.mask = up.squeeze(0).squeeze(0).gt(0.0);
    dets.push_back(std::move(d));
  }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return dets;
}

}  // namespace docseg::segbranch
