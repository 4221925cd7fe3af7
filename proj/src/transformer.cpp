#include "docseg/transformer.hpp"

#include <cmath>

#include "docseg/errors.hpp"

namespace docseg::transformer {

torch::Tensor TokenSequence::level_map(int level_id) const {
  for (size_t b = 0; b < layout.num_blocks(); ++b) {
    if (layout.level_ids[b] != level_id) continue;
    const auto [h, w] = layout.shapes[b];
    const int64_t s = layout.start(b);
    return tokens.slice(0, s, s + h * w).t().reshape({tokens.size(1), h, w});
  }
  throw ShapeError("token sequence has no level " + std::to_string(level_id));
}

torch::Tensor token_reference_points(const LevelLayout& layout, const torch::TensorOptions& options) {
  std::vector<torch::Tensor> parts;
  for (const auto& [h, w] : layout.shapes) {
    auto ys = (torch::arange(h, options) + 0.5) / static_cast<double>(h);
    auto xs = (torch::arange(w, options) + 0.5) / static_cast<double>(w);
    auto grid = torch::meshgrid({ys, xs}, "ij");
    parts.push_back(torch::stack({grid[1].reshape({-1}), grid[0].reshape({-1})}, -1));
  }
  return torch::cat(parts, 0);
}

PositionalEmbeddingImpl::PositionalEmbeddingImpl(int in_channels, int dim) {
  conv1 = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, dim, 3).padding(1)));
  conv2 = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(dim, dim, 3).padding(1)));
}

torch::Tensor PositionalEmbeddingImpl::forward(const torch::Tensor& feature_map) {
  if (feature_map.dim() != 3) throw ShapeError("positional embedding: expected [C, h, w]");
  return conv2(torch::gelu(conv1(feature_map.unsqueeze(0)))).squeeze(0);
}

// ---------------------------------------------------------------------------

EncoderLayerImpl::EncoderLayerImpl(int dim, int heads, int num_levels, int points, int ffn_dim) {
  self_attn = register_module("self_attn", DeformableAttention(dim, heads, num_levels, points));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ffn1 = register_module("ffn1", torch::nn::Linear(dim, ffn_dim));
  ffn2 = register_module("ffn2", torch::nn::Linear(ffn_dim, dim));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor EncoderLayerImpl::forward(const torch::Tensor& src, const torch::Tensor& pos, const torch::Tensor& ref,
                                        const LevelLayout& layout) {
  auto x = norm1(src + self_attn(src + pos, ref, src, layout));
  return norm2(x + ffn2(torch::gelu(ffn1(x))));
}

EncoderImpl::EncoderImpl(int layers, int dim, int heads, int num_levels, int points, int ffn_dim) {
  for (int i = 0; i < layers; ++i)
    layers_.push_back(
        register_module("layer" + std::to_string(i), EncoderLayer(dim, heads, num_levels, points, ffn_dim)));
}

TokenSequence EncoderImpl::forward(const TokenSequence& input) {
  if (input.tokens.size(0) != input.layout.total_tokens() || input.positions.sizes() != input.tokens.sizes())
    throw ShapeError("encoder: tokens, positions and layout disagree");
  TokenSequence out = input;
  if (layers_.empty()) return out;
  auto ref = token_reference_points(input.layout, input.tokens.options());
  auto x = input.tokens;
  for (auto& layer : layers_) x = layer(x, input.positions, ref, input.layout);
  out.tokens = x;
  return out;
}

// ---------------------------------------------------------------------------

void CDNConfig::validate() const {
  if (!(lambda_p > 0.0) || !(lambda_p < lambda_e))
    throw ConfigError("cdn: require 0 < lambda_p < lambda_e (got lambda_p=" + std::to_string(lambda_p) +
                      ", lambda_e=" + std::to_string(lambda_e) + ")");
  if (num_groups < 1) throw ConfigError("cdn: num_groups must be >= 1");
  if (label_flip_prob < 0.0 || label_flip_prob > 1.0) throw ConfigError("cdn: label_flip_prob must lie in [0, 1]");
}

int64_t QuerySet::num_cdn() const {
  int64_t n = 0;
  for (int g : cdn_group) n += g >= 0;
  return n;
}

QuerySet QuerySet::matching(torch::Tensor content, torch::Tensor anchors) {
  QuerySet q;
  const int64_t n = content.size(0);
  q.content = std::move(content);
  q.anchors = std::move(anchors);
  q.cdn_group.assign(n, -1);
  q.polarity.assign(n, Polarity::none);
  return q;
}

QuerySet QuerySet::concat(const QuerySet& cdn, const QuerySet& matching) {
  if (cdn.size() == 0) return matching;
  QuerySet q;
  q.content = torch::cat({cdn.content, matching.content}, 0);
  q.anchors = torch::cat({cdn.anchors, matching.anchors}, 0);
  q.cdn_group = cdn.cdn_group;
  q.cdn_group.insert(q.cdn_group.end(), matching.cdn_group.begin(), matching.cdn_group.end());
  q.polarity = cdn.polarity;
  q.polarity.insert(q.polarity.end(), matching.polarity.begin(), matching.polarity.end());
  return q;
}

std::array<double, 4> relative_box_noise(const BoxCXCYWH& noised, const BoxCXCYWH& gt) {
  return {(noised.cx - gt.cx) / (0.5 * gt.w), (noised.cy - gt.cy) / (0.5 * gt.h), noised.w / gt.w - 1.0,
          noised.h / gt.h - 1.0};
}

CdnGroups build_cdn_groups(const std::vector<synthdoc::Instance>& gt, const CDNConfig& cfg, int num_classes,
                           std::mt19937_64& rng) {
  cfg.validate();
  if (num_classes < 1) throw ConfigError("cdn: num_classes must be positive");
  CdnGroups out;
  const int q = static_cast<int>(gt.size());
  if (q == 0 || !cfg.enabled) {
    out.anchors = torch::zeros({0, 4}, torch::kFloat64);
    out.relative_noise = torch::zeros({0, 4}, torch::kFloat64);
    return out;
  }
  out.num_groups = cfg.num_groups;
  out.per_group = 2 * q;
  const int total = cfg.num_groups * 2 * q;
  out.anchors = torch::empty({total, 4}, torch::kFloat64);
  out.relative_noise = torch::empty({total, 4}, torch::kFloat64);
  auto anchors = out.anchors.accessor<double, 2>();
  auto noise = out.relative_noise.accessor<double, 2>();

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution flip(cfg.label_flip_prob);
  auto magnitude = [&](bool positive) {
    const double lo = positive ? 0.0 : cfg.lambda_p;
    const double hi = positive ? cfg.lambda_p : cfg.lambda_e;
    for (;;) {
      const double m = lo + (hi - lo) * unit(rng);
      if (m < hi && (positive || m > lo)) return m;
    }
  };
  constexpr double kEdge = 1e-4;

  int row = 0;
  for (int g = 0; g < cfg.num_groups; ++g) {
    for (int pass = 0; pass < 2; ++pass) {
      const bool positive = pass == 0;
      for (int k = 0; k < q; ++k, ++row) {
        const BoxCXCYWH& box = gt[k].box;
        double rho[4];
        for (double& r : rho) r = (coin(rng) ? 1.0 : -1.0) * magnitude(positive);
        const double noised[4] = {box.cx + rho[0] * 0.5 * box.w, box.cy + rho[1] * 0.5 * box.h,
                                  box.w * (1.0 + rho[2]), box.h * (1.0 + rho[3])};
        for (int c = 0; c < 4; ++c) {
          anchors[row][c] = std::clamp(noised[c], kEdge, 1.0 - kEdge);
          noise[row][c] = rho[c];
        }
        int label = gt[k].class_id;
        if (positive && num_classes > 1 && flip(rng)) {
          const int shift = std::uniform_int_distribution<int>(1, num_classes - 1)(rng);
          label = (label + shift) % num_classes;
        }
        out.input_labels.push_back(label);
        out.target_class.push_back(positive ? gt[k].class_id : num_classes);
        out.gt_index.push_back(k);
        out.group.push_back(g);
        out.polarity.push_back(positive ? Polarity::positive : Polarity::negative);
      }
    }
  }
  return out;
}

torch::Tensor cdn_attention_mask(const QuerySet& queries) {
  std::vector<int64_t> groups(queries.cdn_group.begin(), queries.cdn_group.end());
  auto g = torch::tensor(groups, torch::kLong);
  return g.unsqueeze(1).ne(g.unsqueeze(0));
}

int64_t attention_mask_violations(const QuerySet& queries, const torch::Tensor& mask) {
  const int64_t n = queries.size();
  if (mask.dim() != 2 || mask.size(0) != n || mask.size(1) != n) return n * n;
  const auto mb = mask.to(torch::kBool).contiguous();
  auto m = mb.accessor<bool, 2>();
  int64_t violations = 0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      const int gi = queries.cdn_group[i];
      const int gj = queries.cdn_group[j];
      bool must_block = false;
      if (gi < 0 && gj >= 0) must_block = true;                // matching -> denoising
      if (gi >= 0 && gj >= 0 && gi != gj) must_block = true;   // across denoising groups
      if (gi >= 0 && gj < 0) must_block = true;                // denoising -> matching
      violations += m[i][j] != must_block;
    }
  }
  return violations;
}

// ---------------------------------------------------------------------------

DecoderLayerImpl::DecoderLayerImpl(int dim, int heads, int num_levels, int points, int ffn_dim) {
  self_attn = register_module("self_attn", MultiHeadAttention(dim, heads));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  cross_attn = register_module("cross_attn", DeformableAttention(dim, heads, num_levels, points));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  ffn1 = register_module("ffn1", torch::nn::Linear(dim, ffn_dim));
  ffn2 = register_module("ffn2", torch::nn::Linear(ffn_dim, dim));
  norm3 = register_module("norm3", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

torch::Tensor DecoderLayerImpl::forward(const torch::Tensor& tgt, const torch::Tensor& query_pos,
                                        const torch::Tensor& anchors, const torch::Tensor& blocked,
                                        const TokenSequence& memory) {
  auto q = tgt + query_pos;
  auto x = norm1(tgt + self_attn(q, q, tgt, blocked));
  x = norm2(x + cross_attn(x + query_pos, anchors, memory.tokens, memory.layout));
  return norm3(x + ffn2(torch::gelu(ffn1(x))));
}

DecoderImpl::DecoderImpl(int layers, int dim, int heads, int num_levels, int points, int ffn_dim,
                         bool look_forward_twice)
    : dim_(dim), look_forward_twice_(look_forward_twice) {
  if (dim % 2 != 0) throw ConfigError("decoder: hidden dim must be even");
  for (int i = 0; i < layers; ++i) {
    layers_.push_back(
        register_module("layer" + std::to_string(i), DecoderLayer(dim, heads, num_levels, points, ffn_dim)));
    // Separate refinement head per layer.
    bbox_heads_.push_back(register_module("bbox_head" + std::to_string(i), Mlp(std::vector<int>{dim, dim, dim, 4})));
    bbox_heads_.back()->zero_last();
  }
  ref_point_head = register_module("ref_point_head", Mlp(std::vector<int>{2 * dim, dim, dim}));
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
}

std::vector<DecoderLayerOutput> DecoderImpl::forward(const QuerySet& queries, const TokenSequence& memory,
                                                     Mode mode) {
  if (mode == Mode::infer && queries.has_cdn())
    throw ContractError("decoder: denoising queries must be removed before inference");
  if (queries.content.dim() != 2 || queries.content.size(1) != dim_ || queries.anchors.size(0) != queries.size())
    throw ShapeError("decoder: query content/anchors disagree with the query set");

  auto blocked = cdn_attention_mask(queries);
  auto tgt = queries.content;
  auto reference = queries.anchors.detach();
  // Undetached reference produced by the previous layer; its refinement
  // head receives gradient from this layer's box loss.
  auto previous = reference;
  std::vector<DecoderLayerOutput> outputs;
  for (size_t i = 0; i < layers_.size(); ++i) {
    auto query_pos = ref_point_head(sine_embedding(reference, dim_ / 2));
    tgt = layers_[i](tgt, query_pos, reference, blocked, memory);
    auto emb = norm(tgt);
    auto delta = bbox_heads_[i](emb);
    auto refined = torch::sigmoid(
        (inverse_sigmoid(reference) + delta).clamp(-kAnchorLogitClamp, kAnchorLogitClamp));
    torch::Tensor reported = refined;
    if (look_forward_twice_ && i > 0)
      reported = torch::sigmoid(
          (inverse_sigmoid(previous) + delta).clamp(-kAnchorLogitClamp, kAnchorLogitClamp));
    outputs.push_back({emb, reported});
    previous = refined;
    reference = refined.detach();
  }
  return outputs;
}

}  // namespace docseg::transformer
