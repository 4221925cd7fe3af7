#include "docseg/attention.hpp"

#include <cmath>
#include <limits>
#include <set>

#include "docseg/errors.hpp"

namespace docseg::transformer {

namespace {

torch::Tensor sample_grouped(const torch::Tensor& map, const torch::Tensor& points) {
  const int64_t G = map.size(0), C = map.size(1), h = map.size(2), w = map.size(3);
  const int64_t P = points.size(1);
  auto x = points.select(2, 0) * static_cast<double>(w) - 0.5;
  auto y = points.select(2, 1) * static_cast<double>(h) - 0.5;
  auto x0 = x.detach().floor();
  auto y0 = y.detach().floor();
  auto fx = x - x0;
  auto fy = y - y0;
  auto flat = map.reshape({G, C, h * w});
  torch::Tensor out;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      auto xi = x0 + dx;
      auto yi = y0 + dy;
      auto valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1);
      auto wx = dx ? fx : 1.0 - fx;
      auto wy = dy ? fy : 1.0 - fy;
      auto weight = wx * wy * valid.to(map.scalar_type());  // [G, P]
      auto index = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).to(torch::kLong);
      auto gathered = flat.gather(2, index.unsqueeze(1).expand({G, C, P}));  // [G, C, P]
      auto term = gathered * weight.unsqueeze(1);
      out = out.defined() ? out + term : term;
    }
  }
  return out.transpose(1, 2);  // [G, P, C]
}

}  // namespace

torch::Tensor bilinear_sample(const torch::Tensor& map, const torch::Tensor& points) {
  if (map.dim() == 3 && points.dim() == 2 && points.size(1) == 2)
    return sample_grouped(map.unsqueeze(0), points.unsqueeze(0)).squeeze(0);
  if (map.dim() == 4 && points.dim() == 3 && points.size(2) == 2 && points.size(0) == map.size(0))
    return sample_grouped(map, points);
  throw ShapeError("bilinear_sample: expected map [C,h,w] with points [P,2], or [G,C,h,w] with [G,P,2]");
}

// ---------------------------------------------------------------------------

int64_t LevelLayout::total_tokens() const {
  int64_t n = 0;
  for (const auto& [h, w] : shapes) n += h * w;
  return n;
}

int64_t LevelLayout::start(size_t block) const {
  int64_t n = 0;
  for (size_t i = 0; i < block; ++i) n += shapes[i].first * shapes[i].second;
  return n;
}

torch::Tensor LevelLayout::level_index() const {
  std::vector<torch::Tensor> parts;
  for (size_t b = 0; b < shapes.size(); ++b)
    parts.push_back(torch::full({shapes[b].first * shapes[b].second}, level_ids[b], torch::kLong));
  return parts.empty() ? torch::empty({0}, torch::kLong) : torch::cat(parts);
}

void LevelLayout::validate(int num_levels) const {
  if (shapes.empty()) throw ConfigError("deformable attention: empty value pyramid");
  if (shapes.size() != level_ids.size()) throw ShapeError("level layout: shapes and level ids differ in length");
  std::set<int> seen;
  for (size_t b = 0; b < shapes.size(); ++b) {
    if (level_ids[b] < 0 || level_ids[b] >= num_levels) throw ShapeError("level layout: level id out of range");
    if (!seen.insert(level_ids[b]).second) throw ShapeError("level layout: duplicate level id");
    if (shapes[b].first < 1 || shapes[b].second < 1) throw ShapeError("level layout: empty level");
  }
}

// ---------------------------------------------------------------------------

DeformableAttentionImpl::DeformableAttentionImpl(int dim, int heads, int num_levels, int points)
    : dim_(dim), heads_(heads), levels_(num_levels), points_(points) {
  if (heads < 1 || dim % heads != 0) throw ConfigError("deformable attention: heads must divide dim");
  if (points < 1) throw ConfigError("deformable attention: need at least one sampling point");
  if (num_levels < 1) throw ConfigError("deformable attention: empty value pyramid");
  value_proj = register_module("value_proj", torch::nn::Linear(dim, dim));
  sampling_offsets = register_module("sampling_offsets", torch::nn::Linear(dim, heads * num_levels * points * 2));
  attention_weights = register_module("attention_weights", torch::nn::Linear(dim, heads * num_levels * points));
  output_proj = register_module("output_proj", torch::nn::Linear(dim, dim));

  torch::NoGradGuard guard;
  // Offsets start as a fan of directions, one per head, growing with the point index.
  sampling_offsets->weight.zero_();
  auto theta = torch::arange(heads, torch::kFloat64) * (2.0 * M_PI / heads);
  auto grid = torch::stack({theta.cos(), theta.sin()}, -1);
  grid = grid / std::get<0>(grid.abs().max(-1, true));
  grid = grid.view({heads, 1, 1, 2}).repeat({1, num_levels, points, 1});
  for (int k = 0; k < points; ++k) grid.select(2, k).mul_(k + 1);
  sampling_offsets->bias.copy_(grid.reshape({-1}));
  attention_weights->weight.zero_();
  attention_weights->bias.zero_();
  torch::nn::init::xavier_uniform_(value_proj->weight);
  value_proj->bias.zero_();
  torch::nn::init::xavier_uniform_(output_proj->weight);
  output_proj->bias.zero_();
}

torch::Tensor DeformableAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& ref,
                                               const torch::Tensor& value, const LevelLayout& layout,
                                               torch::Tensor* weights) {
  layout.validate(levels_);
  const int64_t Q = query.size(0);
  const int64_t N = value.size(0);
  if (query.dim() != 2 || query.size(1) != dim_ || value.dim() != 2 || value.size(1) != dim_)
    throw ShapeError("deformable attention: query/value must be [*, D]");
  if (N != layout.total_tokens()) throw ShapeError("deformable attention: value length disagrees with layout");
  if (ref.dim() != 2 || ref.size(0) != Q || (ref.size(1) != 2 && ref.size(1) != 4))
    throw ShapeError("deformable attention: reference must be [Q, 2] or [Q, 4]");
  const int64_t hd = dim_ / heads_;
  const int64_t B = static_cast<int64_t>(layout.num_blocks());

  auto v = value_proj(value).view({N, heads_, hd});
  auto offsets = sampling_offsets(query).view({Q, heads_, levels_, points_, 2});
  auto logits = attention_weights(query).view({Q, heads_, levels_, points_});

  std::vector<int64_t> ids(layout.level_ids.begin(), layout.level_ids.end());
  auto id_tensor = torch::tensor(ids, torch::kLong);
  auto present = logits.index_select(2, id_tensor).reshape({Q, heads_, B * points_});
  auto attn = torch::softmax(present, -1).view({Q, heads_, B, points_});
  if (weights) *weights = attn;

  torch::Tensor out;
  for (int64_t b = 0; b < B; ++b) {
    const auto [h, w] = layout.shapes[b];
    const int lid = layout.level_ids[b];
    const int64_t s = layout.start(b);
    auto vmap = v.slice(0, s, s + h * w).permute({1, 2, 0}).reshape({heads_, hd, h, w});
    auto off = offsets.select(2, lid);  // [Q, heads, K, 2]
    torch::Tensor loc;
    if (ref.size(1) == 2) {
      auto norm = torch::tensor({static_cast<double>(w), static_cast<double>(h)}, query.options());
      loc = ref.view({Q, 1, 1, 2}) + off / norm;
    } else {
      auto center = ref.slice(1, 0, 2).view({Q, 1, 1, 2});
      auto size = ref.slice(1, 2, 4).view({Q, 1, 1, 2});
      loc = center + off / static_cast<double>(points_) * size * 0.5;
    }
    auto pts = loc.permute({1, 0, 2, 3}).reshape({heads_, Q * points_, 2});
    auto sampled = bilinear_sample(vmap, pts).view({heads_, Q, points_, hd});
    auto a = attn.select(2, b).permute({1, 0, 2}).unsqueeze(-1);  // [heads, Q, K, 1]
    auto term = (sampled * a).sum(2);                               // [heads, Q, hd]
    out = out.defined() ? out + term : term;
  }
  return output_proj(out.permute({1, 0, 2}).reshape({Q, dim_}));
}

// ---------------------------------------------------------------------------

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int dim, int heads) : dim_(dim), heads_(heads) {
  if (heads < 1 || dim % heads != 0) throw ConfigError("attention: heads must divide dim");
  q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
  k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
  v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
  out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& key,
                                              const torch::Tensor& value, const torch::Tensor& blocked,
                                              torch::Tensor* probs) {
  const int64_t Q = query.size(0), K = key.size(0), hd = dim_ / heads_;
  auto q = q_proj(query).view({Q, heads_, hd}).transpose(0, 1);
  auto k = k_proj(key).view({K, heads_, hd}).transpose(0, 1);
  auto v = v_proj(value).view({K, heads_, hd}).transpose(0, 1);
  auto scores = torch::matmul(q, k.transpose(1, 2)) * (1.0 / std::sqrt(static_cast<double>(hd)));
  if (blocked.defined()) {
    if (blocked.size(0) != Q || blocked.size(1) != K) throw ShapeError("attention: mask shape mismatch");
    scores = scores.masked_fill(blocked.unsqueeze(0), -std::numeric_limits<double>::infinity());
  }
  auto p = torch::softmax(scores, -1);
  if (probs) *probs = p;
  return out_proj(torch::matmul(p, v).transpose(0, 1).reshape({Q, dim_}));
}

}  // namespace docseg::transformer
