#include "docseg/backbone.hpp"

#include <cmath>
#include <limits>

#include "docseg/errors.hpp"

namespace docseg::backbone {

namespace idx = torch::indexing;

void BackboneConfig::validate() const {
  if (patch_size < 1 || embed_dim < 1 || window_size < 1) throw ConfigError("backbone: sizes must be positive");
  if (depths.empty() || depths.size() != heads.size())
    throw ConfigError("backbone: depths and heads must be non-empty and of equal length");
  for (int s = 0; s < num_stages(); ++s) {
    if (depths[s] < 1) throw ConfigError("backbone: every stage needs at least one block");
    if (heads[s] < 1 || channels(s) % heads[s] != 0)
      throw ConfigError("backbone: heads of stage " + std::to_string(s) + " do not divide its channels");
  }
}

const torch::Tensor& FeaturePyramid::at(int stride) const {
  auto it = levels.find(stride);
  if (it == levels.end()) throw ShapeError("feature pyramid has no level at stride " + std::to_string(stride));
  return it->second;
}

bool FeaturePyramid::all_finite() const {
  for (const auto& [stride, t] : levels)
    if (!torch::isfinite(t).all().item<bool>()) return false;
  return true;
}

// ---------------------------------------------------------------------------

WindowAttentionImpl::WindowAttentionImpl(int dim, int heads, int max_window, bool relative_position_bias)
    : dim_(dim), heads_(heads), max_window_(max_window) {
  if (heads < 1 || dim % heads != 0) throw ConfigError("window attention: heads must divide the channel dim");
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  if (relative_position_bias) {
    const int span = 2 * max_window - 1;
    bias_table_ = register_parameter("relative_position_bias_table", torch::zeros({span * span, heads}));
    {
      torch::NoGradGuard guard;
      bias_table_.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
    }
  }
}

torch::Tensor WindowAttentionImpl::relative_bias(int window) const {
  // [heads, N, N] bias indexed by relative offsets, centred in the table so
  // smaller effective windows reuse the inner entries.
  const int span = 2 * max_window_ - 1;
  auto coords = torch::arange(window, torch::kLong);
  auto yy = coords.view({window, 1}).expand({window, window}).reshape({-1});
  auto xx = coords.view({1, window}).expand({window, window}).reshape({-1});
  auto dy = yy.view({-1, 1}) - yy.view({1, -1}) + (max_window_ - 1);
  auto dx = xx.view({-1, 1}) - xx.view({1, -1}) + (max_window_ - 1);
  auto index = (dy * span + dx).reshape({-1});
  const int n = window * window;
  return bias_table_.index_select(0, index).view({n, n, heads_}).permute({2, 0, 1});
}

torch::Tensor WindowAttentionImpl::forward(const torch::Tensor& x, int window, bool shifted, torch::Tensor* attn) {
  if (x.dim() != 3 || x.size(2) != dim_) throw ShapeError("window attention: expected [h, w, C] with matching C");
  if (window < 1) throw ConfigError("window attention: window must be positive");
  const int64_t h = x.size(0), w = x.size(1);
  const int ws = static_cast<int>(std::min<int64_t>({window, h, w, max_window_}));
  const int64_t hp = (h + ws - 1) / ws * ws;
  const int64_t wp = (w + ws - 1) / ws * ws;
  torch::Tensor t = x;
  if (hp != h || wp != w) t = torch::constant_pad_nd(t, {0, 0, 0, wp - w, 0, hp - h});
  const bool do_shift = shifted && ws < hp && ws < wp;
  const int64_t s = ws / 2;
  if (do_shift) t = torch::roll(t, {-s, -s}, {0, 1});

  const int64_t nh = hp / ws, nw = wp / ws, n = static_cast<int64_t>(ws) * ws, nwin = nh * nw;
  auto windows = t.view({nh, ws, nw, ws, dim_}).permute({0, 2, 1, 3, 4}).reshape({nwin, n, dim_});
  const int64_t hd = dim_ / heads_;
  auto qkv_out = qkv(windows).view({nwin, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0] * (1.0 / std::sqrt(static_cast<double>(hd)));
  auto k = qkv_out[1];
  auto v = qkv_out[2];
  auto scores = torch::matmul(q, k.transpose(-2, -1));  // [nwin, heads, n, n]
  if (bias_table_.defined()) scores = scores + relative_bias(ws).unsqueeze(0);
  if (do_shift) {
    // Label the nine regions produced by the cyclic shift; tokens from
    // different regions must not attend to each other.
    auto labels = torch::zeros({hp, wp}, torch::kLong);
    const int64_t hb[4] = {0, hp - ws, hp - s, hp};
    const int64_t wb[4] = {0, wp - ws, wp - s, wp};
    int64_t label = 0;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        labels.index_put_({idx::Slice(hb[i], hb[i + 1]), idx::Slice(wb[j], wb[j + 1])}, label++);
    auto wl = labels.view({nh, ws, nw, ws}).permute({0, 2, 1, 3}).reshape({nwin, n});
    auto blocked = wl.unsqueeze(2).ne(wl.unsqueeze(1));  // [nwin, n, n]
    scores = scores.masked_fill(blocked.unsqueeze(1), -std::numeric_limits<double>::infinity());
  }
  auto probs = torch::softmax(scores, -1);
  if (attn) *attn = probs;
  auto out = torch::matmul(probs, v).transpose(1, 2).reshape({nwin, n, dim_});
  out = proj(out);
  out = out.view({nh, nw, ws, ws, dim_}).permute({0, 2, 1, 3, 4}).reshape({hp, wp, dim_});
  if (do_shift) out = torch::roll(out, {s, s}, {0, 1});
  if (hp != h || wp != w) out = out.index({idx::Slice(0, h), idx::Slice(0, w)});
  return out;
}

// ---------------------------------------------------------------------------

SwinBlockImpl::SwinBlockImpl(int dim, int heads, int window, double mlp_ratio, bool shifted,
                             bool relative_position_bias)
    : window_(window), shifted_(shifted) {
  const int hidden = static_cast<int>(std::lround(dim * mlp_ratio));
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  attn = register_module("attn", WindowAttention(dim, heads, window, relative_position_bias));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor SwinBlockImpl::forward(const torch::Tensor& x) {
  auto y = x + attn(norm1(x), window_, shifted_);
  return y + fc2(torch::gelu(fc1(norm2(y))));
}

PatchMergingImpl::PatchMergingImpl(int dim) {
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({4 * dim})));
  reduction = register_module("reduction", torch::nn::Linear(torch::nn::LinearOptions(4 * dim, 2 * dim).bias(false)));
}

torch::Tensor PatchMergingImpl::forward(const torch::Tensor& x) {
  if (x.size(0) % 2 != 0 || x.size(1) % 2 != 0) throw ShapeError("patch merging: odd spatial extent");
  using idx::Slice;
  auto x0 = x.index({Slice(0, idx::None, 2), Slice(0, idx::None, 2)});
  auto x1 = x.index({Slice(1, idx::None, 2), Slice(0, idx::None, 2)});
  auto x2 = x.index({Slice(0, idx::None, 2), Slice(1, idx::None, 2)});
  auto x3 = x.index({Slice(1, idx::None, 2), Slice(1, idx::None, 2)});
  return reduction(norm(torch::cat({x0, x1, x2, x3}, -1)));
}

PatchEmbedImpl::PatchEmbedImpl(int in_channels, int embed_dim, int patch_size) : patch_size_(patch_size) {
  proj = register_module(
      "proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, embed_dim, patch_size).stride(patch_size)));
}

torch::Tensor PatchEmbedImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 3) throw ShapeError("patch embed: expected [C, H, W]");
  if (image.size(1) % patch_size_ != 0 || image.size(2) % patch_size_ != 0)
    throw ShapeError("patch embed: image sides must be multiples of " + std::to_string(patch_size_));
  return proj(image.unsqueeze(0)).squeeze(0);
}

// ---------------------------------------------------------------------------

SwinBackboneImpl::SwinBackboneImpl(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  patch_embed = register_module("patch_embed", PatchEmbed(cfg_.in_channels, cfg_.embed_dim, cfg_.patch_size));
  for (int s = 0; s < cfg_.num_stages(); ++s) {
    const int dim = cfg_.channels(s);
    std::vector<SwinBlock> blocks;
    for (int b = 0; b < cfg_.depths[s]; ++b) {
      const bool shifted = cfg_.shifted_windows && (b % 2 == 1);
      blocks.push_back(register_module("stage" + std::to_string(s) + "_block" + std::to_string(b),
                                       SwinBlock(dim, cfg_.heads[s], cfg_.window_size, cfg_.mlp_ratio, shifted,
                                                 cfg_.relative_position_bias)));
    }
    stages_.push_back(std::move(blocks));
    norms_.push_back(register_module("stage" + std::to_string(s) + "_norm",
                                     torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}))));
    if (s + 1 < cfg_.num_stages())
      merges_.push_back(register_module("stage" + std::to_string(s) + "_merge", PatchMerging(dim)));
  }
}

FeaturePyramid SwinBackboneImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(0) != cfg_.in_channels) throw ShapeError("backbone: expected [3, H, W] image");
  const int m = cfg_.input_multiple();
  if (image.size(1) % m != 0 || image.size(2) % m != 0)
    throw ShapeError("backbone: image sides must be multiples of " + std::to_string(m));
  FeaturePyramid pyramid;
  auto x = patch_embed(image).permute({1, 2, 0});  // [h, w, C]
  for (int s = 0; s < cfg_.num_stages(); ++s) {
    for (auto& block : stages_[s]) x = block(x);
    pyramid.levels[cfg_.stride(s)] = norms_[s](x).permute({2, 0, 1}).contiguous();
    if (s + 1 < cfg_.num_stages()) x = merges_[s](x);
  }
  return pyramid;
}

}  // namespace docseg::backbone
