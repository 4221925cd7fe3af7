#include "docseg/queryselect.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "docseg/errors.hpp"

namespace docseg::queryselect {

torch::Tensor token_prior_boxes(const transformer::LevelLayout& layout, const torch::TensorOptions& options) {
  auto centers = transformer::token_reference_points(layout, options);
  std::vector<torch::Tensor> sizes;
  for (size_t b = 0; b < layout.num_blocks(); ++b) {
    const double side = 0.05 * std::pow(2.0, layout.level_ids[b]);
    sizes.push_back(torch::full({layout.shapes[b].first * layout.shapes[b].second, 2}, side, options));
  }
  return torch::cat({centers, torch::cat(sizes, 0)}, 1);
}

EncoderHeadsImpl::EncoderHeadsImpl(int dim, int num_classes, int mask_dim) {
  class_head = register_module("class_head", torch::nn::Linear(dim, num_classes));
  box_head = register_module("box_head", Mlp(std::vector<int>{dim, dim, dim, 4}));
  mask_head = register_module("mask_head", Mlp(std::vector<int>{dim, dim, dim, mask_dim}));
}

EncoderHeadOutput EncoderHeadsImpl::forward(const transformer::TokenSequence& memory) {
  EncoderHeadOutput out;
  out.class_logits = class_head(memory.tokens);
  auto prior = token_prior_boxes(memory.layout, memory.tokens.options());
  auto delta = box_head(memory.tokens, &out.det_features);
  out.boxes = torch::sigmoid(inverse_sigmoid(prior) + delta);
  out.mask_embed = mask_head(memory.tokens, &out.seg_features);
  return out;
}

std::vector<int64_t> select_topk(const torch::Tensor& class_logits, int64_t k) {
  if (class_logits.dim() != 2) throw ShapeError("select_topk: expected [N, C] logits");
  const int64_t n = class_logits.size(0);
  if (k > n) throw ConfigError("select_topk: K exceeds the number of tokens");
  if (k < 0) throw ConfigError("select_topk: K must be non-negative");
  auto best = std::get<0>(class_logits.detach().to(torch::kFloat64).max(1)).contiguous();
  const double* s = best.data_ptr<double>();
  std::vector<int64_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + k, order.end(), [s](int64_t a, int64_t b) {
    return s[a] > s[b] || (s[a] == s[b] && a < b);
  });
  order.resize(k);
  return order;
}

ProjectionHeadImpl::ProjectionHeadImpl(int in_dim, int out_dim, int layers) {
  if (layers < 1) throw ConfigError("projection head: needs at least one layer");
  std::vector<int> dims(layers + 1, in_dim);
  dims.back() = out_dim;
  mlp = register_module("mlp", Mlp(dims));
}

torch::Tensor ProjectionHeadImpl::forward(const torch::Tensor& x) {
  auto y = mlp(x);
  return y / y.norm(2, -1, true).clamp_min(1e-12);
}

ProjectionHead make_low_projection(int in_dim, int out_dim) { return ProjectionHead(in_dim, out_dim, 2); }
ProjectionHead make_high_projection(int in_dim, int out_dim) { return ProjectionHead(in_dim, out_dim, 4); }

ContrastiveLoss loss_low(const LowEmbeddings& emb) {
  if (!(emb.tau > 0.0)) throw ConfigError("loss_low: tau must be positive");
  const int64_t n = emb.detection.size(0), np = emb.segmentation.size(0), k = emb.candidates.size(0);
  if (n < 1 || np < 1 || k < 1) throw ShapeError("loss_low: every embedding set needs at least one row");
  // logits[j, c] = f_c . f_j / tau ; positives[i, j] = f_i . f_j / tau
  auto cand_logits = torch::matmul(emb.segmentation, emb.candidates.t()) / emb.tau;  // [n', k]
  auto log_denominator = torch::logsumexp(cand_logits, 1);                          // [n']
  auto pos = torch::matmul(emb.detection, emb.segmentation.t()) / emb.tau;          // [n, n']
  ContrastiveLoss out;
  if (emb.pairs.empty()) {
    out.sum = (log_denominator.unsqueeze(0) - pos).sum();
    out.pairs = n * np;
  } else {
    std::vector<int64_t> is, js;
    for (const auto& [i, j] : emb.pairs) {
      if (i < 0 || i >= n || j < 0 || j >= np) throw ShapeError("loss_low: pair index out of range");
      is.push_back(i);
      js.push_back(j);
    }
    auto ii = torch::tensor(is, torch::kLong);
    auto jj = torch::tensor(js, torch::kLong);
    out.sum = (log_denominator.index_select(0, jj) - pos.index({ii, jj})).sum();
    out.pairs = static_cast<int64_t>(emb.pairs.size());
  }
  out.mean = out.sum / static_cast<double>(out.pairs);
  return out;
}

ContrastiveLoss loss_high(const torch::Tensor& features, const torch::Tensor& prototypes, const torch::Tensor& phi,
                          const std::vector<int64_t>& assignment, const torch::Tensor& candidates) {
  if (prototypes.dim() != 2 || prototypes.size(0) == 0) throw ConfigError("loss_high: empty prototype bank");
  if (static_cast<int64_t>(assignment.size()) != features.size(0))
    throw ShapeError("loss_high: one assignment per feature required");
  const int64_t m = prototypes.size(0);
  for (int64_t a : assignment)
    if (a < 0 || a >= m) throw ShapeError("loss_high: assignment outside the prototype bank");
  const torch::Tensor& cand = candidates.defined() ? candidates : features;
  ContrastiveLoss out;
  out.pairs = features.size(0);
  if (out.pairs == 0) {
    out.sum = torch::zeros({}, features.options());
    out.mean = out.sum;
    return out;
  }
  auto a = torch::tensor(assignment, torch::kLong);
  auto p = prototypes.index_select(0, a).to(features.scalar_type());  // [n, D]
  auto temp = phi.index_select(0, a).to(features.scalar_type());      // [n]
  auto numer = (features * p).sum(1) / temp;                          // [n]
  auto denom = torch::logsumexp(torch::matmul(p, cand.t()) / temp.unsqueeze(1), 1);
  out.sum = (denom - numer).sum();
  out.mean = out.sum / static_cast<double>(out.pairs);
  return out;
}

torch::Tensor estimate_concentration(const torch::Tensor& features, const torch::Tensor& prototypes,
                                     const std::vector<int64_t>& assignment, const torch::Tensor& previous,
                                     const ConcentrationParams& params) {
  auto phi = previous.detach().clone();
  const int64_t m = prototypes.size(0);
  std::map<int64_t, std::vector<int64_t>> members;
  for (size_t i = 0; i < assignment.size(); ++i) members[assignment[i]].push_back(static_cast<int64_t>(i));
  for (const auto& [j, rows] : members) {
    if (j < 0 || j >= m) throw ShapeError("estimate_concentration: assignment outside the bank");
    auto z = features.detach().index_select(0, torch::tensor(rows, torch::kLong)).to(torch::kFloat64);
    const double dist = (z - prototypes.detach()[j].to(torch::kFloat64)).norm(2, 1).sum().item<double>();
    const double count = static_cast<double>(rows.size());
    const double value = dist / (count * std::log(count + params.alpha));
    phi[j] = std::clamp(value, params.phi_floor, params.phi_ceil);
  }
  return phi;
}

PrototypeBankImpl::PrototypeBankImpl(int count, int dim, double momentum, ConcentrationParams params)
    : momentum_(momentum), params_(params) {
  if (count < 1) throw ConfigError("prototype bank: need at least one prototype");
  if (momentum < 0.0 || momentum > 1.0) throw ConfigError("prototype bank: momentum must lie in [0, 1]");
  auto init = torch::randn({count, dim});
  prototypes_ = register_buffer("prototypes", init / init.norm(2, 1, true));
  phi_ = register_buffer("phi", torch::ones({count}));
}

std::vector<int64_t> PrototypeBankImpl::assign(const torch::Tensor& features) const {
  torch::NoGradGuard guard;
  auto f = features.detach().to(prototypes_.scalar_type());
  auto sim = torch::matmul(f / f.norm(2, 1, true).clamp_min(1e-12), prototypes_.t());
  auto best = std::get<1>(sim.max(1)).contiguous();
  return std::vector<int64_t>(best.data_ptr<int64_t>(), best.data_ptr<int64_t>() + best.numel());
}

void PrototypeBankImpl::update(const torch::Tensor& features, const std::vector<int64_t>& assignment) {
  torch::NoGradGuard guard;
  auto f = features.detach().to(prototypes_.scalar_type());
  std::map<int64_t, std::vector<int64_t>> members;
  for (size_t i = 0; i < assignment.size(); ++i) members[assignment[i]].push_back(static_cast<int64_t>(i));
  for (const auto& [j, rows] : members) {
    auto mean = f.index_select(0, torch::tensor(rows, torch::kLong)).mean(0);
    auto p = prototypes_[j] * momentum_ + mean * (1.0 - momentum_);
    prototypes_[j].copy_(p / p.norm().clamp_min(1e-12));
  }
  phi_.copy_(estimate_concentration(f, prototypes_, assignment, phi_, params_));
}

torch::Tensor init_anchors_from_masks(const torch::Tensor& masks, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("init_anchors_from_masks: threshold must lie in (0, 1)");
  if (masks.dim() != 3) throw ShapeError("init_anchors_from_masks: expected [K, h, w]");
  const int64_t K = masks.size(0), h = masks.size(1), w = masks.size(2);
  auto on = masks.detach().ge(threshold);
  auto rows = on.any(2);  // [K, h]
  auto cols = on.any(1);  // [K, w]
  auto opts = torch::TensorOptions().dtype(masks.scalar_type());
  auto out = torch::empty({K, 4}, torch::kFloat64);
  auto acc = out.accessor<double, 2>();
  auto r = rows.contiguous();
  auto c = cols.contiguous();
  auto ra = r.accessor<bool, 2>();
  auto ca = c.accessor<bool, 2>();
  for (int64_t k = 0; k < K; ++k) {
    int64_t y0 = h, y1 = -1, x0 = w, x1 = -1;
    for (int64_t y = 0; y < h; ++y)
      if (ra[k][y]) {
        y0 = std::min(y0, y);
        y1 = y;
      }
    for (int64_t x = 0; x < w; ++x)
      if (ca[k][x]) {
        x0 = std::min(x0, x);
        x1 = x;
      }
    if (y1 < 0) {
      acc[k][0] = 0.5, acc[k][1] = 0.5, acc[k][2] = 1.0, acc[k][3] = 1.0;
      continue;
    }
    const double bx0 = static_cast<double>(x0) / w, bx1 = static_cast<double>(x1 + 1) / w;
    const double by0 = static_cast<double>(y0) / h, by1 = static_cast<double>(y1 + 1) / h;
    acc[k][0] = 0.5 * (bx0 + bx1);
    acc[k][1] = 0.5 * (by0 + by1);
    acc[k][2] = bx1 - bx0;
    acc[k][3] = by1 - by0;
  }
  return out.to(opts);
}

double tau_preset(const std::string& name) {
  static const std::map<std::string, double> kPresets = {
      {"publaynet", 0.02}, {"prima", 0.6}, {"hj", 0.1}, {"tablebank", 0.2}};
  auto it = kPresets.find(name);
  if (it == kPresets.end()) throw ConfigError("unknown dataset preset '" + name + "'");
  return it->second;
}

bool is_tau_preset(const std::string& name) {
  return name == "publaynet" || name == "prima" || name == "hj" || name == "tablebank";
}

}  // namespace docseg::queryselect
