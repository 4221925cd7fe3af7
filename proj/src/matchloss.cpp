#include "docseg/matchloss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "docseg/errors.hpp"
#include "docseg/log.hpp"

namespace docseg::matchloss {

namespace F = torch::nn::functional;
using torch::Tensor;

void CostWeights::validate() const {
  if (!(w_cls >= 0.0) || !(w_l1 >= 0.0) || !(w_mask >= 0.0))
    throw ConfigError("cost weights must be non-negative");
}

void DomainShiftSchedule::validate() const {
  if (!(w_end >= 0.0) || !(w_start >= w_end)) throw ConfigError("schedule needs w_start >= w_end >= 0");
  if (total_steps < 1) throw ConfigError("schedule needs total_steps >= 1");
}

void LossConfig::validate() const {
  weights.validate();
  if (!(focal_gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
  if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) throw ConfigError("focal alpha must lie in [0, 1]");
  if (!(w_low >= 0.0) || !(w_high >= 0.0)) throw ConfigError("contrastive weights must be non-negative");
  if (!(background_weight > 0.0)) throw ConfigError("background weight must be positive");
}

GtTargets make_targets(const std::vector<synthdoc::Instance>& gt, int64_t mask_h, int64_t mask_w,
                       torch::ScalarType dtype) {
  GtTargets t;
  const auto opts = torch::TensorOptions().dtype(dtype);
  const auto q = static_cast<int64_t>(gt.size());
  std::vector<int64_t> classes;
  t.boxes = torch::zeros({q, 4}, opts);
  t.masks = torch::zeros({q, mask_h, mask_w}, opts);
  for (int64_t i = 0; i < q; ++i) {
    const auto& inst = gt[static_cast<size_t>(i)];
    classes.push_back(inst.class_id);
    const auto b = inst.box.as_array();
    for (int k = 0; k < 4; ++k) t.boxes[i][k] = b[static_cast<size_t>(k)];
    const int64_t H = inst.mask.size(0), W = inst.mask.size(1);
    if (H % mask_h != 0 || W % mask_w != 0 || H / mask_h != W / mask_w)
      throw InputError("mask size is not an integer multiple of the target resolution");
    const int64_t f = H / mask_h;
    auto m = inst.mask.to(dtype).view({1, 1, H, W});
    t.masks[i] = F::avg_pool2d(m, F::AvgPool2dFuncOptions(f).stride(f)).view({mask_h, mask_w});
  }
  t.classes = torch::tensor(classes, torch::kLong).view({q});
  return t;
}

Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma, double background_weight) {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be >= 0");
  if (logits.dim() != 2) throw ShapeError("focal_loss expects [Q, K] logits");
  if (logits.size(0) == 0) return torch::zeros({}, logits.options());
  if (targets.scalar_type() == torch::kLong) {
    if (targets.dim() != 1 || targets.size(0) != logits.size(0)) throw ShapeError("focal_loss: target count mismatch");
    auto logp = torch::log_softmax(logits, 1).gather(1, targets.view({-1, 1})).squeeze(1);
    auto p = logp.exp();
    auto rows = -alpha * torch::pow(1.0 - p, gamma) * logp;
    if (background_weight == 1.0) return rows.mean();
    auto bg = targets.eq(logits.size(1) - 1).to(logits.scalar_type());
    auto weight = 1.0 + (background_weight - 1.0) * bg;
    return (rows * weight).sum() / weight.sum();
  }
  if (targets.sizes() != logits.sizes()) throw ShapeError("focal_loss: one-hot targets must match logits");
  auto y = targets.to(logits.scalar_type());
  auto p = torch::sigmoid(logits);
  auto ce = F::binary_cross_entropy_with_logits(logits, y, F::BinaryCrossEntropyWithLogitsFuncOptions().reduction(torch::kNone));
  auto p_t = p * y + (1.0 - p) * (1.0 - y);
  auto a_t = alpha * y + (1.0 - alpha) * (1.0 - y);
  return (a_t * torch::pow(1.0 - p_t, gamma) * ce).sum(1).mean();
}

Tensor l1_box_loss(const Tensor& pred, const Tensor& gt) {
  if (pred.sizes() != gt.sizes() || pred.dim() != 2 || pred.size(1) != 4) throw ShapeError("l1_box_loss: shape mismatch");
  if (pred.size(0) == 0) return torch::zeros({}, pred.options());
  return (pred - gt).abs().mean();
}

Tensor dice_loss(const Tensor& prob, const Tensor& gt) {
  if (prob.sizes() != gt.sizes()) throw ShapeError("dice_loss: shape mismatch");
  if (prob.numel() == 0) return torch::zeros({}, prob.options());
  auto p = prob.dim() == 2 ? prob.unsqueeze(0) : prob;
  auto y = (gt.dim() == 2 ? gt.unsqueeze(0) : gt).to(p.scalar_type());
  p = p.flatten(1);
  y = y.flatten(1);
  auto num = 2.0 * (p * y).sum(1) + 1.0;
  auto den = p.sum(1) + y.sum(1) + 1.0;
  return (1.0 - num / den).mean();
}

Tensor mask_bce(const Tensor& logits, const Tensor& gt) {
  if (logits.sizes() != gt.sizes()) throw ShapeError("mask_bce: shape mismatch");
  if (logits.numel() == 0) return torch::zeros({}, logits.options());
  return F::binary_cross_entropy_with_logits(logits, gt.to(logits.scalar_type()));
}

CostTerms cost_terms(const segbranch::InstancePrediction& pred, const GtTargets& gt, ClassScoring scoring,
                     double alpha, double gamma) {
  CostTerms c;
  const auto Q = pred.size();
  const auto q = gt.size();
  if (Q == 0 || q == 0) {
    c.cls = c.l1 = c.mask = torch::zeros({Q, q}, pred.class_logits.options());
    return c;
  }
  const auto& logits = pred.class_logits;
  auto prob = scoring == ClassScoring::softmax ? torch::softmax(logits, 1) : torch::sigmoid(logits);
  auto p = prob.index_select(1, gt.classes);  // [Q, q]
  const double eps = 1e-8;
  auto pos = alpha * torch::pow(1.0 - p, gamma) * -torch::log(p + eps);
  auto neg = (1.0 - alpha) * torch::pow(p, gamma) * -torch::log(1.0 - p + eps);
  c.cls = pos - neg;
  c.l1 = torch::cdist(pred.boxes, gt.boxes.to(pred.boxes.scalar_type()), 1.0) / 4.0;

  auto x = pred.mask_logits.flatten(1);             // [Q, P]
  auto y = gt.masks.to(x.scalar_type()).flatten(1);  // [q, P]
  const double P = static_cast<double>(x.size(1));
  auto bce = (F::softplus(x).sum(1, true) - torch::matmul(x, y.t())) / P;
  auto s = torch::sigmoid(x);
  auto dice = 1.0 - (2.0 * torch::matmul(s, y.t()) + 1.0) / (s.sum(1, true) + y.sum(1).view({1, -1}) + 1.0);
  c.mask = dice + bce;
  return c;
}

Tensor cost_matrix(const segbranch::InstancePrediction& pred, const GtTargets& gt, const CostWeights& w,
                   ClassScoring scoring) {
  torch::NoGradGuard guard;
  const auto c = cost_terms(pred, gt, scoring);
  return w.w_cls * c.cls + w.w_l1 * c.l1 + w.w_mask * c.mask;
}

namespace {

using Matrix = std::vector<std::vector<double>>;

// Potentials method for n <= m; returns the column of every row.
std::vector<int> solve_rows(const Matrix& a) {
  const int n = static_cast<int>(a.size());
  const int m = n == 0 ? 0 : static_cast<int>(a[0].size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> col(n, -1);
  for (int j = 1; j <= m; ++j)
    if (p[j] != 0) col[p[j] - 1] = j - 1;
  return col;
}

// Optimal value of the subproblem restricted to `rows` x `cols`.
double optimum(const Matrix& c, const std::vector<int>& rows, const std::vector<int>& cols) {
  if (rows.empty() || cols.empty()) return 0.0;
  const bool direct = rows.size() <= cols.size();
  const auto& r = direct ? rows : cols;
  const auto& k = direct ? cols : rows;
  Matrix sub(r.size(), std::vector<double>(k.size()));
  for (size_t i = 0; i < r.size(); ++i)
    for (size_t j = 0; j < k.size(); ++j) sub[i][j] = direct ? c[r[i]][k[j]] : c[k[j]][r[i]];
  const auto col = solve_rows(sub);
  double total = 0.0;
  for (size_t i = 0; i < r.size(); ++i) total += sub[i][col[i]];
  return total;
}

}  // namespace

MatchResult hungarian(const Matrix& cost) {
  MatchResult res;
  const int Q = static_cast<int>(cost.size());
  const int q = Q == 0 ? 0 : static_cast<int>(cost[0].size());
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != q) throw InputError("hungarian: ragged cost matrix");
    for (double x : row)
      if (!std::isfinite(x)) throw InputError("hungarian: non-finite cost entry");
  }
  std::vector<int> queries(Q), gts(q);
  for (int i = 0; i < Q; ++i) queries[i] = i;
  for (int g = 0; g < q; ++g) gts[g] = g;
  const double best = optimum(cost, queries, gts);
  const double tol = 1e-9 * (1.0 + std::abs(best));

  std::vector<char> query_used(Q, 0), gt_used(q, 0);
  double acc = 0.0;
  auto remaining = [](const std::vector<char>& used, int from) {
    std::vector<int> out;
    for (int i = from; i < static_cast<int>(used.size()); ++i)
      if (!used[i]) out.push_back(i);
    return out;
  };
  if (q <= Q) {
    for (int g = 0; g < q; ++g) {
      const auto rest_gts = remaining(gt_used, g + 1);
      for (int j = 0; j < Q; ++j) {
        if (query_used[j]) continue;
        query_used[j] = 1;
        const double total = acc + cost[j][g] + optimum(cost, remaining(query_used, 0), rest_gts);
        if (total <= best + tol) {
          acc += cost[j][g];
          gt_used[g] = 1;
          res.pairs.emplace_back(j, g);
          break;
        }
        query_used[j] = 0;
      }
    }
  } else {
    for (int j = 0; j < Q; ++j) {
      const auto rest_queries = remaining(query_used, j + 1);
      for (int g = 0; g < q; ++g) {
        if (gt_used[g]) continue;
        gt_used[g] = 1;
        const double total = acc + cost[j][g] + optimum(cost, rest_queries, remaining(gt_used, 0));
        if (total <= best + tol) {
          acc += cost[j][g];
          query_used[j] = 1;
          res.pairs.emplace_back(j, g);
          break;
        }
        gt_used[g] = 0;
      }
    }
    std::sort(res.pairs.begin(), res.pairs.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
  }
  res.total_cost = acc;
  for (int j = 0; j < Q; ++j)
    if (!query_used[j]) res.unmatched_queries.push_back(j);
  return res;
}

MatchResult hungarian(const Tensor& cost) {
  if (cost.dim() != 2) throw ShapeError("hungarian expects a [Q, q] cost matrix");
  auto c = cost.detach().to(torch::kCPU, torch::kFloat64).contiguous();
  if (!torch::isfinite(c).all().item<bool>()) throw InputError("hungarian: non-finite cost entry");
  Matrix m(c.size(0), std::vector<double>(c.size(1)));
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < c.size(0); ++i)
    for (int64_t j = 0; j < c.size(1); ++j) m[i][j] = acc[i][j];
  return hungarian(m);
}

MatchResult match(const segbranch::InstancePrediction& pred, const GtTargets& gt, const CostWeights& w,
                  ClassScoring scoring) {
  torch::NoGradGuard guard;
  const auto terms = cost_terms(pred, gt, scoring);
  auto res = hungarian(w.w_cls * terms.cls + w.w_l1 * terms.l1 + w.w_mask * terms.mask);
  double cls = 0.0, l1 = 0.0, mask = 0.0;
  for (auto [qi, gi] : res.pairs) {
    cls += w.w_cls * terms.cls[qi][gi].item<double>();
    l1 += w.w_l1 * terms.l1[qi][gi].item<double>();
    mask += w.w_mask * terms.mask[qi][gi].item<double>();
  }
  res.per_term = {{"cls", cls}, {"l1", l1}, {"mask", mask}};
  return res;
}

double hybrid_weight(int64_t step, const DomainShiftSchedule& sched) {
  sched.validate();
  if (step < 0 || step > sched.total_steps) {
    log::warn("schedule step " + std::to_string(step) + " outside [0, " + std::to_string(sched.total_steps) +
              "], clamped");
    step = std::clamp<int64_t>(step, 0, sched.total_steps);
  }
  const double t = static_cast<double>(step) / static_cast<double>(sched.total_steps);
  const double f = sched.shape == DomainShiftSchedule::Shape::cosine ? 0.5 * (1.0 + std::cos(std::numbers::pi * t))
                                                                     : 1.0 - t;
  return sched.w_end + (sched.w_start - sched.w_end) * f;
}

namespace {

struct PairedIndex {
  Tensor query, gt;
};

PairedIndex paired(const MatchResult& res) {
  std::vector<int64_t> qs, gs;
  for (auto [qi, gi] : res.pairs) {
    qs.push_back(qi);
    gs.push_back(gi);
  }
  return {torch::tensor(qs, torch::kLong).view({-1}), torch::tensor(gs, torch::kLong).view({-1})};
}

// Box and mask terms for prediction rows `rows` against GT rows `gts`.
void add_geometry(const segbranch::InstancePrediction& pred, const GtTargets& gt, const Tensor& rows, const Tensor& gts,
                  double w_l1, double w_mask, Tensor& l1, Tensor& dice, Tensor& bce) {
  if (rows.numel() == 0) return;
  auto boxes = pred.boxes.index_select(0, rows);
  auto gt_boxes = gt.boxes.index_select(0, gts).to(boxes.scalar_type());
  l1 = l1 + w_l1 * l1_box_loss(boxes, gt_boxes);
  auto logits = pred.mask_logits.index_select(0, rows);
  auto gt_masks = gt.masks.index_select(0, gts).to(logits.scalar_type());
  dice = dice + w_mask * dice_loss(torch::sigmoid(logits), gt_masks);
  bce = bce + w_mask * mask_bce(logits, gt_masks);
}

}  // namespace

LossBreakdown total_loss(const ModelOutput& out, const GtTargets& gt, const LossConfig& cfg, double w_mask_eff) {
  cfg.validate();
  if (out.layers.empty()) throw ShapeError("total_loss: no decoder outputs");
  const auto options = out.layers.front().class_logits.options();
  const int64_t num_classes = out.layers.front().class_logits.size(1) - 1;
  CostWeights w = cfg.weights;
  w.w_mask = w_mask_eff;
  const double a = cfg.focal_alpha, g = cfg.focal_gamma;

  auto zero = [&] { return torch::zeros({}, options); };
  Tensor cls = zero(), l1 = zero(), dice = zero(), bce = zero(), cdn_pos = zero(), cdn_neg = zero();

  std::vector<int64_t> pos_rows, neg_rows, pos_gt, pos_cls;
  for (int64_t i = 0; i < out.num_cdn; ++i) {
    if (out.cdn.polarity[static_cast<size_t>(i)] == transformer::Polarity::positive) {
      pos_rows.push_back(i);
      pos_gt.push_back(out.cdn.gt_index[static_cast<size_t>(i)]);
      pos_cls.push_back(out.cdn.target_class[static_cast<size_t>(i)]);
    } else {
      neg_rows.push_back(i);
    }
  }
  const auto pos_t = torch::tensor(pos_rows, torch::kLong).view({-1});
  const auto pos_gt_t = torch::tensor(pos_gt, torch::kLong).view({-1});
  const auto pos_cls_t = torch::tensor(pos_cls, torch::kLong).view({-1});
  const auto neg_t = torch::tensor(neg_rows, torch::kLong).view({-1});

  for (const auto& layer : out.layers) {
    const auto m = layer.slice(out.num_cdn, layer.size());
    const auto res = match(m, gt, w, ClassScoring::softmax);
    auto targets = torch::full({m.size()}, num_classes, torch::kLong);
    const auto idx = paired(res);
    if (idx.query.numel() > 0) targets.index_put_({idx.query}, gt.classes.index_select(0, idx.gt));
    cls = cls + w.w_cls * focal_loss(m.class_logits, targets, a, g, cfg.background_weight);
    add_geometry(m, gt, idx.query, idx.gt, w.w_l1, w.w_mask, l1, dice, bce);

    if (out.num_cdn > 0) {
      if (pos_t.numel() > 0) {
        Tensor p_l1 = zero(), p_dice = zero(), p_bce = zero();
        add_geometry(layer, gt, pos_t, pos_gt_t, w.w_l1, w.w_mask, p_l1, p_dice, p_bce);
        cdn_pos = cdn_pos + w.w_cls * focal_loss(layer.class_logits.index_select(0, pos_t), pos_cls_t, a, g) + p_l1 +
                  p_dice + p_bce;
      }
      if (neg_t.numel() > 0) {
        auto bg = torch::full({neg_t.numel()}, num_classes, torch::kLong);
        cdn_neg = cdn_neg + w.w_cls * focal_loss(layer.class_logits.index_select(0, neg_t), bg, a, g);
      }
    }
  }

  if (cfg.encoder_stage && out.encoder.class_logits.defined()) {
    const auto& e = out.encoder;
    const auto res = match(e, gt, w, ClassScoring::sigmoid);
    const auto idx = paired(res);
    auto onehot = torch::zeros_like(e.class_logits);
    for (auto [qi, gi] : res.pairs) onehot[qi][gt.classes[gi].item<int64_t>()] = 1.0;
    cls = cls + w.w_cls * focal_loss(e.class_logits, onehot, a, g);
    add_geometry(e, gt, idx.query, idx.gt, w.w_l1, w.w_mask, l1, dice, bce);
  }

  Tensor low = zero(), high = zero();
  if (cfg.w_low > 0.0 && out.low.detection.defined() && out.low.detection.size(0) > 0)
    low = cfg.w_low * queryselect::loss_low(out.low).mean;
  if (cfg.w_high > 0.0 && out.high_features.defined() && out.high_features.size(0) > 0)
    high = cfg.w_high *
           queryselect::loss_high(out.high_features, out.prototypes, out.phi, out.prototype_assignment).mean;

  LossBreakdown b;
  b.w_mask_eff = w_mask_eff;
  b.terms = {{"cls", cls},         {"l1", l1},           {"mask_dice", dice}, {"mask_bce", bce},
             {"cdn_pos", cdn_pos}, {"cdn_neg", cdn_neg}, {"low_con", low},    {"high_con", high}};
  b.total = zero();
  for (const auto& name : loss_term_names()) {
    const auto& t = b.terms.at(name);
    if (!torch::isfinite(t).item<bool>()) throw TrainingError("loss term '" + name + "' is not finite");
    b.total = b.total + t;
  }
  return b;
}

LossBreakdown total_loss(const ModelOutput& out, const GtTargets& gt, const LossConfig& cfg) {
  return total_loss(out, gt, cfg, cfg.weights.w_mask);
}

}  // namespace docseg::matchloss
