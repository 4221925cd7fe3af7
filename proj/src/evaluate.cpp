#include "docseg/evaluate.hpp"

#include <algorithm>

#include "docseg/errors.hpp"

namespace docseg {

using nlohmann::json;

double average_precision(const std::vector<std::pair<std::vector<ScoredDetection>, int64_t>>& per_image,
                         double iou_threshold) {
  int64_t num_gt = 0;
  std::vector<std::pair<double, bool>> pooled;  // (score, true positive)
  for (const auto& [dets, gt_count] : per_image) {
    num_gt += gt_count;
    std::vector<size_t> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });
    std::vector<char> taken(static_cast<size_t>(gt_count), 0);
    for (size_t i : order) {
      const auto& d = dets[i];
      if (static_cast<int64_t>(d.ious.size()) != gt_count) throw ShapeError("average_precision: IoU count mismatch");
      int best = -1;
      double best_iou = iou_threshold;
      for (int64_t g = 0; g < gt_count; ++g) {
        if (taken[static_cast<size_t>(g)]) continue;
        if (d.ious[static_cast<size_t>(g)] >= best_iou) {
          best_iou = d.ious[static_cast<size_t>(g)];
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) taken[static_cast<size_t>(best)] = 1;
      pooled.emplace_back(d.score, best >= 0);
    }
  }
  if (num_gt == 0) return -1.0;
  std::stable_sort(pooled.begin(), pooled.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (const auto& [score, hit] : pooled) {
    (hit ? tp : fp) += 1;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  for (size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

double mask_iou(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) throw ShapeError("mask_iou: shape mismatch");
  auto ab = a.to(torch::kBool), bb = b.to(torch::kBool);
  const auto inter = torch::logical_and(ab, bb).sum().item<int64_t>();
  const auto uni = torch::logical_or(ab, bb).sum().item<int64_t>();
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

json EvalReport::to_json(const std::vector<std::string>& class_names) const {
  auto per_class = [&](const std::map<int, double>& m) {
    json j = json::object();
    for (const auto& [c, ap] : m) {
      const auto key = c < static_cast<int>(class_names.size()) ? class_names[static_cast<size_t>(c)] : std::to_string(c);
      j[key] = ap;
    }
    return j;
  };
  return {{"mask_ap50", mask_ap50},
          {"mask_ap75", mask_ap75},
          {"box_ap50", box_ap50},
          {"per_class",
           {{"mask_ap50", per_class(per_class_mask_ap50)},
            {"mask_ap75", per_class(per_class_mask_ap75)},
            {"box_ap50", per_class(per_class_box_ap50)}}},
          {"counts", {{"images", num_images}, {"ground_truth", num_gt}, {"predictions", num_predictions}}}};
}

EvalReport evaluate_predictions(const std::vector<std::vector<segbranch::Detection>>& predictions,
                                const std::vector<std::vector<synthdoc::Instance>>& ground_truth, int num_classes) {
  if (predictions.size() != ground_truth.size()) throw ShapeError("evaluate: prediction and GT image counts differ");
  EvalReport report;
  report.num_images = static_cast<int64_t>(predictions.size());
  using PerImage = std::vector<std::pair<std::vector<ScoredDetection>, int64_t>>;
  std::vector<PerImage> masks(static_cast<size_t>(num_classes)), boxes(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < predictions.size(); ++i) {
    report.num_gt += static_cast<int64_t>(ground_truth[i].size());
    report.num_predictions += static_cast<int64_t>(predictions[i].size());
    for (int c = 0; c < num_classes; ++c) {
      std::vector<const synthdoc::Instance*> gts;
      for (const auto& g : ground_truth[i])
        if (g.class_id == c) gts.push_back(&g);
      std::vector<ScoredDetection> md, bd;
      for (const auto& p : predictions[i]) {
        if (p.class_id != c) continue;
        ScoredDetection m{p.score, {}}, b{p.score, {}};
        for (const auto* g : gts) {
          m.ious.push_back(mask_iou(p.mask, g->mask));
          b.ious.push_back(box_iou(p.box, g->box));
        }
        md.push_back(std::move(m));
        bd.push_back(std::move(b));
      }
      masks[static_cast<size_t>(c)].emplace_back(std::move(md), static_cast<int64_t>(gts.size()));
      boxes[static_cast<size_t>(c)].emplace_back(std::move(bd), static_cast<int64_t>(gts.size()));
    }
  }
  auto fill = [&](const std::vector<PerImage>& data, double thr, std::map<int, double>& per_class) {
    double sum = 0.0;
    for (int c = 0; c < num_classes; ++c) {
      const double ap = average_precision(data[static_cast<size_t>(c)], thr);
      if (ap < 0.0) continue;
      per_class[c] = ap;
      sum += ap;
    }
    return per_class.empty() ? 0.0 : sum / static_cast<double>(per_class.size());
  };
  report.mask_ap50 = fill(masks, 0.5, report.per_class_mask_ap50);
  report.mask_ap75 = fill(masks, 0.75, report.per_class_mask_ap75);
  report.box_ap50 = fill(boxes, 0.5, report.per_class_box_ap50);
  return report;
}

std::vector<std::vector<segbranch::Detection>> run_inference(DocSegmenter& model,
                                                             const std::vector<synthdoc::LayoutSample>& samples,
                                                             double score_threshold) {
  torch::NoGradGuard guard;
  model->eval();
  const auto dtype = model->parameters().front().scalar_type();
  std::vector<std::vector<segbranch::Detection>> out;
  for (const auto& s : samples) {
    auto pred = model->forward(s.image.to(dtype), transformer::Mode::infer);
    out.push_back(segbranch::postprocess(pred.final_matching(), static_cast<int>(s.image.size(1)),
                                         static_cast<int>(s.image.size(2)), score_threshold));
  }
  return out;
}

EvalReport evaluate(DocSegmenter& model, const std::vector<synthdoc::LayoutSample>& samples, double score_threshold) {
  std::vector<std::vector<synthdoc::Instance>> gts;
  for (const auto& s : samples) gts.push_back(s.instances);
  return evaluate_predictions(run_inference(model, samples, score_threshold), gts, model->config().num_classes);
}

}  // namespace docseg
