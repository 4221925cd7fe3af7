#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "docseg/model.hpp"
#include "docseg/segbranch.hpp"
#include "docseg/synthdoc.hpp"

namespace docseg {

/// A detection of one class with its IoU against each GT of that class in
/// the same image.
struct ScoredDetection {
  double score = 0.0;
  std::vector<double> ious;  // against the image's GT of the same class
};

/// Greedy matching in score order (each detection takes the unmatched GT
/// with the highest IoU >= threshold), then 101-point interpolated AP over
/// detections pooled across images. `per_image` holds the detections and
/// GT count of each image. Returns -1 when there is no GT at all.
double average_precision(const std::vector<std::pair<std::vector<ScoredDetection>, int64_t>>& per_image,
                         double iou_threshold);

struct EvalReport {
  double mask_ap50 = 0.0;
  double mask_ap75 = 0.0;
  double box_ap50 = 0.0;
  /// Only classes with ground truth appear; their mean is the headline value.
  std::map<int, double> per_class_mask_ap50;
  std::map<int, double> per_class_mask_ap75;
  std::map<int, double> per_class_box_ap50;
  int64_t num_images = 0;
  int64_t num_gt = 0;
  int64_t num_predictions = 0;

  nlohmann::json to_json(const std::vector<std::string>& class_names = {}) const;
};

double mask_iou(const torch::Tensor& a, const torch::Tensor& b);

EvalReport evaluate_predictions(const std::vector<std::vector<segbranch::Detection>>& predictions,
                                const std::vector<std::vector<synthdoc::Instance>>& ground_truth, int num_classes);

/// Runs the model in inference mode on every sample.
std::vector<std::vector<segbranch::Detection>> run_inference(DocSegmenter& model,
                                                             const std::vector<synthdoc::LayoutSample>& samples,
                                                             double score_threshold);

EvalReport evaluate(DocSegmenter& model, const std::vector<synthdoc::LayoutSample>& samples, double score_threshold);

}  // namespace docseg
