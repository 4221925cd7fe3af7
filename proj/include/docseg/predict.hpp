#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "docseg/model.hpp"
#include "docseg/segbranch.hpp"

namespace docseg {

struct PredictionResult {
  int height = 0;  // original image size
  int width = 0;
  int padded_height = 0;
  int padded_width = 0;
  /// Boxes are normalized to the original image and masks cropped to it.
  std::vector<segbranch::Detection> detections;

  /// {image, height, width, padding, instances: [{class_id, class_name, score, bbox, segmentation}]}
  /// with bbox as normalized (cx, cy, w, h) and segmentation as uncompressed RLE.
  nlohmann::json to_json(const std::vector<std::string>& class_names, const std::string& image_name = "") const;
};

/// Pads bottom/right with zeros up to the backbone input multiple, runs
/// inference and maps the detections back to the original frame.
PredictionResult predict_image(DocSegmenter& model, const torch::Tensor& image, double score_threshold);

/// Per-class coloured mask blend plus box outlines. image [3, H, W] in [0, 1].
torch::Tensor render_overlay(const torch::Tensor& image, const std::vector<segbranch::Detection>& detections);

/// Reads the image, writes <out_dir>/predictions.json and <out_dir>/overlay.png.
PredictionResult predict_file(DocSegmenter& model, const std::filesystem::path& image_path,
                              const std::filesystem::path& out_dir, double score_threshold,
                              const std::vector<std::string>& class_names);

}  // namespace docseg
