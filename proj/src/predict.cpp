#include "docseg/predict.hpp"

#include <fstream>

#include "docseg/errors.hpp"
#include "docseg/image_io.hpp"
#include "docseg/rle.hpp"

namespace docseg {

namespace fs = std::filesystem;
using nlohmann::json;

json PredictionResult::to_json(const std::vector<std::string>& class_names, const std::string& image_name) const {
  json j;
  j["image"] = image_name;
  j["height"] = height;
  j["width"] = width;
  j["padding"] = {{"height", padded_height - height}, {"width", padded_width - width}};
  j["instances"] = json::array();
  for (const auto& d : detections) {
    const auto name = d.class_id < static_cast<int>(class_names.size()) ? class_names[static_cast<size_t>(d.class_id)]
                                                                        : std::to_string(d.class_id);
    j["instances"].push_back({{"class_id", d.class_id},
                              {"class_name", name},
                              {"score", d.score},
                              {"bbox", d.box.as_array()},
                              {"segmentation", rle_to_json(rle_encode(d.mask))}});
  }
  return j;
}

PredictionResult predict_image(DocSegmenter& model, const torch::Tensor& image, double score_threshold) {
  if (image.dim() != 3 || image.size(0) != 3) throw ShapeError("predict expects a [3, H, W] image");
  torch::NoGradGuard guard;
  model->eval();
  PredictionResult r;
  r.height = static_cast<int>(image.size(1));
  r.width = static_cast<int>(image.size(2));
  const int m = model->config().backbone.input_multiple();
  r.padded_height = (r.height + m - 1) / m * m;
  r.padded_width = (r.width + m - 1) / m * m;
  const auto dtype = model->parameters().front().scalar_type();
  auto padded = torch::zeros({3, r.padded_height, r.padded_width}, image.options().dtype(dtype));
  padded.slice(1, 0, r.height).slice(2, 0, r.width).copy_(image);

  auto out = model->forward(padded, transformer::Mode::infer);
  auto dets = segbranch::postprocess(out.final_matching(), r.padded_height, r.padded_width, score_threshold);
  const double sy = static_cast<double>(r.padded_height) / r.height;
  const double sx = static_cast<double>(r.padded_width) / r.width;
  for (auto& d : dets) {
    d.mask = d.mask.slice(0, 0, r.height).slice(1, 0, r.width).contiguous();
    d.box = BoxCXCYWH{d.box.cx * sx, d.box.cy * sy, d.box.w * sx, d.box.h * sy};
  }
  r.detections = std::move(dets);
  return r;
}

namespace {

const std::vector<std::array<float, 3>>& palette() {
  static const std::vector<std::array<float, 3>> colors{
      {0.90f, 0.10f, 0.10f}, {0.10f, 0.60f, 0.95f}, {0.10f, 0.75f, 0.25f}, {0.95f, 0.65f, 0.05f},
      {0.60f, 0.20f, 0.85f}, {0.05f, 0.80f, 0.80f}, {0.85f, 0.35f, 0.60f}, {0.45f, 0.45f, 0.45f}};
  return colors;
}

}  // namespace

torch::Tensor render_overlay(const torch::Tensor& image, const std::vector<segbranch::Detection>& detections) {
  auto out = image.to(torch::kFloat32).clone();
  const int H = static_cast<int>(out.size(1)), W = static_cast<int>(out.size(2));
  for (const auto& d : detections) {
    const auto& c = palette()[static_cast<size_t>(d.class_id) % palette().size()];
    auto color = torch::tensor({c[0], c[1], c[2]}).view({3, 1, 1});
    auto mask = d.mask.to(torch::kBool).unsqueeze(0);
    out = torch::where(mask, 0.5 * out + 0.5 * color, out);
    const auto r = to_pixel_rect(d.box, H, W);
    if (r.x1 <= r.x0 || r.y1 <= r.y0) continue;
    out.slice(1, r.y0, r.y0 + 1).slice(2, r.x0, r.x1).copy_(color.expand({3, 1, r.x1 - r.x0}));
    out.slice(1, r.y1 - 1, r.y1).slice(2, r.x0, r.x1).copy_(color.expand({3, 1, r.x1 - r.x0}));
    out.slice(1, r.y0, r.y1).slice(2, r.x0, r.x0 + 1).copy_(color.expand({3, r.y1 - r.y0, 1}));
    out.slice(1, r.y0, r.y1).slice(2, r.x1 - 1, r.x1).copy_(color.expand({3, r.y1 - r.y0, 1}));
  }
  return out.clamp(0.0, 1.0);
}

PredictionResult predict_file(DocSegmenter& model, const fs::path& image_path, const fs::path& out_dir,
                              double score_threshold, const std::vector<std::string>& class_names) {
  auto img = image_to_tensor(read_png(image_path));
  if (img.size(0) == 1) img = img.repeat({3, 1, 1});
  else if (img.size(0) == 2) img = img.slice(0, 0, 1).repeat({3, 1, 1});
  else if (img.size(0) == 4) img = img.slice(0, 0, 3);
  auto result = predict_image(model, img, score_threshold);

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());
  const auto json_path = out_dir / "predictions.json";
  std::ofstream out(json_path);
  if (!out) throw IoError(json_path.string(), "cannot open for writing");
  out << result.to_json(class_names, image_path.filename().string()).dump(2) << "\n";
  if (!out) throw IoError(json_path.string(), "write failed");
  write_png(out_dir / "overlay.png", tensor_to_image(render_overlay(img, result.detections)));
  return result;
}

}  // namespace docseg
