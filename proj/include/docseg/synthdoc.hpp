#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "docseg/box.hpp"

namespace docseg::synthdoc {

/// How an instance's ink is drawn inside its region. The ground-truth mask is
/// always the full region; the style only changes what the image shows.
enum class Style { solid, striped, grid };

struct SynthConfig {
  int height = 256;
  int width = 256;
  int num_classes = 5;
  int max_instances = 6;
  double max_overlap_iou = 0.1;
  /// Smallest region side in pixels.
  int min_side = 16;
  std::vector<std::string> class_names;

  /// Throws ConfigError when a precondition of generate_sample is violated.
  void validate() const;
  /// class_names padded with generic names up to num_classes.
  std::vector<std::string> resolved_class_names() const;
};

/// {text, title, table, figure, list}
std::vector<std::string> default_class_names();

struct Instance {
  int class_id = 0;
  BoxCXCYWH box;
  torch::Tensor mask;  // bool [H, W]
};

struct LayoutSample {
  torch::Tensor image;  // float32 [3, H, W], values k/255
  std::vector<Instance> instances;
  std::int64_t sample_id = 0;

  int height() const { return static_cast<int>(image.size(1)); }
  int width() const { return static_cast<int>(image.size(2)); }
};

Style style_for_class(int class_id);

/// Binary mask of the pixels `style` paints for `box`. Its tight bounding box
/// equals `box` up to pixel rounding. Throws InputError on sub-pixel boxes.
torch::Tensor rasterize_instance(const BoxCXCYWH& box, int height, int width, Style style);

/// Deterministic in (seed, cfg).
LayoutSample generate_sample(std::uint64_t seed, const SynthConfig& cfg);

std::vector<LayoutSample> generate_samples(std::uint64_t first_seed, int count, const SynthConfig& cfg);

/// Tight bounding box of the true pixels of a [H, W] mask; nullopt-like
/// empty rect when the mask is empty.
PixelRect tight_pixel_rect(const torch::Tensor& mask);

}  // namespace docseg::synthdoc
