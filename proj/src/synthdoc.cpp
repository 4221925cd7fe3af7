#include "docseg/synthdoc.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "docseg/errors.hpp"

namespace docseg::synthdoc {

namespace {

struct ClassLook {
  std::array<float, 3> ink;
  // Region size ranges as fractions of the page.
  double w_lo, w_hi, h_lo, h_hi;
};

ClassLook look_for_class(int class_id) {
  static const std::array<ClassLook, 5> kLooks = {{
      {{0.15f, 0.15f, 0.15f}, 0.30, 0.60, 0.12, 0.30},  // text
      {{0.10f, 0.10f, 0.60f}, 0.30, 0.70, 0.06, 0.10},  // title
      {{0.60f, 0.15f, 0.10f}, 0.30, 0.60, 0.20, 0.40},  // table
      {{0.10f, 0.50f, 0.15f}, 0.20, 0.45, 0.20, 0.40},  // figure
      {{0.50f, 0.10f, 0.50f}, 0.15, 0.30, 0.20, 0.40},  // list
  }};
  if (class_id < static_cast<int>(kLooks.size())) return kLooks[class_id];
  // Extra classes reuse a size range with a hue derived from the id.
  ClassLook look = kLooks[class_id % kLooks.size()];
  const float t = static_cast<float>((class_id * 37) % 100) / 100.0f;
  look.ink = {0.2f + 0.5f * t, 0.6f - 0.4f * t, 0.3f};
  return look;
}

float quantize(float v) { return std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f; }

}  // namespace

void SynthConfig::validate() const {
  if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
  if (height <= 0 || width <= 0 || height % 32 != 0 || width % 32 != 0)
    throw ConfigError("synth: image size must be a positive multiple of 32");
  if (max_instances < 1) throw ConfigError("synth: max_instances must be >= 1");
  if (max_overlap_iou < 0.0 || max_overlap_iou >= 1.0)
    throw ConfigError("synth: max_overlap_iou must lie in [0, 1)");
  if (min_side < 2 || min_side > std::min(height, width))
    throw ConfigError("synth: min_side out of range");
  if (static_cast<int>(class_names.size()) > num_classes)
    throw ConfigError("synth: more class names than classes");
}

std::vector<std::string> default_class_names() { return {"text", "title", "table", "figure", "list"}; }

std::vector<std::string> SynthConfig::resolved_class_names() const {
  std::vector<std::string> names = class_names;
  const auto defaults = default_class_names();
  for (int c = static_cast<int>(names.size()); c < num_classes; ++c)
    names.push_back(c < static_cast<int>(defaults.size()) ? defaults[c] : "class_" + std::to_string(c));
  return names;
}

Style style_for_class(int class_id) {
  switch (class_id % 5) {
    case 0:
    case 4:
      return Style::striped;
    case 2:
      return Style::grid;
    default:
      return Style::solid;
  }
}

PixelRect tight_pixel_rect(const torch::Tensor& mask) {
  auto m = mask.to(torch::kBool);
  auto rows = m.any(1);
  auto cols = m.any(0);
  auto ry = torch::nonzero(rows);
  auto cx = torch::nonzero(cols);
  if (ry.numel() == 0) return {};
  return {static_cast<int>(cx.min().item<int64_t>()), static_cast<int>(ry.min().item<int64_t>()),
          static_cast<int>(cx.max().item<int64_t>()) + 1, static_cast<int>(ry.max().item<int64_t>()) + 1};
}

torch::Tensor rasterize_instance(const BoxCXCYWH& box, int height, int width, Style style) {
  for (double v : box.as_array())
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw InputError("rasterize_instance: box coordinate outside [0, 1]");
  if (box.w * width < 2.0 || box.h * height < 2.0)
    throw InputError("rasterize_instance: degenerate box smaller than two pixels");
  const PixelRect r = to_pixel_rect(box, height, width);
  if (r.width() < 1 || r.height() < 1) throw InputError("rasterize_instance: box does not cover any pixel");

  auto mask = torch::zeros({height, width}, torch::kBool);
  auto acc = mask.accessor<bool, 2>();
  for (int y = r.y0; y < r.y1; ++y) {
    const int dy = y - r.y0;
    for (int x = r.x0; x < r.x1; ++x) {
      const int dx = x - r.x0;
      bool ink = true;
      switch (style) {
        case Style::solid:
          break;
        case Style::striped:
          // Two-pixel lines every four rows; the last two rows are always ink.
          ink = (dy % 4) < 2 || y >= r.y1 - 2;
          break;
        case Style::grid:
          ink = dx == 0 || dy == 0 || x == r.x1 - 1 || y == r.y1 - 1 || dx % 8 == 0 || dy % 8 == 0;
          break;
      }
      acc[y][x] = ink;
    }
  }
  return mask;
}

LayoutSample generate_sample(std::uint64_t seed, const SynthConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int H = cfg.height;
  const int W = cfg.width;

  const int n = std::uniform_int_distribution<int>(1, cfg.max_instances)(rng);
  std::vector<Instance> placed;
  std::vector<PixelRect> rects;
  for (int k = 0; k < n; ++k) {
    const int cls = std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng);
    const ClassLook look = look_for_class(cls);
    double scale = 1.0;
    bool ok = false;
    PixelRect rect;
    for (int attempt = 0; attempt < 120 && !ok; ++attempt) {
      if (attempt > 0 && attempt % 30 == 0) scale *= 0.7;
      const double fw = (look.w_lo + (look.w_hi - look.w_lo) * unit(rng)) * scale;
      const double fh = (look.h_lo + (look.h_hi - look.h_lo) * unit(rng)) * scale;
      const int pw = std::clamp(static_cast<int>(std::lround(fw * W)), cfg.min_side, W - 2);
      const int ph = std::clamp(static_cast<int>(std::lround(fh * H)), cfg.min_side, H - 2);
      const int x0 = std::uniform_int_distribution<int>(1, W - pw - 1)(rng);
      const int y0 = std::uniform_int_distribution<int>(1, H - ph - 1)(rng);
      rect = {x0, y0, x0 + pw, y0 + ph};
      const BoxCXCYWH candidate = from_pixel_rect(rect, H, W);
      ok = std::all_of(rects.begin(), rects.end(), [&](const PixelRect& other) {
        return box_iou(candidate, from_pixel_rect(other, H, W)) <= cfg.max_overlap_iou;
      });
    }
    if (!ok) continue;
    rects.push_back(rect);
    Instance inst;
    inst.class_id = cls;
    inst.box = from_pixel_rect(rect, H, W);
    inst.mask = rasterize_instance(inst.box, H, W, Style::solid);
    placed.push_back(std::move(inst));
  }

  // Page background with faint speckle, then a light region tint and the ink.
  auto image = torch::empty({3, H, W}, torch::kFloat32);
  auto img = image.accessor<float, 3>();
  std::uniform_real_distribution<float> speckle(-0.02f, 0.02f);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const float v = 0.95f + speckle(rng);
      for (int c = 0; c < 3; ++c) img[c][y][x] = v;
    }
  for (const Instance& inst : placed) {
    const ClassLook look = look_for_class(inst.class_id);
    const PixelRect r = to_pixel_rect(inst.box, H, W);
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        for (int c = 0; c < 3; ++c) img[c][y][x] = 0.8f * img[c][y][x] + 0.2f * look.ink[c];
    auto ink = rasterize_instance(inst.box, H, W, style_for_class(inst.class_id));
    auto ink_acc = ink.accessor<bool, 2>();
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        if (ink_acc[y][x])
          for (int c = 0; c < 3; ++c) img[c][y][x] = look.ink[c];
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) img[c][y][x] = quantize(img[c][y][x]);

  LayoutSample sample;
  sample.image = image;
  sample.instances = std::move(placed);
  sample.sample_id = static_cast<std::int64_t>(seed);
  return sample;
}

std::vector<LayoutSample> generate_samples(std::uint64_t first_seed, int count, const SynthConfig& cfg) {
  std::vector<LayoutSample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(generate_sample(first_seed + i, cfg));
  return out;
}

}  // namespace docseg::synthdoc
