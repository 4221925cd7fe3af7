#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace docseg {

/// Uncompressed COCO run-length encoding: column-major runs, alternating
/// background/foreground, starting with a (possibly empty) background run.
struct Rle {
  int height = 0;
  int width = 0;
  std::vector<std::uint32_t> counts;

  bool operator==(const Rle&) const = default;
};

Rle rle_encode(const torch::Tensor& mask);
torch::Tensor rle_decode(const Rle& rle);
std::int64_t rle_area(const Rle& rle);

nlohmann::json rle_to_json(const Rle& rle);
/// Accepts {"size": [h, w], "counts": [...]}; throws InputError otherwise.
Rle rle_from_json(const nlohmann::json& j);

}  // namespace docseg
