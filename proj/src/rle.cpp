#include "docseg/rle.hpp"

#include <numeric>

#include "docseg/errors.hpp"

namespace docseg {

Rle rle_encode(const torch::Tensor& mask) {
  if (mask.dim() != 2) throw ShapeError("rle_encode: expected [H, W] mask");
  Rle rle;
  rle.height = static_cast<int>(mask.size(0));
  rle.width = static_cast<int>(mask.size(1));
  // Column-major flattening.
  auto flat = mask.to(torch::kBool).t().contiguous();
  const bool* p = flat.data_ptr<bool>();
  const std::int64_t n = flat.numel();
  bool current = false;
  std::uint32_t run = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (p[i] != current) {
      rle.counts.push_back(run);
      run = 0;
      current = p[i];
    }
    ++run;
  }
  rle.counts.push_back(run);
  return rle;
}

torch::Tensor rle_decode(const Rle& rle) {
  const std::int64_t n = static_cast<std::int64_t>(rle.height) * rle.width;
  const std::uint64_t total = std::accumulate(rle.counts.begin(), rle.counts.end(), std::uint64_t{0});
  if (static_cast<std::int64_t>(total) != n) throw InputError("rle_decode: run lengths do not cover the mask");
  auto flat = torch::zeros({rle.width, rle.height}, torch::kBool);
  bool* p = flat.data_ptr<bool>();
  std::int64_t pos = 0;
  bool value = false;
  for (std::uint32_t c : rle.counts) {
    if (value) std::fill(p + pos, p + pos + c, true);
    pos += c;
    value = !value;
  }
  return flat.t().contiguous();
}

std::int64_t rle_area(const Rle& rle) {
  std::int64_t area = 0;
  for (size_t i = 1; i < rle.counts.size(); i += 2) area += rle.counts[i];
  return area;
}

nlohmann::json rle_to_json(const Rle& rle) {
  return {{"size", {rle.height, rle.width}}, {"counts", rle.counts}};
}

Rle rle_from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("size") || !j.contains("counts") || !j["size"].is_array() ||
      j["size"].size() != 2 || !j["counts"].is_array())
    throw InputError("rle: expected {\"size\": [h, w], \"counts\": [...]}");
  Rle rle;
  rle.height = j["size"][0].get<int>();
  rle.width = j["size"][1].get<int>();
  rle.counts = j["counts"].get<std::vector<std::uint32_t>>();
  return rle;
}

}  // namespace docseg
