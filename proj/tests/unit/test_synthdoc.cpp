#include "common.hpp"

#include <map>

#include "docseg/dataset.hpp"
#include "docseg/errors.hpp"
#include "docseg/image_io.hpp"
#include "docseg/rle.hpp"
#include "docseg/synthdoc.hpp"

using namespace docseg;
using namespace docseg::synthdoc;

namespace {

bool samples_equal(const LayoutSample& a, const LayoutSample& b) {
  if (a.sample_id != b.sample_id || !torch::equal(a.image, b.image) || a.instances.size() != b.instances.size())
    return false;
  for (size_t i = 0; i < a.instances.size(); ++i) {
    const auto& x = a.instances[i];
    const auto& y = b.instances[i];
    if (x.class_id != y.class_id || !(x.box == y.box) || !torch::equal(x.mask, y.mask)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("generate_sample is a pure function of seed and config") {
  SynthConfig cfg;
  CHECK(samples_equal(generate_sample(7, cfg), generate_sample(7, cfg)));
  CHECK_FALSE(torch::equal(generate_sample(7, cfg).image, generate_sample(8, cfg).image));
}

TEST_CASE("generated samples respect the sample contract") {
  SynthConfig cfg;
  for (uint64_t seed = 0; seed < 30; ++seed) {
    const auto s = generate_sample(seed, cfg);
    CHECK(s.image.sizes() == torch::IntArrayRef({3, 256, 256}));
    CHECK(s.image.min().item<float>() >= 0.0f);
    CHECK(s.image.max().item<float>() <= 1.0f);
    REQUIRE(!s.instances.empty());
    CHECK(static_cast<int>(s.instances.size()) <= cfg.max_instances);
    for (size_t i = 0; i < s.instances.size(); ++i) {
      const auto& inst = s.instances[i];
      CHECK(inst.mask.any().item<bool>());
      const auto tight = tight_pixel_rect(inst.mask);
      const auto expected = to_pixel_rect(inst.box, cfg.height, cfg.width);
      CHECK(std::abs(tight.x0 - expected.x0) <= 1);
      CHECK(std::abs(tight.y0 - expected.y0) <= 1);
      CHECK(std::abs(tight.x1 - expected.x1) <= 1);
      CHECK(std::abs(tight.y1 - expected.y1) <= 1);
      for (size_t j = 0; j < i; ++j) CHECK(box_iou(inst.box, s.instances[j].box) <= cfg.max_overlap_iou + 1e-12);
    }
  }
}

TEST_CASE("single-instance samples have a mask whose tight box is the box") {
  SynthConfig cfg;
  cfg.max_instances = 1;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_sample(seed, cfg);
    REQUIRE(s.instances.size() == 1);
    const auto tight = from_pixel_rect(tight_pixel_rect(s.instances[0].mask), cfg.height, cfg.width);
    CHECK(std::abs(tight.x0() - s.instances[0].box.x0()) * cfg.width <= 1.0);
    CHECK(std::abs(tight.x1() - s.instances[0].box.x1()) * cfg.width <= 1.0);
    CHECK(std::abs(tight.y0() - s.instances[0].box.y0()) * cfg.height <= 1.0);
    CHECK(std::abs(tight.y1() - s.instances[0].box.y1()) * cfg.height <= 1.0);
  }
}

TEST_CASE("class histogram over seeds 0..99 stays within 20% of uniform") {
  SynthConfig cfg;
  std::map<int, int> counts;
  int total = 0;
  for (uint64_t seed = 0; seed < 100; ++seed)
    for (const auto& inst : generate_sample(seed, cfg).instances) {
      ++counts[inst.class_id];
      ++total;
    }
  const double uniform = static_cast<double>(total) / cfg.num_classes;
  for (int c = 0; c < cfg.num_classes; ++c) {
    INFO("class " << c << " count " << counts[c] << " of " << total);
    CHECK(std::abs(counts[c] - uniform) <= 0.2 * uniform);
  }
}

TEST_CASE("invalid synth configurations are rejected") {
  SynthConfig cfg;
  cfg.height = 100;
  CHECK_THROWS_AS(generate_sample(0, cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.num_classes = 0;
  CHECK_THROWS_AS(generate_sample(0, cfg), ConfigError);
  cfg = SynthConfig{};
  cfg.max_instances = 0;
  CHECK_THROWS_AS(generate_sample(0, cfg), ConfigError);
}

TEST_CASE("rasterize_instance hand cases") {
  auto full = rasterize_instance({0.5, 0.5, 1.0, 1.0}, 64, 64, Style::solid);
  CHECK(full.all().item<bool>());

  auto block = rasterize_instance({0.5, 0.5, 0.5, 0.5}, 64, 64, Style::solid);
  auto expected = torch::zeros({64, 64}, torch::kBool);
  expected.slice(0, 16, 48).slice(1, 16, 48).fill_(true);
  CHECK(torch::equal(block, expected));

  CHECK_THROWS_AS(rasterize_instance({0.5, 0.5, 0.01, 0.5}, 64, 64, Style::solid), InputError);
  CHECK_THROWS_AS(rasterize_instance({0.5, 0.5, 1.5, 0.5}, 64, 64, Style::solid), InputError);
}

TEST_CASE("every style keeps its support inside the box with the same tight box") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> side(0.1, 0.6), u(0.0, 1.0);
  for (int t = 0; t < 60; ++t) {
    const double w = side(rng), h = side(rng);
    const BoxCXCYWH box{w / 2 + u(rng) * (1 - w), h / 2 + u(rng) * (1 - h), w, h};
    const auto rect = to_pixel_rect(box, 128, 128);
    for (auto style : {Style::solid, Style::striped, Style::grid}) {
      auto m = rasterize_instance(box, 128, 128, style);
      auto outside = m.clone();
      outside.slice(0, rect.y0, rect.y1).slice(1, rect.x0, rect.x1).fill_(false);
      CHECK_FALSE(outside.any().item<bool>());
      const auto tight = tight_pixel_rect(m);
      CHECK(tight.x0 == rect.x0);
      CHECK(tight.y0 == rect.y0);
      CHECK(tight.x1 == rect.x1);
      CHECK(tight.y1 == rect.y1);
    }
  }
}

TEST_CASE("dataset roundtrip is lossless") {
  testutil::TempDir dir("dataset");
  SynthConfig cfg;
  const auto samples = generate_samples(0, 10, cfg);
  const auto written = write_dataset(samples, dir.path(), cfg.resolved_class_names());
  DatasetManifest read_manifest;
  const auto back = read_dataset(dir.path(), &read_manifest);
  REQUIRE(back.size() == samples.size());
  for (size_t i = 0; i < samples.size(); ++i) CHECK(samples_equal(samples[i], back[i]));
  CHECK(read_manifest.to_json() == written.to_json());
}

TEST_CASE("dataset reader validates the manifest") {
  testutil::TempDir dir("badds");
  SynthConfig cfg;
  auto m = write_dataset(generate_samples(0, 2, cfg), dir.path(), cfg.resolved_class_names());

  auto j = m.to_json();
  j["samples"][0]["annotations"][0]["category_id"] = 42;
  CHECK_THROWS_AS(DatasetManifest::from_json(j, "manifest.json"), IoError);

  j = m.to_json();
  j["version"] = "docseg-dataset/0";
  CHECK_THROWS_AS(DatasetManifest::from_json(j, "manifest.json"), IoError);

  testutil::TempDir empty("emptyds");
  CHECK_THROWS_AS(read_dataset(empty.path()), IoError);
  CHECK_THROWS_AS(write_dataset({}, empty.path(), cfg.resolved_class_names()), InputError);
}

TEST_CASE("PNG and RLE roundtrips") {
  testutil::TempDir dir("png");
  const auto s = generate_sample(3, SynthConfig{});
  write_png(dir.path() / "img.png", tensor_to_image(s.image));
  CHECK(torch::equal(image_to_tensor(read_png(dir.path() / "img.png")), s.image));
  CHECK_THROWS_AS(read_png(dir.path() / "missing.png"), IoError);

  for (const auto& inst : s.instances) {
    const auto rle = rle_encode(inst.mask);
    CHECK(torch::equal(rle_decode(rle), inst.mask));
    CHECK(rle_area(rle) == inst.mask.sum().item<int64_t>());
    CHECK(rle_from_json(rle_to_json(rle)) == rle);
  }
  auto tiny = torch::tensor({0, 1, 1, 0, 0, 1}, torch::kBool).view({2, 3});
  // Column-major order reads 0 0 | 1 0 | 1 1.
  CHECK(rle_encode(tiny).counts == std::vector<uint32_t>{2, 1, 1, 2});
}
