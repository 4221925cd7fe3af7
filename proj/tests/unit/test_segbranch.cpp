#include "common.hpp"

#include "docseg/errors.hpp"
#include "docseg/segbranch.hpp"

using namespace docseg;
using namespace docseg::segbranch;

namespace {

void set_identity_1x1(torch::nn::Conv2d& conv) {
  torch::NoGradGuard g;
  conv->weight.zero_();
  const int64_t n = std::min(conv->weight.size(0), conv->weight.size(1));
  for (int64_t i = 0; i < n; ++i) conv->weight[i][i][0][0] = 1.0;
  conv->bias.zero_();
}

}  // namespace

TEST_CASE("pixel embedding reduces to the backbone map") {
  PixelEmbedding pem(8, 8, 8);
  set_identity_1x1(pem->gamma);
  set_identity_1x1(pem->head_out);
  {
    torch::NoGradGuard g;
    pem->head_b->weight.zero_();
    pem->head_b->bias.zero_();
  }
  auto s_b = torch::randn({8, 12, 16});
  auto out = pem(s_b, torch::zeros({8, 6, 8}));
  CHECK(out.sizes() == s_b.sizes());
  CHECK(testutil::max_abs_diff(out, s_b) < 1e-6);
  CHECK_THROWS_AS(pem(s_b, torch::zeros({8, 5, 8})), ShapeError);
}

TEST_CASE("pixel embedding output is a quarter of the image") {
  PixelEmbedding pem(6, 10, 4);
  auto out = pem(torch::randn({6, 16, 24}), torch::randn({10, 8, 12}));
  CHECK(out.sizes() == torch::IntArrayRef({4, 16, 24}));
  CHECK(torch::isfinite(out).all().item<bool>());
}

TEST_CASE("2x upsampling keeps constants and matches half-pixel interpolation") {
  auto c = torch::full({3, 4, 5}, 2.5);
  auto up = upsample2x(c);
  CHECK(up.sizes() == torch::IntArrayRef({3, 8, 10}));
  CHECK(testutil::max_abs_diff(up, torch::full({3, 8, 10}, 2.5)) < 1e-6);

  // Output pixel x maps to input coordinate (x + 0.5) / 2 - 0.5.
  auto row = torch::tensor({0.0, 4.0, 8.0}, torch::kFloat64).view({1, 1, 3});
  auto r = upsample2x(row)[0][0];
  const std::vector<double> expected{0.0, 1.0, 3.0, 5.0, 7.0, 8.0};
  for (int x = 0; x < 6; ++x) CHECK(r[x].item<double>() == doctest::Approx(expected[x]));
  CHECK_THROWS_AS(upsample2x(torch::zeros({4, 4})), ShapeError);
}

TEST_CASE("pixel embedding gradients match finite differences") {
  PixelEmbedding pem(3, 4, 2);
  pem->to(torch::kFloat64);
  auto s_b = torch::randn({3, 6, 6}, torch::kFloat64);
  auto t_e = torch::randn({4, 3, 3}, torch::kFloat64);
  auto f = [&] { return pem(s_b, t_e).pow(2).sum(); };
  CHECK(testutil::fd_max_rel_error(s_b, f) < 1e-4);
  CHECK(testutil::fd_max_rel_error(t_e, f) < 1e-4);
  CHECK(testutil::fd_max_rel_error(pem->gamma->weight, f) < 1e-4);
  CHECK(testutil::fd_max_rel_error(pem->head_a->bias, f) < 1e-4);
  CHECK(testutil::fd_max_rel_error(pem->head_out->weight, f) < 1e-4);
}

TEST_CASE("mask prediction is a per-pixel dot product") {
  auto pem = torch::randn({4, 5, 5}, torch::kFloat64);
  for (int i = 0; i < 4; ++i) {
    auto e = torch::zeros({1, 4}, torch::kFloat64);
    e[0][i] = 1.0;
    CHECK(torch::equal(predict_masks(e, pem)[0], pem[i]));
  }
  CHECK(predict_masks(torch::zeros({2, 4}, torch::kFloat64), pem).abs().max().item<double>() == 0.0);

  auto q = torch::randn({3, 4}, torch::kFloat64);
  auto got = predict_masks(q, pem);
  auto qa = q.accessor<double, 2>();
  auto pa = pem.accessor<double, 3>();
  double worst = 0.0;
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        double s = 0.0;
        for (int d = 0; d < 4; ++d) s += qa[k][d] * pa[d][y][x];
        worst = std::max(worst, std::abs(s - got[k][y][x].item<double>()));
      }
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(predict_masks(torch::zeros({2, 3}), pem), ShapeError);
}

TEST_CASE("mask prediction is bilinear") {
  for (int trial = 0; trial < 20; ++trial) {
    auto q1 = torch::randn({3, 6}, torch::kFloat64), q2 = torch::randn({3, 6}, torch::kFloat64);
    auto p1 = torch::randn({6, 4, 7}, torch::kFloat64), p2 = torch::randn({6, 4, 7}, torch::kFloat64);
    const double a = 1.7, b = -0.4;
    auto lhs_q = predict_masks(a * q1 + b * q2, p1);
    auto rhs_q = a * predict_masks(q1, p1) + b * predict_masks(q2, p1);
    auto lhs_p = predict_masks(q1, a * p1 + b * p2);
    auto rhs_p = a * predict_masks(q1, p1) + b * predict_masks(q1, p2);
    CHECK(testutil::max_abs_diff(lhs_q, rhs_q) <= 1e-6 * rhs_q.abs().max().item<double>());
    CHECK(testutil::max_abs_diff(lhs_p, rhs_p) <= 1e-6 * rhs_p.abs().max().item<double>());
  }
}

TEST_CASE("class-instance mapping is one-to-one") {
  ClassInstanceMap map(16, 5, 8);
  auto emb = torch::randn({7, 16});
  emb[4] = emb[1];
  auto anchors = torch::rand({7, 4});
  auto pem = torch::randn({8, 6, 6});
  auto pred = map(emb, anchors, pem);
  CHECK(pred.size() == 7);
  CHECK(pred.class_logits.sizes() == torch::IntArrayRef({7, 6}));
  CHECK(pred.mask_logits.sizes() == torch::IntArrayRef({7, 6, 6}));
  CHECK(torch::equal(pred.boxes, anchors));
  CHECK(torch::equal(pred.class_logits[1], pred.class_logits[4]));
  CHECK(torch::equal(pred.mask_logits[1], pred.mask_logits[4]));
  auto part = pred.slice(2, 5);
  CHECK(part.size() == 3);
  CHECK(torch::equal(part.mask_logits[0], pred.mask_logits[2]));
}

TEST_CASE("inference filter drops background and low scores while training keeps all queries") {
  InstancePrediction pred;
  pred.class_logits = torch::tensor({{5.0f, 0.0f, 0.0f},    // class 0, confident
                                     {0.0f, 0.0f, 5.0f},    // background
                                     {0.0f, 0.6f, 0.5f},    // class 1, weak
                                     {0.0f, 3.0f, 0.0f}});  // class 1
  pred.boxes = torch::tensor({{0.5f, 0.5f, 0.2f, 0.2f}, {0.5f, 0.5f, 1.0f, 1.0f}, {0.3f, 0.3f, 0.1f, 0.1f},
                              {0.7f, 0.7f, 0.2f, 0.2f}});
  pred.mask_logits = torch::full({4, 4, 4}, -5.0f);
  pred.mask_logits[0].slice(0, 0, 2).slice(1, 0, 2).fill_(5.0f);
  CHECK(foreground_queries(pred.class_logits) == std::vector<int64_t>({0, 2, 3}));

  auto dets = postprocess(pred, 16, 16, 0.0);
  REQUIRE(dets.size() == 3);
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].score > dets[1].score);
  CHECK(dets[1].score > dets[2].score);
  const double expected0 = std::exp(5.0) / (std::exp(5.0) + 2.0);
  CHECK(dets[0].score == doctest::Approx(expected0).epsilon(1e-6));
  CHECK(dets[0].mask.sizes() == torch::IntArrayRef({16, 16}));
  CHECK(dets[0].mask.slice(0, 0, 7).slice(1, 0, 7).all().item<bool>());
  CHECK_FALSE(dets[0].mask.slice(0, 9, 16).any().item<bool>());
  CHECK(dets[0].box.w == doctest::Approx(0.2));

  auto strict = postprocess(pred, 16, 16, 0.5);
  CHECK(strict.size() == 2);
  CHECK(postprocess(pred, 16, 16, 1.01).empty());
}
