#include "common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "docseg/errors.hpp"
#include "docseg/matchloss.hpp"

using namespace docseg;
using namespace docseg::matchloss;
using segbranch::InstancePrediction;

namespace {

using Matrix = std::vector<std::vector<double>>;

// Minimum over all injective maps gt -> query, summed in gt order.
double brute_force_min(const Matrix& c) {
  const int Q = static_cast<int>(c.size()), q = static_cast<int>(c[0].size());
  const bool rows_are_gt = q > Q;
  const int n = rows_are_gt ? Q : q, m = rows_are_gt ? q : Q;
  std::vector<int> pick(m);
  std::iota(pick.begin(), pick.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += rows_are_gt ? c[i][pick[i]] : c[pick[i]][i];
    best = std::min(best, s);
  } while (std::next_permutation(pick.begin(), pick.end()));
  return best;
}

double cost_of(const Matrix& c, const MatchResult& r) {
  double s = 0.0;
  for (auto [qi, gi] : r.pairs) s += c[qi][gi];
  return s;
}

bool injective(const MatchResult& r, int Q, int q) {
  std::vector<int> qs(Q, 0), gs(q, 0);
  for (auto [qi, gi] : r.pairs) {
    if (qi < 0 || qi >= Q || gi < 0 || gi >= q) return false;
    if (qs[qi]++ || gs[gi]++) return false;
  }
  return static_cast<int>(r.pairs.size()) == std::min(Q, q) &&
         static_cast<int>(r.unmatched_queries.size()) == Q - static_cast<int>(r.pairs.size());
}

InstancePrediction random_prediction(int64_t Q, int64_t classes, int64_t h, int64_t w) {
  InstancePrediction p;
  p.class_logits = torch::randn({Q, classes}, torch::kFloat64);
  p.boxes = torch::rand({Q, 4}, torch::kFloat64) * 0.6 + 0.2;
  p.mask_logits = torch::randn({Q, h, w}, torch::kFloat64) * 2.0;
  return p;
}

GtTargets random_targets(int64_t q, int64_t classes, int64_t h, int64_t w) {
  GtTargets t;
  t.classes = torch::randint(0, classes, {q}, torch::kLong);
  t.boxes = torch::rand({q, 4}, torch::kFloat64) * 0.6 + 0.2;
  t.masks = (torch::rand({q, h, w}, torch::kFloat64) > 0.6).to(torch::kFloat64);
  return t;
}

GtTargets permute_targets(const GtTargets& t, const torch::Tensor& perm) {
  return {t.classes.index_select(0, perm), t.boxes.index_select(0, perm), t.masks.index_select(0, perm)};
}

// Decoder output with `cdn_groups` denoising groups in front of Q matching rows.
ModelOutput synthetic_output(const GtTargets& gt, int64_t Q, int64_t classes, int layers, int cdn_groups) {
  const int64_t q = gt.size(), h = gt.masks.size(1), w = gt.masks.size(2);
  ModelOutput out;
  std::vector<int> group, gt_index, target;
  std::vector<transformer::Polarity> pol;
  for (int g = 0; g < cdn_groups; ++g)
    for (int side = 0; side < 2; ++side)
      for (int64_t i = 0; i < q; ++i) {
        group.push_back(g);
        gt_index.push_back(static_cast<int>(i));
        pol.push_back(side == 0 ? transformer::Polarity::positive : transformer::Polarity::negative);
        target.push_back(side == 0 ? static_cast<int>(gt.classes[i].item<int64_t>()) : static_cast<int>(classes));
      }
  out.cdn.group = group;
  out.cdn.gt_index = gt_index;
  out.cdn.polarity = pol;
  out.cdn.target_class = target;
  out.cdn.input_labels = target;
  out.cdn.num_groups = cdn_groups;
  out.cdn.per_group = static_cast<int>(2 * q);
  out.num_cdn = static_cast<int64_t>(group.size());
  for (int l = 0; l < layers; ++l) out.layers.push_back(random_prediction(out.num_cdn + Q, classes + 1, h, w));
  out.encoder = random_prediction(Q, classes, h, w);
  return out;
}

LossConfig no_contrastive() {
  LossConfig cfg;
  cfg.w_low = 0.0;
  cfg.w_high = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("focal loss scalar cases") {
  auto half = torch::tensor({{0.0, 0.0}}, torch::kFloat64);
  auto t0 = torch::tensor({0}, torch::kLong);
  CHECK(focal_loss(half, t0, 1.0, 0.0).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(focal_loss(half, t0, 1.0, 0.0).item<double>() == doctest::Approx(0.6931).epsilon(1e-4));

  auto p09 = torch::tensor({{std::log(9.0), 0.0}}, torch::kFloat64);
  const double expected = 0.25 * 0.1 * 0.1 * -std::log(0.9);
  CHECK(focal_loss(p09, t0, 0.25, 2.0).item<double>() == doctest::Approx(expected).epsilon(1e-12));
  CHECK(focal_loss(p09, t0, 0.25, 2.0).item<double>() == doctest::Approx(2.634e-4).epsilon(1e-3));

  auto sure = torch::tensor({{60.0, 0.0}}, torch::kFloat64);
  CHECK(focal_loss(sure, t0).item<double>() < 1e-30);
  CHECK_THROWS_AS(focal_loss(half, t0, 0.25, -1.0), ConfigError);

  // Sigmoid form: alpha-weighted positives plus (1 - alpha)-weighted negatives per row.
  auto logits = torch::tensor({{0.3, -1.2, 2.0}, {-0.5, 0.1, 0.0}}, torch::kFloat64);
  auto onehot = torch::tensor({{1.0, 0.0, 0.0}, {0.0, 0.0, 0.0}}, torch::kFloat64);
  auto la = logits.accessor<double, 2>();
  auto ya = onehot.accessor<double, 2>();
  double total = 0.0;
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) {
      const double p = 1.0 / (1.0 + std::exp(-la[r][c]));
      total += ya[r][c] > 0 ? -0.25 * std::pow(1 - p, 2) * std::log(p) : -0.75 * std::pow(p, 2) * std::log(1 - p);
    }
  CHECK(focal_loss(logits, onehot).item<double>() == doctest::Approx(total / 2).epsilon(1e-12));
}

TEST_CASE("box, dice and mask losses") {
  auto pred = torch::tensor({{0.5, 0.5, 0.4, 0.4}}, torch::kFloat64);
  auto gt = torch::tensor({{0.5, 0.5, 0.5, 0.5}}, torch::kFloat64);
  CHECK(l1_box_loss(pred, gt).item<double>() == doctest::Approx(0.05).epsilon(1e-12));
  CHECK(l1_box_loss(gt, gt).item<double>() == 0.0);
  CHECK_THROWS_AS(l1_box_loss(pred, torch::zeros({2, 4})), ShapeError);

  auto m = (torch::rand({3, 8, 8}) > 0.5).to(torch::kFloat64);
  CHECK(dice_loss(m, m).item<double>() == doctest::Approx(0.0).epsilon(1e-12));
  auto p = torch::full({1, 2, 2}, 0.5, torch::kFloat64);
  auto y = torch::tensor({{{1.0, 0.0}, {0.0, 0.0}}}, torch::kFloat64);
  CHECK(dice_loss(p, y).item<double>() == doctest::Approx(1.0 - (2 * 0.5 + 1) / (2.0 + 1.0 + 1.0)));
  CHECK_THROWS_AS(dice_loss(p, torch::zeros({1, 3, 2})), ShapeError);

  auto logits = torch::tensor({{{0.0, 2.0}}}, torch::kFloat64);
  auto target = torch::tensor({{{1.0, 0.0}}}, torch::kFloat64);
  const double bce = (std::log(2.0) + std::log(1.0 + std::exp(2.0))) / 2;
  CHECK(mask_bce(logits, target).item<double>() == doctest::Approx(bce).epsilon(1e-12));
}

TEST_CASE("cost matrix entries equal per-term evaluation") {
  auto pred = random_prediction(4, 6, 6, 6);
  auto gt = random_targets(3, 5, 6, 6);
  const CostWeights w{2.0, 5.0, 5.0};
  auto c = cost_matrix(pred, gt, w);
  REQUIRE(c.sizes() == torch::IntArrayRef({4, 3}));
  auto prob = torch::softmax(pred.class_logits, 1);
  double worst = 0.0;
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t g = 0; g < 3; ++g) {
      const double p = prob[i][gt.classes[g].item<int64_t>()].item<double>();
      const double cls = 0.25 * std::pow(1 - p, 2) * -std::log(p + 1e-8) - 0.75 * p * p * -std::log(1 - p + 1e-8);
      const double l1 = l1_box_loss(pred.boxes[i].unsqueeze(0), gt.boxes[g].unsqueeze(0)).item<double>();
      const double mask = dice_loss(torch::sigmoid(pred.mask_logits[i]).unsqueeze(0), gt.masks[g].unsqueeze(0))
                              .item<double>() +
                          mask_bce(pred.mask_logits[i], gt.masks[g]).item<double>();
      worst = std::max(worst, std::abs(c[i][g].item<double>() - (2 * cls + 5 * l1 + 5 * mask)));
    }
  CHECK(worst < 1e-10);

  auto exact = random_prediction(2, 6, 6, 6);
  exact.boxes[1] = gt.boxes[2];
  CHECK(cost_matrix(exact, gt, {0.0, 1.0, 0.0})[1][2].item<double>() == 0.0);

  const CostWeights scaled{6.0, 15.0, 15.0};
  auto c3 = cost_matrix(pred, gt, scaled);
  CHECK(testutil::max_abs_diff(c3, 3.0 * c) < 1e-10);
  CHECK(hungarian(c3).pairs == hungarian(c).pairs);

  auto empty = cost_matrix(pred, random_targets(0, 5, 6, 6), w);
  CHECK(empty.sizes() == torch::IntArrayRef({4, 0}));
}

TEST_CASE("hungarian hand cases and ties") {
  auto r = hungarian(Matrix{{1, 2}, {3, 1}});
  CHECK(r.pairs == std::vector<std::pair<int64_t, int64_t>>{{0, 0}, {1, 1}});
  CHECK(r.total_cost == 2.0);
  CHECK(r.unmatched_queries.empty());

  Matrix diag(5, std::vector<double>(5, 10.0));
  for (int i = 0; i < 5; ++i) diag[i][i] = 1.0;
  const auto d = hungarian(diag);
  for (int i = 0; i < 5; ++i) CHECK(d.pairs[i] == std::pair<int64_t, int64_t>{i, i});

  // Every assignment ties: lexicographic (gt, query) order decides.
  const auto flat = hungarian(Matrix(4, std::vector<double>(2, 1.0)));
  CHECK(flat.pairs == std::vector<std::pair<int64_t, int64_t>>{{0, 0}, {1, 1}});
  CHECK(flat.unmatched_queries == std::vector<int64_t>{2, 3});
  const auto wide = hungarian(Matrix(2, std::vector<double>(4, 1.0)));
  CHECK(wide.pairs == std::vector<std::pair<int64_t, int64_t>>{{0, 0}, {1, 1}});
  // Two optimal assignments with total 2; the one giving gt 0 to query 0 wins.
  const auto tie = hungarian(Matrix{{1, 1, 5}, {1, 1, 5}, {5, 5, 0}});
  CHECK(tie.pairs == std::vector<std::pair<int64_t, int64_t>>{{0, 0}, {1, 1}, {2, 2}});
  for (int repeat = 0; repeat < 3; ++repeat) CHECK(hungarian(Matrix{{1, 1, 5}, {1, 1, 5}, {5, 5, 0}}).pairs == tie.pairs);

  const auto none = hungarian(torch::zeros({3, 0}));
  CHECK(none.pairs.empty());
  CHECK(none.unmatched_queries.size() == 3);
  CHECK_THROWS_AS(hungarian(Matrix{{1, NAN}}), InputError);
  CHECK_THROWS_AS(hungarian(torch::tensor({{1.0, std::numeric_limits<double>::infinity()}})), InputError);
  CHECK_THROWS_AS(hungarian(Matrix{{1, 2}, {3}}), InputError);
}

TEST_CASE("hungarian equals the exhaustive minimum") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(1, 7), small(0, 6);
  std::uniform_real_distribution<double> real(-5.0, 5.0);
  for (int trial = 0; trial < 1200; ++trial) {
    const int Q = dim(rng), q = dim(rng);
    const bool integer = trial % 2 == 0;
    Matrix c(Q, std::vector<double>(q));
    for (auto& row : c)
      for (auto& x : row) x = integer ? small(rng) : real(rng);
    const auto r = hungarian(c);
    CHECK(injective(r, Q, q));
    const double best = brute_force_min(c);
    if (integer) {
      CHECK(cost_of(c, r) == best);
      CHECK(r.total_cost == best);
    } else {
      CHECK(cost_of(c, r) == doctest::Approx(best).epsilon(1e-12));
    }
  }
}

TEST_CASE("assignment survives scaling and row or column offsets") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> real(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + trial % 5;
    Matrix sq(n, std::vector<double>(n)), rect(n + 2, std::vector<double>(n));
    for (auto& row : sq)
      for (auto& x : row) x = real(rng);
    for (auto& row : rect)
      for (auto& x : row) x = real(rng);
    const auto base = hungarian(sq).pairs;
    Matrix shifted = sq, scaled = sq;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        shifted[i][j] += 0.37 * i;
        scaled[i][j] *= 4.5;
      }
    CHECK(hungarian(shifted).pairs == base);
    CHECK(hungarian(scaled).pairs == base);
    // Every GT is matched, so per-GT offsets cannot change the assignment.
    const auto rbase = hungarian(rect).pairs;
    Matrix rshift = rect;
    for (auto& row : rshift)
      for (int j = 0; j < n; ++j) row[j] += 0.5 * j;
    CHECK(hungarian(rshift).pairs == rbase);
  }
}

TEST_CASE("domain-shift schedule") {
  DomainShiftSchedule s{15.0, 5.0, 100, DomainShiftSchedule::Shape::cosine};
  CHECK(hybrid_weight(0, s) == 15.0);
  CHECK(hybrid_weight(100, s) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(hybrid_weight(50, s) == doctest::Approx(10.0).epsilon(1e-12));
  double prev = hybrid_weight(0, s);
  for (int step = 1; step <= 100; ++step) {
    const double w = hybrid_weight(step, s);
    CHECK(w <= prev);
    prev = w;
  }
  CHECK(hybrid_weight(-5, s) == 15.0);
  CHECK(hybrid_weight(500, s) == doctest::Approx(5.0));
  s.shape = DomainShiftSchedule::Shape::linear;
  CHECK(hybrid_weight(25, s) == doctest::Approx(12.5).epsilon(1e-12));
  s.w_start = 1.0;
  CHECK_THROWS_AS(hybrid_weight(0, s), ConfigError);
}

TEST_CASE("targets pool masks to the logit resolution") {
  synthdoc::Instance inst;
  inst.class_id = 2;
  inst.box = {0.25, 0.25, 0.5, 0.5};
  inst.mask = torch::zeros({16, 16}, torch::kBool);
  inst.mask.slice(0, 0, 8).slice(1, 0, 6) = true;
  auto t = make_targets({inst}, 4, 4, torch::kFloat64);
  CHECK(t.classes[0].item<int64_t>() == 2);
  CHECK(t.masks.sizes() == torch::IntArrayRef({1, 4, 4}));
  CHECK(t.masks[0][0][0].item<double>() == 1.0);
  CHECK(t.masks[0][0][1].item<double>() == 0.5);
  CHECK(t.masks[0][3][3].item<double>() == 0.0);
  CHECK_THROWS_AS(make_targets({inst}, 5, 5), InputError);
}

TEST_CASE("box-only loss vanishes at the ground truth") {
  auto gt = random_targets(3, 5, 8, 8);
  auto out = synthetic_output(gt, 3, 5, 2, 0);
  for (auto& layer : out.layers) layer.boxes = gt.boxes.clone();
  LossConfig cfg = no_contrastive();
  cfg.weights = {0.0, 1.0, 0.0};
  cfg.encoder_stage = false;
  auto b = total_loss(out, gt, cfg);
  CHECK(b.total.item<double>() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(b.value("l1") == 0.0);
}

TEST_CASE("loss breakdown is additive and denoising terms separate exactly") {
  auto gt = random_targets(3, 5, 8, 8);
  auto with = synthetic_output(gt, 6, 5, 3, 2);
  ModelOutput without = with;
  without.num_cdn = 0;
  without.cdn = {};
  without.layers.clear();
  for (const auto& l : with.layers) without.layers.push_back(l.slice(with.num_cdn, l.size()));

  const auto cfg = no_contrastive();
  const auto a = total_loss(with, gt, cfg);
  const auto b = total_loss(without, gt, cfg);
  double sum = 0.0;
  for (const auto& name : loss_term_names()) sum += a.value(name);
  CHECK(testutil::rel_err(sum, a.total.item<double>()) < 1e-6);
  CHECK(a.value("cdn_pos") > 0.0);
  CHECK(a.value("cdn_neg") > 0.0);
  CHECK(b.value("cdn_pos") == 0.0);
  CHECK(b.value("cdn_neg") == 0.0);
  for (const auto& name : {"cls", "l1", "mask_dice", "mask_bce"}) CHECK(a.value(name) == b.value(name));
  CHECK(b.total.item<double>() ==
        doctest::Approx(a.total.item<double>() - a.value("cdn_pos") - a.value("cdn_neg")).epsilon(1e-12));
}

TEST_CASE("loss is invariant to the order of ground-truth instances") {
  for (int trial = 0; trial < 10; ++trial) {
    auto gt = random_targets(4, 5, 8, 8);
    auto out = synthetic_output(gt, 7, 5, 2, 2);
    auto perm = torch::randperm(4);
    auto inverse = torch::argsort(perm);
    auto pgt = permute_targets(gt, perm);
    ModelOutput pout = out;
    for (auto& idx : pout.cdn.gt_index) idx = static_cast<int>(inverse[idx].item<int64_t>());
    const auto cfg = no_contrastive();
    const double a = total_loss(out, gt, cfg).total.item<double>();
    const double b = total_loss(pout, pgt, cfg).total.item<double>();
    CHECK(testutil::rel_err(a, b) < 1e-10);
  }
}

TEST_CASE("losses are non-negative and non-finite terms are named") {
  for (int trial = 0; trial < 20; ++trial) {
    auto gt = random_targets(1 + trial % 4, 5, 8, 8);
    auto out = synthetic_output(gt, 6, 5, 2, trial % 3);
    auto b = total_loss(out, gt, no_contrastive(), 1.0 + trial);
    CHECK(b.w_mask_eff == 1.0 + trial);
    for (const auto& name : loss_term_names()) CHECK(b.value(name) >= 0.0);
  }
  auto gt = random_targets(2, 5, 8, 8);
  auto out = synthetic_output(gt, 4, 5, 1, 0);
  out.layers[0].boxes[0][0] = NAN;
  out.layers[0].boxes[1][0] = NAN;
  out.layers[0].boxes[2][0] = NAN;
  out.layers[0].boxes[3][0] = NAN;
  LossConfig cfg = no_contrastive();
  cfg.encoder_stage = false;
  try {
    total_loss(out, gt, cfg);
    FAIL("expected a training error");
  } catch (const InputError&) {
    // The matcher sees the NaN cost first.
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("l1") != std::string::npos);
  }
  out = synthetic_output(gt, 4, 5, 1, 0);
  out.layers[0].mask_logits.fill_(NAN);
  CHECK_THROWS(total_loss(out, gt, cfg));
}
