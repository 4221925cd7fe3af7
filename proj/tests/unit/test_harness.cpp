#include "common.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "docseg/checkpoint.hpp"
#include "docseg/config.hpp"
#include "docseg/dataset.hpp"
#include "docseg/errors.hpp"
#include "docseg/evaluate.hpp"
#include "docseg/gradcheck.hpp"
#include "docseg/image_io.hpp"
#include "docseg/predict.hpp"
#include "docseg/rle.hpp"
#include "docseg/train.hpp"

using namespace docseg;
using nlohmann::json;

namespace {

RunConfig tiny_run(const std::filesystem::path& out, int64_t steps) {
  auto cfg = tiny_gradcheck_config();
  cfg.synth_count = 3;
  cfg.steps = steps;
  cfg.batch = 2;
  cfg.lr = 1e-3;
  cfg.checkpoint_every = 0;
  cfg.out_dir = out.string();
  return cfg;
}

TrainResult quiet_train(const RunConfig& cfg, TrainOptions opts = {}) {
  std::ostringstream sink;
  opts.log = &sink;
  return train(cfg, opts);
}

std::vector<synthdoc::LayoutSample> tiny_samples(int n, uint64_t seed) {
  synthdoc::SynthConfig s;
  s.height = 64;
  s.width = 64;
  s.min_side = 8;
  s.max_instances = 3;
  return synthdoc::generate_samples(seed, n, s);
}

std::vector<segbranch::Detection> as_detections(const std::vector<synthdoc::Instance>& gt) {
  std::vector<segbranch::Detection> out;
  for (const auto& i : gt) out.push_back({i.class_id, 0.9, i.box, i.mask.clone()});
  return out;
}

}  // namespace

TEST_CASE("config accepts flat and nested keys and rejects unknown ones") {
  const auto flat = RunConfig::from_json(json{{"model.dim", 32}, {"optimizer.lr", 0.01}, {"cdn.groups", 3}});
  const auto nested = RunConfig::from_json(json{{"model", {{"dim", 32}}}, {"optimizer", {{"lr", 0.01}}},
                                                {"cdn", {{"groups", 3}}}});
  CHECK(flat.model.hidden_dim == 32);
  CHECK(flat.lr == 0.01);
  CHECK(flat.model.cdn.num_groups == 3);
  CHECK(flat.to_json() == nested.to_json());
  CHECK(RunConfig::from_json(flat.to_json()).to_json() == flat.to_json());

  CHECK_THROWS_AS(RunConfig::from_json(json{{"model.dimension", 32}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"model", {{"bogus", 1}}}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"model.dim", "wide"}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"cdn.lambda_p", 0.5}, {"cdn.lambda_e", 0.1}}), ConfigError);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"dataset.preset", "coco"}}), ConfigError);
  for (const auto& key : config_keys()) CHECK(flat.to_json().contains(key));
}

TEST_CASE("dataset presets select the contrastive temperature") {
  CHECK(RunConfig{}.model.tau == 0.02);
  CHECK(RunConfig::from_json(json{{"dataset.preset", "prima"}}).model.tau == 0.6);
  CHECK(RunConfig::from_json(json{{"dataset.preset", "tablebank"}}).model.tau == 0.2);
  CHECK(RunConfig::from_json(json{{"contrastive.tau", "hj"}}).model.tau == 0.1);
  CHECK(RunConfig::from_json(json{{"contrastive.tau", 0.3}}).model.tau == 0.3);
  CHECK_THROWS_AS(RunConfig::from_json(json{{"contrastive.tau", -1.0}}), ConfigError);
}

TEST_CASE("config files load from disk") {
  testutil::TempDir dir("cfg");
  const auto path = dir.path() / "run.json";
  std::ofstream(path) << R"({"optimizer": {"steps": 7}, "train.out_dir": "x"})";
  const auto cfg = RunConfig::load(path.string());
  CHECK(cfg.steps == 7);
  CHECK(cfg.out_dir == "x");
  CHECK_THROWS(RunConfig::load((dir.path() / "missing.json").string()));
  std::ofstream(dir.path() / "bad.json") << "{not json";
  CHECK_THROWS_AS(RunConfig::load((dir.path() / "bad.json").string()), ConfigError);
}

TEST_CASE("checkpoints roundtrip every tensor exactly") {
  testutil::TempDir dir("ckpt");
  const auto cfg = tiny_run(dir.path(), 2);
  auto model = build_model(cfg);
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(1e-3));
  const auto path = (dir.path() / "a.ckpt").string();
  save_checkpoint(path, model, &opt, cfg, 5);
  const auto ck = read_checkpoint(path);
  CHECK(ck.step == 5);
  CHECK(ck.preset == cfg.preset);
  CHECK(ck.run_config().to_json() == cfg.to_json());

  auto other = build_model([&] {
    auto c = cfg;
    c.seed = 99;
    return c;
  }());
  load_model_state(other, ck);
  auto a = model->named_parameters();
  auto b = other->named_parameters();
  for (const auto& p : a) CHECK(torch::equal(p.value(), b[p.key()]));
  for (const auto& buf : model->named_buffers()) CHECK(torch::equal(buf.value(), other->named_buffers()[buf.key()]));

  auto wider_cfg = cfg;
  wider_cfg.model.hidden_dim = 24;
  auto wider = build_model(wider_cfg);
  try {
    load_model_state(wider, ck);
    FAIL("expected a shape mismatch");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("param '") != std::string::npos);
    CHECK(msg.find("shape") != std::string::npos);
  }
  CHECK_THROWS_AS(read_checkpoint((dir.path() / "none.ckpt").string()), IoError);
  std::ofstream(dir.path() / "junk.ckpt") << "not a checkpoint";
  CHECK_THROWS(read_checkpoint((dir.path() / "junk.ckpt").string()));
}

TEST_CASE("single-threaded training is reproducible and resumes exactly") {
  testutil::TempDir dir("train");
  const auto full = quiet_train(tiny_run(dir.path() / "full", 3));
  const auto again = quiet_train(tiny_run(dir.path() / "again", 3));
  REQUIRE(full.history.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(full.history[i].total == again.history[i].total);

  const auto first = quiet_train(tiny_run(dir.path() / "first", 2));
  TrainOptions resume;
  resume.resume = first.final_checkpoint;
  const auto rest = quiet_train(tiny_run(dir.path() / "rest", 3), resume);
  REQUIRE(rest.history.size() == 1);
  CHECK(rest.history[0].step == 2);
  CHECK(rest.history[0].total == full.history[2].total);
}

TEST_CASE("fine-tuning decays the mask weight from start to end") {
  testutil::TempDir dir("finetune");
  const auto base = quiet_train(tiny_run(dir.path() / "base", 1));
  auto cfg = tiny_run(dir.path() / "ft", 6);
  cfg.preset = "prima";
  TrainOptions opts;
  opts.finetune_from = base.final_checkpoint;
  const auto ft = quiet_train(cfg, opts);
  const double w = cfg.loss.weights.w_mask;
  REQUIRE(ft.history.size() == 6);
  CHECK(ft.history.front().w_mask_eff == 3 * w);
  CHECK(ft.history.back().w_mask_eff == doctest::Approx(w));
  for (size_t i = 1; i < ft.history.size(); ++i) CHECK(ft.history[i].w_mask_eff <= ft.history[i - 1].w_mask_eff);
  for (const auto& rec : base.history) CHECK(rec.w_mask_eff == w);
}

TEST_CASE("metrics log lines carry every loss term") {
  testutil::TempDir dir("metrics");
  const auto cfg = tiny_run(dir.path(), 2);
  train(cfg);
  std::ifstream in(dir.path() / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = json::parse(line);
    for (const auto& key : {"step", "total", "w_mask_eff"}) CHECK(j.contains(key));
    for (const auto& term : matchloss::loss_term_names()) CHECK(j.contains(term));
    ++lines;
  }
  CHECK(lines == 2);
}

TEST_CASE("average precision on a hand-built ranking") {
  // One class, three GT; ranked TP, FP, TP, and one GT never found.
  std::vector<ScoredDetection> dets{{0.9, {0.9, 0.0, 0.0}}, {0.8, {0.1, 0.2, 0.3}}, {0.7, {0.0, 0.7, 0.0}}};
  const double ap = average_precision({{dets, 3}}, 0.5);
  // Precision envelope is 1 up to recall 1/3 and 2/3 up to recall 2/3.
  double expected = 0.0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    expected += r <= 1.0 / 3 ? 1.0 : r <= 2.0 / 3 ? 2.0 / 3 : 0.0;
  }
  expected /= 101.0;
  CHECK(ap == doctest::Approx(expected).epsilon(1e-12));
  CHECK(ap == doctest::Approx(56.0 / 101.0).epsilon(1e-12));
  CHECK(average_precision({{dets, 3}}, 0.95) == 0.0);
  CHECK(average_precision({{{}, 0}}, 0.5) == -1.0);
  CHECK(average_precision({{{}, 2}}, 0.5) == 0.0);
}

TEST_CASE("evaluation of perfect and empty predictions") {
  const auto samples = tiny_samples(4, 3);
  std::vector<std::vector<synthdoc::Instance>> gt;
  std::vector<std::vector<segbranch::Detection>> perfect, empty(4);
  for (const auto& s : samples) {
    gt.push_back(s.instances);
    perfect.push_back(as_detections(s.instances));
  }
  const auto p = evaluate_predictions(perfect, gt, 5);
  CHECK(p.mask_ap50 == 1.0);
  CHECK(p.mask_ap75 == 1.0);
  CHECK(p.box_ap50 == 1.0);
  CHECK(p.num_images == 4);
  double mean = 0.0;
  for (const auto& [c, ap] : p.per_class_mask_ap50) mean += ap;
  CHECK(mean / static_cast<double>(p.per_class_mask_ap50.size()) == doctest::Approx(p.mask_ap50));

  const auto e = evaluate_predictions(empty, gt, 5);
  CHECK(e.mask_ap50 == 0.0);
  CHECK(e.box_ap50 == 0.0);
  CHECK(e.num_predictions == 0);

  auto a = torch::zeros({4, 4}, torch::kBool), b = torch::zeros({4, 4}, torch::kBool);
  a.slice(0, 0, 2) = true;
  b.slice(0, 1, 3) = true;
  CHECK(mask_iou(a, b) == doctest::Approx(4.0 / 12.0));
}

TEST_CASE("prediction output is valid at any threshold and roundtrips its masks") {
  auto cfg = tiny_gradcheck_config();
  auto model = build_model(cfg);
  model->eval();
  auto image = torch::rand({3, 60, 70}, torch::kFloat64);

  const auto none = predict_image(model, image, 1.01);
  CHECK(none.detections.empty());
  CHECK(none.height == 60);
  CHECK(none.width == 70);
  CHECK(none.padded_height == 64);
  CHECK(none.padded_width == 96);
  const auto j = json::parse(none.to_json(cfg.synth.resolved_class_names(), "x.png").dump());
  CHECK(j.at("instances").is_array());
  CHECK(j.at("instances").empty());

  const auto all = predict_image(model, image, 0.0);
  const auto doc = all.to_json(cfg.synth.resolved_class_names());
  REQUIRE(doc.at("instances").size() == all.detections.size());
  for (size_t i = 0; i < all.detections.size(); ++i) {
    const auto& inst = doc.at("instances")[i];
    const auto mask = rle_decode(rle_from_json(inst.at("segmentation")));
    CHECK(mask.sizes() == torch::IntArrayRef({60, 70}));
    CHECK(torch::equal(mask, all.detections[i].mask));
    CHECK(inst.at("score").get<double>() == all.detections[i].score);
  }

  testutil::TempDir dir("predict");
  const auto png = dir.path() / "in.png";
  write_png(png, tensor_to_image(image.to(torch::kFloat32)));
  predict_file(model, png, dir.path() / "out", 0.0, cfg.synth.resolved_class_names());
  CHECK(std::filesystem::exists(dir.path() / "out" / "predictions.json"));
  CHECK(std::filesystem::exists(dir.path() / "out" / "overlay.png"));
  CHECK_THROWS_AS(predict_file(model, dir.path() / "missing.png", dir.path() / "o2", 0.5, {}), IoError);
}

TEST_CASE("gradient check on the tiny model") {
  auto cfg = tiny_gradcheck_config();
  GradcheckOptions opts;
  opts.num_params = 13;
  const auto report = gradcheck(cfg, opts);
  CHECK(report.entries.size() == 13);
  CHECK(report.max_rel_error < 1e-4);
  CHECK(report.skipped_groups.empty());
  std::set<std::string> groups;
  for (const auto& e : report.entries) groups.insert(e.parameter.substr(0, e.parameter.find('.')));
  CHECK(groups.size() >= 10);

  opts.zero_loss = true;
  opts.num_params = 5;
  const auto zero = gradcheck(cfg, opts);
  CHECK(zero.loss == 0.0);
  for (const auto& e : zero.entries) {
    CHECK(std::abs(e.analytic) < 1e-8);
    CHECK(std::abs(e.numeric) < 1e-8);
  }
}

TEST_CASE("learning rate is constant by default and decays by cosine when asked") {
  RunConfig cfg;
  cfg.lr = 1e-3;
  cfg.steps = 101;
  CHECK(learning_rate(cfg, 0) == 1e-3);
  CHECK(learning_rate(cfg, 100) == 1e-3);
  cfg.lr_final_fraction = 0.1;
  CHECK(learning_rate(cfg, 0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(learning_rate(cfg, 50) == doctest::Approx(0.55e-3).epsilon(1e-12));
  CHECK(learning_rate(cfg, 100) == doctest::Approx(1e-4).epsilon(1e-12));
  for (int64_t s = 1; s < 101; ++s) CHECK(learning_rate(cfg, s) <= learning_rate(cfg, s - 1));
  cfg.lr_final_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
