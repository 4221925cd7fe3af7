#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <torch/torch.h>

#include "docseg/checkpoint.hpp"
#include "docseg/config.hpp"
#include "docseg/dataset.hpp"
#include "docseg/errors.hpp"
#include "docseg/evaluate.hpp"
#include "docseg/gradcheck.hpp"
#include "docseg/predict.hpp"
#include "docseg/synthdoc.hpp"
#include "docseg/train.hpp"

namespace {

using namespace docseg;

RunConfig load_or_default(const std::string& path) { return path.empty() ? RunConfig{} : RunConfig::load(path); }

DocSegmenter model_from_checkpoint(const std::string& path, RunConfig* cfg_out) {
  const auto ck = read_checkpoint(path);
  auto cfg = ck.run_config();
  auto model = build_model(cfg);
  load_model_state(model, ck);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

void print_summary(const TrainResult& r) {
  std::cout << nlohmann::json{{"initial_loss", r.initial_loss},
                              {"final_loss", r.final_loss},
                              {"steps", r.history.size()},
                              {"checkpoint", r.final_checkpoint}}
                   .dump()
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  at::set_num_threads(1);
  CLI::App app{"Document layout instance segmentation"};
  app.require_subcommand(1);

  std::string out_dir, config_path, resume, from, ckpt, data, image, report_path;
  int count = 10;
  uint64_t seed = 0;
  double threshold = -1.0, eps = -1.0;
  int params = -1;
  bool zero_loss = false, sweep = false, tiny = false;

  auto* synth = app.add_subcommand("synth", "write a synthetic dataset");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--n", count, "number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "seed of the first sample");
  synth->add_option("--config", config_path, "run configuration for image size and classes");

  auto* train_cmd = app.add_subcommand("train", "train a model");
  train_cmd->add_option("--config", config_path, "run configuration")->required();
  train_cmd->add_option("--resume", resume, "checkpoint to resume from");

  auto* finetune = app.add_subcommand("finetune", "fine-tune with the mask-weight schedule");
  finetune->add_option("--config", config_path, "run configuration")->required();
  finetune->add_option("--from", from, "source checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "mask and box AP of a checkpoint");
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--threshold", threshold, "score threshold");
  eval->add_option("--report", report_path, "also write the report here");

  auto* predict = app.add_subcommand("predict", "segment one image");
  predict->add_option("--ckpt", ckpt, "checkpoint")->required();
  predict->add_option("--image", image, "PNG image")->required();
  predict->add_option("--out", out_dir, "output directory")->required();
  predict->add_option("--threshold", threshold, "score threshold");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  grad->add_option("--config", config_path, "run configuration");
  grad->add_flag("--tiny", tiny, "use the built-in tiny configuration");
  grad->add_option("--params", params, "number of parameters to probe");
  grad->add_option("--eps", eps, "finite-difference step");
  grad->add_flag("--eps-sweep", sweep, "report errors for eps in {1e-4, 1e-5, 1e-6}");
  grad->add_flag("--zero-loss", zero_loss, "zero every loss weight");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) {
      const auto cfg = load_or_default(config_path);
      const auto samples = synthdoc::generate_samples(seed, count, cfg.synth);
      write_dataset(samples, out_dir, cfg.synth.resolved_class_names());
      std::cout << "wrote " << samples.size() << " samples to " << out_dir << "\n";
    } else if (train_cmd->parsed()) {
      TrainOptions opts;
      opts.resume = resume;
      print_summary(train(RunConfig::load(config_path), opts));
    } else if (finetune->parsed()) {
      TrainOptions opts;
      opts.finetune_from = from;
      print_summary(train(RunConfig::load(config_path), opts));
    } else if (eval->parsed()) {
      RunConfig cfg;
      auto model = model_from_checkpoint(ckpt, &cfg);
      const auto samples = read_dataset(data);
      const auto report = evaluate(model, samples, threshold >= 0.0 ? threshold : cfg.score_threshold);
      const auto j = report.to_json(cfg.synth.resolved_class_names());
      std::cout << j.dump(2) << "\n";
      if (!report_path.empty()) {
        std::ofstream out(report_path);
        if (!out) throw IoError(report_path, "cannot open for writing");
        out << j.dump(2) << "\n";
      }
    } else if (predict->parsed()) {
      RunConfig cfg;
      auto model = model_from_checkpoint(ckpt, &cfg);
      const auto r = predict_file(model, image, out_dir, threshold >= 0.0 ? threshold : cfg.score_threshold,
                                  cfg.synth.resolved_class_names());
      std::cout << r.detections.size() << " instances -> " << out_dir << "\n";
    } else if (grad->parsed()) {
      auto cfg = tiny || config_path.empty() ? tiny_gradcheck_config() : RunConfig::load(config_path);
      GradcheckOptions opts;
      opts.num_params = params > 0 ? params : cfg.gradcheck_params;
      opts.eps = eps > 0.0 ? eps : cfg.gradcheck_eps;
      opts.seed = cfg.seed;
      opts.zero_loss = zero_loss;
      if (sweep) {
        nlohmann::json j = nlohmann::json::array();
        for (double e : {1e-4, 1e-5, 1e-6}) {
          opts.eps = e;
          const auto r = gradcheck(cfg, opts);
          j.push_back({{"eps", e}, {"max_rel_error", r.max_rel_error}, {"max_abs_error", r.max_abs_error}});
        }
        std::cout << j.dump(2) << "\n";
      } else {
        std::cout << gradcheck(cfg, opts).to_json().dump(2) << "\n";
      }
    }
  } catch (const std::invalid_argument& e) {  // ConfigError, ShapeError, InputError
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
