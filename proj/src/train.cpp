#include "docseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "docseg/checkpoint.hpp"
#include "docseg/dataset.hpp"
#include "docseg/errors.hpp"
#include "docseg/log.hpp"
#include "docseg/matchloss.hpp"

namespace docseg {

namespace fs = std::filesystem;
using nlohmann::json;

json StepRecord::to_json() const {
  json j;
  j["step"] = step;
  j["total"] = total;
  for (const auto& [k, v] : terms) j[k] = v;
  j["w_mask_eff"] = w_mask_eff;
  return j;
}

std::vector<synthdoc::LayoutSample> load_samples(const RunConfig& cfg) {
  if (cfg.dataset_path.empty()) return synthdoc::generate_samples(cfg.synth_seed, cfg.synth_count, cfg.synth);
  return read_dataset(cfg.dataset_path);
}

std::vector<int64_t> batch_indices(uint64_t seed, int64_t step, int batch, int64_t num_samples) {
  std::vector<int64_t> out;
  std::vector<int64_t> order;
  int64_t cached_epoch = -1;
  for (int b = 0; b < batch; ++b) {
    const int64_t flat = step * batch + b;
    const int64_t epoch = flat / num_samples;
    if (epoch != cached_epoch) {
      order.resize(static_cast<size_t>(num_samples));
      std::iota(order.begin(), order.end(), 0);
      std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch),
                        static_cast<uint32_t>(epoch >> 32), 0x5eedu};
      std::mt19937_64 rng(seq);
      std::shuffle(order.begin(), order.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(order[static_cast<size_t>(flat % num_samples)]);
  }
  return out;
}

DocSegmenter build_model(const RunConfig& cfg) {
  torch::manual_seed(cfg.seed);
  DocSegmenter model(cfg.model);
  if (cfg.float64) model->to(torch::kFloat64);
  return model;
}

double learning_rate(const RunConfig& cfg, int64_t step) {
  if (cfg.lr_final_fraction == 1.0 || cfg.steps <= 1) return cfg.lr;
  const double t = static_cast<double>(std::min(step, cfg.steps - 1)) / static_cast<double>(cfg.steps - 1);
  return cfg.lr * (cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

namespace {

std::mt19937_64 step_rng(uint64_t seed, int64_t step) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(step),
                    static_cast<uint32_t>(step >> 32), 0xcd17u};
  return std::mt19937_64(seq);
}

std::string checkpoint_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step_%06lld.ckpt", static_cast<long long>(step));
  return buf;
}

}  // namespace

TrainResult train(const RunConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  const auto samples = opts.samples.empty() ? load_samples(cfg) : opts.samples;
  if (samples.empty()) throw InputError("training set is empty");
  const auto dtype = cfg.float64 ? torch::kFloat64 : torch::kFloat32;
  for (const auto& s : samples) {
    for (const auto& inst : s.instances)
      if (inst.class_id >= cfg.model.num_classes)
        throw ConfigError("sample " + std::to_string(s.sample_id) + " has class " + std::to_string(inst.class_id) +
                          " beyond model num_classes");
    const int m = cfg.model.backbone.input_multiple();
    if (s.image.size(1) % m != 0 || s.image.size(2) % m != 0)
      throw InputError("sample " + std::to_string(s.sample_id) + " size is not a multiple of " + std::to_string(m));
  }

  auto model = build_model(cfg);
  torch::optim::Adam optimizer(model->parameters(), torch::optim::AdamOptions(cfg.lr));
  int64_t start = 0;
  if (!opts.resume.empty()) {
    const auto ck = read_checkpoint(opts.resume);
    load_model_state(model, ck);
    load_optimizer_state(optimizer, model, ck);
    start = ck.step;
    log::info("resumed from " + opts.resume + " at step " + std::to_string(start));
  } else if (!opts.finetune_from.empty()) {
    const auto ck = read_checkpoint(opts.finetune_from);
    load_model_state(model, ck);
    log::info("fine-tuning from " + opts.finetune_from + " (preset " + ck.preset + " -> " + cfg.preset + ")");
  }
  const bool scheduled = !opts.finetune_from.empty();
  const auto schedule = cfg.schedule.resolve(cfg.loss.weights.w_mask, cfg.steps);

  std::vector<matchloss::GtTargets> targets;
  std::vector<torch::Tensor> images;
  for (const auto& s : samples) {
    images.push_back(s.image.to(dtype));
    targets.push_back(matchloss::make_targets(s.instances, s.image.size(1) / 4, s.image.size(2) / 4, dtype));
  }

  std::ofstream log_file;
  std::ostream* log_out = opts.log;
  if (!log_out) {
    fs::create_directories(cfg.out_dir);
    const auto path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    log_file.open(path, start > 0 ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError(path, "cannot open metrics log");
    log_out = &log_file;
  }

  TrainResult result;
  std::string last_good = "none";
  model->train();
  for (int64_t step = start; step < cfg.steps; ++step) {
    const double w_mask_eff = scheduled ? matchloss::hybrid_weight(std::min(step, schedule.total_steps), schedule)
                                        : cfg.loss.weights.w_mask;
    auto rng = step_rng(cfg.seed, step);
    const auto batch = batch_indices(cfg.seed, step, cfg.batch, static_cast<int64_t>(samples.size()));

    for (auto& group : optimizer.param_groups())
      static_cast<torch::optim::AdamOptions&>(group.options()).lr(learning_rate(cfg, step));
    optimizer.zero_grad();
    torch::Tensor total = torch::zeros({}, torch::TensorOptions().dtype(dtype));
    StepRecord rec;
    rec.step = step;
    rec.w_mask_eff = w_mask_eff;
    std::vector<std::pair<torch::Tensor, std::vector<int64_t>>> bank_updates;
    try {
      for (auto idx : batch) {
        const auto& s = samples[static_cast<size_t>(idx)];
        auto out = model->forward(images[static_cast<size_t>(idx)], transformer::Mode::train, &s.instances, &rng);
        auto loss = matchloss::total_loss(out, targets[static_cast<size_t>(idx)], cfg.loss, w_mask_eff);
        total = total + loss.total / static_cast<double>(batch.size());
        for (const auto& [k, v] : loss.terms) rec.terms[k] += v.item<double>() / static_cast<double>(batch.size());
        bank_updates.emplace_back(out.high_features.detach(), out.prototype_assignment);
      }
    } catch (const TrainingError& e) {
      throw TrainingError(std::string(e.what()) + " at step " + std::to_string(step) +
                          "; last good checkpoint: " + last_good);
    }
    rec.total = total.item<double>();
    if (!std::isfinite(rec.total))
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " + last_good);
    total.backward();
    if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(model->parameters(), cfg.grad_clip);
    optimizer.step();
    {
      torch::NoGradGuard guard;
      for (const auto& [features, assignment] : bank_updates) model->bank->update(features, assignment);
    }

    *log_out << rec.to_json().dump() << "\n";
    log_out->flush();
    if (opts.on_step) opts.on_step(rec);
    result.history.push_back(rec);

    const int64_t done = step + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps) {
      const auto path = (fs::path(cfg.out_dir) / checkpoint_name(done)).string();
      save_checkpoint(path, model, &optimizer, cfg, done);
      last_good = path;
      log::info("step " + std::to_string(done) + " loss " + std::to_string(rec.total) + " -> " + path);
    }
  }

  result.final_checkpoint = (fs::path(cfg.out_dir) / "final.ckpt").string();
  save_checkpoint(result.final_checkpoint, model, &optimizer, cfg, std::max(start, cfg.steps));
  if (!result.history.empty()) {
    result.initial_loss = result.history.front().total;
    result.final_loss = result.history.back().total;
  }
  return result;
}

}  // namespace docseg
