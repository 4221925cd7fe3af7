#include "docseg/gradcheck.hpp"

#include <random>

#include "docseg/errors.hpp"
#include "docseg/matchloss.hpp"
#include "docseg/train.hpp"

namespace docseg {

using nlohmann::json;

json GradcheckReport::to_json() const {
  json j;
  j["max_rel_error"] = max_rel_error;
  j["max_abs_error"] = max_abs_error;
  j["loss"] = loss;
  j["terms"] = terms;
  j["skipped_groups"] = skipped_groups;
  j["entries"] = json::array();
  for (const auto& e : entries)
    j["entries"].push_back({{"parameter", e.parameter},
                            {"index", e.index},
                            {"analytic", e.analytic},
                            {"numeric", e.numeric},
                            {"abs_error", e.abs_error},
                            {"rel_error", e.rel_error}});
  return j;
}

RunConfig tiny_gradcheck_config() {
  RunConfig c;
  c.synth.height = 64;
  c.synth.width = 64;
  c.synth.max_instances = 3;
  c.synth.min_side = 12;
  c.model.backbone.embed_dim = 8;
  c.model.backbone.depths = {1, 1, 1, 1};
  c.model.backbone.heads = {1, 1, 2, 2};
  c.model.backbone.window_size = 4;
  c.model.hidden_dim = 16;
  c.model.mask_dim = 8;
  c.model.ffn_dim = 32;
  c.model.attn_heads = 2;
  c.model.num_points = 2;
  c.model.low_dim = 8;
  c.model.prototypes = 4;
  c.model.encoder_layers = 1;
  c.model.decoder_layers = 1;
  c.model.num_queries = 6;
  c.float64 = true;
  return c;
}

const std::vector<std::string>& gradcheck_groups() {
  static const std::vector<std::string> groups{"backbone",  "input_proj", "pos_embed",    "encoder",  "pem",
                                               "enc_heads", "low_proj",   "high_proj",    "decoder",  "instance_map",
                                               "query_embed", "label_embed", "level_embed"};
  return groups;
}

namespace {

struct Evaluation {
  double loss = 0.0;
  std::vector<int64_t> selected;
  std::vector<int64_t> assignment;
  torch::Tensor anchors;
};

bool same_decisions(const Evaluation& a, const Evaluation& b) {
  return a.selected == b.selected && a.assignment == b.assignment && torch::equal(a.anchors, b.anchors);
}

}  // namespace

GradcheckReport gradcheck(const RunConfig& base, const GradcheckOptions& opts) {
  if (opts.num_params < 1) throw ConfigError("gradcheck needs at least one parameter");
  if (!(opts.eps > 0.0)) throw ConfigError("gradcheck eps must be positive");
  RunConfig cfg = base;
  cfg.float64 = opts.float64;
  if (opts.zero_loss) {
    cfg.loss.weights = {0.0, 0.0, 0.0};
    cfg.loss.w_low = cfg.loss.w_high = 0.0;
  }
  cfg.validate();
  const auto dtype = cfg.float64 ? torch::kFloat64 : torch::kFloat32;
  const auto sample = synthdoc::generate_sample(cfg.synth_seed, cfg.synth);
  const auto image = sample.image.to(dtype);
  const auto targets = matchloss::make_targets(sample.instances, image.size(1) / 4, image.size(2) / 4, dtype);
  auto model = build_model(cfg);
  model->train();
  if (opts.jitter > 0.0) {
    torch::NoGradGuard guard;
    for (auto& p : model->parameters()) p.add_(torch::randn_like(p) * opts.jitter);
  }

  const uint64_t cdn_seed = opts.seed ^ 0x9e3779b97f4a7c15ull;
  auto run = [&](bool backward, GradcheckReport* report) {
    std::mt19937_64 rng(cdn_seed);
    auto out = model->forward(image, transformer::Mode::train, &sample.instances, &rng);
    auto loss = matchloss::total_loss(out, targets, cfg.loss);
    Evaluation e{loss.total.item<double>(), out.selected, out.prototype_assignment, out.initial_anchors.clone()};
    if (report) {
      report->loss = e.loss;
      for (const auto& [k, v] : loss.terms) report->terms[k] = v.item<double>();
    }
    if (backward) loss.total.backward();
    return e;
  };

  GradcheckReport report;
  model->zero_grad();
  const auto reference = run(true, &report);

  std::map<std::string, std::vector<std::pair<std::string, torch::Tensor>>> by_group;
  double global_max = 0.0;
  for (auto& p : model->named_parameters()) {
    const auto group = p.key().substr(0, p.key().find('.'));
    by_group[group].emplace_back(p.key(), p.value());
    if (p.value().grad().defined()) global_max = std::max(global_max, p.value().grad().abs().max().item<double>());
  }
  const double floor = opts.zero_loss ? -1.0 : 1e-5 * global_max;

  std::mt19937_64 pick(opts.seed);
  std::vector<std::string> groups;
  for (const auto& g : gradcheck_groups())
    if (by_group.count(g)) groups.push_back(g);

  torch::NoGradGuard guard;
  int drawn = 0;
  for (size_t round = 0; drawn < opts.num_params && round < groups.size() * static_cast<size_t>(opts.num_params);
       ++round) {
    const auto& group = groups[round % groups.size()];
    std::vector<std::pair<size_t, int64_t>> candidates;  // (param slot, flat index)
    const auto& params = by_group[group];
    for (size_t k = 0; k < params.size(); ++k) {
      const auto& g = params[k].second.grad();
      auto flat = g.defined() ? g.reshape({-1}) : torch::zeros({params[k].second.numel()}, params[k].second.options());
      auto ok = (flat.abs() > floor).nonzero().reshape({-1});
      auto acc = ok.accessor<int64_t, 1>();
      for (int64_t i = 0; i < ok.size(0); ++i) candidates.emplace_back(k, acc[i]);
    }
    if (candidates.empty()) {
      if (std::find(report.skipped_groups.begin(), report.skipped_groups.end(), group) == report.skipped_groups.end())
        report.skipped_groups.push_back(group);
      continue;
    }
    for (int attempt = 0; attempt < 8; ++attempt) {
      const auto [slot, index] = candidates[std::uniform_int_distribution<size_t>(0, candidates.size() - 1)(pick)];
      auto param = params[slot].second;
      auto flat = param.view({-1});
      const double original = flat[index].item<double>();
      flat[index] = original + opts.eps;
      const auto plus = run(false, nullptr);
      flat[index] = original - opts.eps;
      const auto minus = run(false, nullptr);
      flat[index] = original;
      if (!same_decisions(plus, reference) || !same_decisions(minus, reference)) continue;
      GradcheckEntry e;
      e.parameter = params[slot].first;
      e.index = index;
      const auto& grad = param.grad();
      e.analytic = grad.defined() ? grad.view({-1})[index].item<double>() : 0.0;
      e.numeric = (plus.loss - minus.loss) / (2.0 * opts.eps);
      e.abs_error = std::abs(e.analytic - e.numeric);
      const double scale = std::max(std::abs(e.analytic), std::abs(e.numeric));
      e.rel_error = scale == 0.0 ? 0.0 : e.abs_error / scale;
      report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      report.max_abs_error = std::max(report.max_abs_error, e.abs_error);
      report.entries.push_back(e);
      ++drawn;
      break;
    }
  }
  if (drawn < opts.num_params)
    throw TrainingError("gradcheck found only " + std::to_string(drawn) + " usable parameters");
  return report;
}

}  // namespace docseg
