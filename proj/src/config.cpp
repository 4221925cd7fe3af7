#include "docseg/config.hpp"

#include <fstream>
#include <functional>

#include "docseg/errors.hpp"

namespace docseg {

using nlohmann::json;

matchloss::DomainShiftSchedule ScheduleConfig::resolve(double w_mask, int64_t steps) const {
  matchloss::DomainShiftSchedule s;
  s.w_start = w_start < 0.0 ? 3.0 * w_mask : w_start;
  s.w_end = w_end < 0.0 ? w_mask : w_end;
  s.total_steps = std::max<int64_t>(1, static_cast<int64_t>(std::llround(fraction * static_cast<double>(steps))));
  s.shape = shape;
  s.validate();
  return s;
}

namespace {

struct Field {
  std::string key;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T, typename Member>
Field field(std::string key, Member member) {
  return {std::move(key), [member](RunConfig& c, const json& v) { member(c) = v.get<T>(); },
          [member](const RunConfig& c) { return json(member(const_cast<RunConfig&>(c))); }};
}

#define DOCSEG_FIELD(T, key, expr) field<T>(key, [](RunConfig& c) -> T& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        {"dataset.preset",
         [](RunConfig& c, const json& v) {
           c.preset = v.get<std::string>();
           if (!queryselect::is_tau_preset(c.preset)) throw ConfigError("unknown dataset preset '" + c.preset + "'");
           c.model.tau = queryselect::tau_preset(c.preset);
         },
         [](const RunConfig& c) { return json(c.preset); }},
        DOCSEG_FIELD(std::string, "dataset.path", c.dataset_path),
        DOCSEG_FIELD(int, "dataset.synth_count", c.synth_count),
        DOCSEG_FIELD(uint64_t, "dataset.seed", c.synth_seed),
        DOCSEG_FIELD(int, "dataset.height", c.synth.height),
        DOCSEG_FIELD(int, "dataset.width", c.synth.width),
        {"dataset.num_classes",
         [](RunConfig& c, const json& v) { c.synth.num_classes = c.model.num_classes = v.get<int>(); },
         [](const RunConfig& c) { return json(c.model.num_classes); }},
        DOCSEG_FIELD(int, "dataset.max_instances", c.synth.max_instances),
        DOCSEG_FIELD(double, "dataset.max_overlap_iou", c.synth.max_overlap_iou),
        DOCSEG_FIELD(int, "dataset.min_side", c.synth.min_side),
        DOCSEG_FIELD(std::vector<std::string>, "dataset.class_names", c.synth.class_names),
        DOCSEG_FIELD(int, "backbone.embed_dim", c.model.backbone.embed_dim),
        DOCSEG_FIELD(std::vector<int>, "backbone.depths", c.model.backbone.depths),
        DOCSEG_FIELD(std::vector<int>, "backbone.heads", c.model.backbone.heads),
        DOCSEG_FIELD(int, "backbone.window", c.model.backbone.window_size),
        DOCSEG_FIELD(double, "backbone.mlp_ratio", c.model.backbone.mlp_ratio),
        DOCSEG_FIELD(bool, "backbone.relative_position_bias", c.model.backbone.relative_position_bias),
        DOCSEG_FIELD(bool, "backbone.shifted_windows", c.model.backbone.shifted_windows),
        DOCSEG_FIELD(int, "model.dim", c.model.hidden_dim),
        DOCSEG_FIELD(int, "model.mask_dim", c.model.mask_dim),
        DOCSEG_FIELD(int, "model.ffn_dim", c.model.ffn_dim),
        DOCSEG_FIELD(int, "model.heads", c.model.attn_heads),
        DOCSEG_FIELD(int, "model.points", c.model.num_points),
        DOCSEG_FIELD(int, "model.low_dim", c.model.low_dim),
        DOCSEG_FIELD(double, "model.anchor_threshold", c.model.anchor_threshold),
        DOCSEG_FIELD(bool, "model.high_projection", c.model.use_high_projection),
        DOCSEG_FIELD(int, "encoder.layers", c.model.encoder_layers),
        DOCSEG_FIELD(int, "decoder.layers", c.model.decoder_layers),
        DOCSEG_FIELD(int, "decoder.queries", c.model.num_queries),
        DOCSEG_FIELD(bool, "decoder.look_forward_twice", c.model.look_forward_twice),
        DOCSEG_FIELD(bool, "decoder.content_from_tokens", c.model.content_from_tokens),
        DOCSEG_FIELD(double, "cdn.lambda_p", c.model.cdn.lambda_p),
        DOCSEG_FIELD(double, "cdn.lambda_e", c.model.cdn.lambda_e),
        DOCSEG_FIELD(int, "cdn.groups", c.model.cdn.num_groups),
        DOCSEG_FIELD(double, "cdn.label_flip_prob", c.model.cdn.label_flip_prob),
        DOCSEG_FIELD(bool, "cdn.enabled", c.model.cdn.enabled),
        {"contrastive.tau",
         [](RunConfig& c, const json& v) {
           if (v.is_string()) {
             const auto name = v.get<std::string>();
             if (!queryselect::is_tau_preset(name)) throw ConfigError("unknown tau preset '" + name + "'");
             c.model.tau = queryselect::tau_preset(name);
           } else {
             c.model.tau = v.get<double>();
           }
         },
         [](const RunConfig& c) { return json(c.model.tau); }},
        DOCSEG_FIELD(double, "contrastive.w_low", c.loss.w_low),
        DOCSEG_FIELD(double, "contrastive.w_high", c.loss.w_high),
        DOCSEG_FIELD(int, "prototypes.m", c.model.prototypes),
        DOCSEG_FIELD(double, "prototypes.momentum", c.model.prototype_momentum),
        DOCSEG_FIELD(double, "prototypes.alpha", c.model.concentration.alpha),
        DOCSEG_FIELD(double, "prototypes.phi_floor", c.model.concentration.phi_floor),
        DOCSEG_FIELD(double, "prototypes.phi_ceil", c.model.concentration.phi_ceil),
        DOCSEG_FIELD(double, "weights.cls", c.loss.weights.w_cls),
        DOCSEG_FIELD(double, "weights.l1", c.loss.weights.w_l1),
        DOCSEG_FIELD(double, "weights.mask", c.loss.weights.w_mask),
        DOCSEG_FIELD(bool, "weights.encoder_stage", c.loss.encoder_stage),
        DOCSEG_FIELD(double, "loss.focal_alpha", c.loss.focal_alpha),
        DOCSEG_FIELD(double, "loss.focal_gamma", c.loss.focal_gamma),
        DOCSEG_FIELD(double, "loss.background_weight", c.loss.background_weight),
        DOCSEG_FIELD(double, "optimizer.lr", c.lr),
        DOCSEG_FIELD(int64_t, "optimizer.steps", c.steps),
        DOCSEG_FIELD(int, "optimizer.batch", c.batch),
        DOCSEG_FIELD(uint64_t, "optimizer.seed", c.seed),
        DOCSEG_FIELD(double, "optimizer.grad_clip", c.grad_clip),
        DOCSEG_FIELD(double, "optimizer.lr_final_fraction", c.lr_final_fraction),
        DOCSEG_FIELD(double, "schedule.w_start", c.schedule.w_start),
        DOCSEG_FIELD(double, "schedule.w_end", c.schedule.w_end),
        DOCSEG_FIELD(double, "schedule.fraction", c.schedule.fraction),
        {"schedule.shape",
         [](RunConfig& c, const json& v) {
           const auto s = v.get<std::string>();
           if (s == "cosine") c.schedule.shape = matchloss::DomainShiftSchedule::Shape::cosine;
           else if (s == "linear") c.schedule.shape = matchloss::DomainShiftSchedule::Shape::linear;
           else throw ConfigError("schedule.shape must be cosine or linear");
         },
         [](const RunConfig& c) {
           return json(c.schedule.shape == matchloss::DomainShiftSchedule::Shape::cosine ? "cosine" : "linear");
         }},
        DOCSEG_FIELD(std::string, "train.out_dir", c.out_dir),
        DOCSEG_FIELD(int64_t, "train.checkpoint_every", c.checkpoint_every),
        DOCSEG_FIELD(bool, "train.float64", c.float64),
        DOCSEG_FIELD(double, "eval.score_threshold", c.score_threshold),
        DOCSEG_FIELD(int, "gradcheck.params", c.gradcheck_params),
        DOCSEG_FIELD(double, "gradcheck.eps", c.gradcheck_eps),
    };
    return f;
  }();
  return table;
}

#undef DOCSEG_FIELD

void flatten_into(const json& j, const std::string& prefix, json& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it.value().is_object()) flatten_into(it.value(), key, out);
    else out[key] = it.value();
  }
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

json flatten_config(const json& j) {
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  json out = json::object();
  flatten_into(j, "", out);
  return out;
}

void RunConfig::validate() const {
  if (!queryselect::is_tau_preset(preset)) throw ConfigError("unknown dataset preset '" + preset + "'");
  synth.validate();
  model.validate();
  loss.validate();
  if (synth.num_classes != model.num_classes) throw ConfigError("dataset and model class counts differ");
  const int multiple = model.backbone.input_multiple();
  if (synth.height % multiple != 0 || synth.width % multiple != 0)
    throw ConfigError("image sides must be multiples of " + std::to_string(multiple));
  if (synth_count < 1) throw ConfigError("dataset.synth_count must be positive");
  if (!(lr > 0.0)) throw ConfigError("optimizer.lr must be positive");
  if (steps < 1) throw ConfigError("optimizer.steps must be positive");
  if (batch < 1) throw ConfigError("optimizer.batch must be positive");
  if (!(lr_final_fraction >= 0.0 && lr_final_fraction <= 1.0))
    throw ConfigError("optimizer.lr_final_fraction must be in [0, 1]");
  if (!(grad_clip >= 0.0)) throw ConfigError("optimizer.grad_clip must be >= 0 (0 disables)");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (!(schedule.fraction > 0.0 && schedule.fraction <= 1.0)) throw ConfigError("schedule.fraction must lie in (0, 1]");
  if (schedule.w_start >= 0.0 && schedule.w_end >= 0.0 && schedule.w_start < schedule.w_end)
    throw ConfigError("schedule needs w_start >= w_end");
  if (!(score_threshold >= 0.0)) throw ConfigError("eval.score_threshold must be >= 0");
  if (gradcheck_params < 1) throw ConfigError("gradcheck.params must be positive");
  if (!(gradcheck_eps > 0.0)) throw ConfigError("gradcheck.eps must be positive");
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

RunConfig RunConfig::from_json(const json& doc) {
  const auto flat = flatten_config(doc);
  for (auto it = flat.begin(); it != flat.end(); ++it) {
    bool known = false;
    for (const auto& f : fields()) known = known || f.key == it.key();
    if (!known) throw ConfigError("unknown configuration key '" + it.key() + "'");
  }
  RunConfig c;
  // Table order: the preset is applied before an explicit contrastive.tau.
  for (const auto& f : fields()) {
    if (!flat.contains(f.key)) continue;
    try {
      f.set(c, flat.at(f.key));
    } catch (const json::exception& e) {
      throw ConfigError("configuration key '" + f.key + "': " + e.what());
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open configuration");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return from_json(j);
}

}  // namespace docseg
