#include "docseg/model.hpp"

#include "docseg/errors.hpp"

namespace docseg {

std::vector<int> ModelConfig::encoder_strides() const {
  std::vector<int> strides;
  for (int s = 1; s < backbone.num_stages(); ++s) strides.push_back(backbone.stride(s));
  return strides;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (backbone.num_stages() < 2) throw ConfigError("model: the backbone needs at least two stages");
  if (backbone.stride(0) != 4 || backbone.stride(1) != 8)
    throw ConfigError("model: the first two pyramid levels must sit at strides 4 and 8");
  if (num_classes < 1) throw ConfigError("model: num_classes must be positive");
  if (hidden_dim < 2 || hidden_dim % 2 != 0) throw ConfigError("model: hidden_dim must be even");
  if (hidden_dim % attn_heads != 0) throw ConfigError("model: attention heads must divide hidden_dim");
  if (mask_dim < 1 || ffn_dim < 1 || low_dim < 1) throw ConfigError("model: dims must be positive");
  if (encoder_layers < 0 || decoder_layers < 1) throw ConfigError("model: need >= 0 encoder and >= 1 decoder layers");
  if (num_queries < 1) throw ConfigError("model: num_queries must be positive");
  if (num_points < 1) throw ConfigError("model: num_points must be positive");
  if (prototypes < 1) throw ConfigError("model: prototypes must be positive");
  if (!(tau > 0.0)) throw ConfigError("model: contrastive tau must be positive");
  if (!(anchor_threshold > 0.0 && anchor_threshold < 1.0)) throw ConfigError("model: anchor threshold in (0, 1)");
  cdn.validate();
}

segbranch::InstancePrediction ModelOutput::final_matching() const {
  const auto& last = layers.back();
  return last.slice(num_cdn, last.size());
}

DocSegmenterImpl::DocSegmenterImpl(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int D = cfg_.hidden_dim;
  const auto strides = cfg_.encoder_strides();
  const int levels = static_cast<int>(strides.size());

  backbone = register_module("backbone", backbone::SwinBackbone(cfg_.backbone));
  for (int l = 0; l < levels; ++l)
    input_proj.push_back(register_module(
        "input_proj" + std::to_string(l),
        torch::nn::Conv2d(torch::nn::Conv2dOptions(cfg_.backbone.channels(l + 1), D, 1))));
  pos_embed = register_module("pos_embed", transformer::PositionalEmbedding(D, D));
  level_embed = register_parameter("level_embed", torch::randn({levels, D}) * 0.02);
  encoder = register_module("encoder", transformer::Encoder(cfg_.encoder_layers, D, cfg_.attn_heads, levels,
                                                            cfg_.num_points, cfg_.ffn_dim));
  pem = register_module("pem", segbranch::PixelEmbedding(cfg_.backbone.channels(0), D, cfg_.mask_dim));
  enc_heads = register_module("enc_heads", queryselect::EncoderHeads(D, cfg_.num_classes, cfg_.mask_dim));
  low_proj = register_module("low_proj", queryselect::make_low_projection(D, cfg_.low_dim));
  high_proj = register_module("high_proj", queryselect::make_high_projection(cfg_.mask_dim, cfg_.mask_dim));
  bank = register_module("bank", queryselect::PrototypeBank(cfg_.prototypes, cfg_.mask_dim, cfg_.prototype_momentum,
                                                            cfg_.concentration));
  query_embed = register_module("query_embed", torch::nn::Embedding(cfg_.num_queries, D));
  label_embed = register_module("label_embed", torch::nn::Embedding(cfg_.num_classes, D));
  decoder = register_module("decoder", transformer::Decoder(cfg_.decoder_layers, D, cfg_.attn_heads, levels,
                                                            cfg_.num_points, cfg_.ffn_dim, cfg_.look_forward_twice));
  instance_map = register_module("instance_map", segbranch::ClassInstanceMap(D, cfg_.num_classes, cfg_.mask_dim));
}

ModelOutput DocSegmenterImpl::forward(const torch::Tensor& image, transformer::Mode mode,
                                      const std::vector<synthdoc::Instance>* gt, std::mt19937_64* rng) {
  using transformer::QuerySet;
  decoder->set_look_forward_twice(cfg_.look_forward_twice);
  const auto pyramid = backbone(image);
  const auto strides = cfg_.encoder_strides();

  transformer::TokenSequence seq;
  std::vector<torch::Tensor> tokens, positions;
  for (size_t l = 0; l < strides.size(); ++l) {
    auto x = input_proj[l](pyramid.at(strides[l]).unsqueeze(0)).squeeze(0);  // [D, h, w]
    auto pos = pos_embed(x) + level_embed[static_cast<int64_t>(l)].view({-1, 1, 1});
    seq.layout.shapes.emplace_back(x.size(1), x.size(2));
    seq.layout.level_ids.push_back(static_cast<int>(l));
    tokens.push_back(x.flatten(1).t());
    positions.push_back(pos.flatten(1).t());
  }
  seq.tokens = torch::cat(tokens, 0);
  seq.positions = torch::cat(positions, 0);
  const auto memory = encoder(seq);

  ModelOutput out;
  out.pem = pem(pyramid.at(4), memory.level_map(0));

  // Query selection over encoder tokens.
  const auto heads = enc_heads(memory);
  const int64_t K = std::min<int64_t>(cfg_.num_queries, memory.size());
  out.selected = queryselect::select_topk(heads.class_logits, K);
  auto sel = torch::tensor(out.selected, torch::kLong);
  auto mask_embed = heads.mask_embed.index_select(0, sel);
  auto high = high_proj(mask_embed);
  out.high_features = high;
  out.encoder.class_logits = heads.class_logits.index_select(0, sel);
  out.encoder.boxes = heads.boxes.index_select(0, sel);
  out.encoder.mask_logits = segbranch::predict_masks(cfg_.use_high_projection ? high : mask_embed, out.pem);

  out.low.detection = low_proj(heads.det_features.index_select(0, sel));
  out.low.segmentation = low_proj(heads.seg_features.index_select(0, sel));
  out.low.candidates = out.low.detection;
  out.low.tau = cfg_.tau;
  for (int64_t t = 0; t < K; ++t) out.low.pairs.emplace_back(t, t);

  out.prototype_assignment = bank->assign(high);
  out.prototypes = bank->prototypes().detach().clone();
  out.phi = bank->phi().detach().clone();

  // Anchors come from the encoder-stage masks, content queries are learned.
  out.initial_anchors =
      queryselect::init_anchors_from_masks(torch::sigmoid(out.encoder.mask_logits.detach()), cfg_.anchor_threshold)
          .clamp(1e-4, 1.0 - 1e-4)
          .to(image.scalar_type());
  auto content = query_embed->weight.slice(0, 0, K);
  if (cfg_.content_from_tokens) content = content + memory.tokens.index_select(0, sel).detach();
  out.initial_content = content;
  QuerySet queries = QuerySet::matching(content, out.initial_anchors);

  if (mode == transformer::Mode::train && gt && rng && cfg_.cdn.enabled && !gt->empty()) {
    out.cdn = transformer::build_cdn_groups(*gt, cfg_.cdn, cfg_.num_classes, *rng);
    QuerySet cdn;
    std::vector<int64_t> labels(out.cdn.input_labels.begin(), out.cdn.input_labels.end());
    cdn.content = label_embed(torch::tensor(labels, torch::kLong));
    cdn.anchors = out.cdn.anchors.to(image.scalar_type());
    cdn.cdn_group = out.cdn.group;
    cdn.polarity = out.cdn.polarity;
    queries = QuerySet::concat(cdn, queries);
    out.num_cdn = out.cdn.size();
  }

  out.decoder = decoder(queries, memory, mode);
  for (const auto& layer : out.decoder) out.layers.push_back(instance_map(layer.embeddings, layer.anchors, out.pem));
  return out;
}

}  // namespace docseg
