#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "docseg/layers.hpp"
#include "docseg/transformer.hpp"

namespace docseg::queryselect {

/// Per-token predictions of the three encoder heads.
struct EncoderHeadOutput {
  torch::Tensor class_logits;  // [N, C]
  torch::Tensor boxes;         // [N, 4] in (0, 1)
  torch::Tensor mask_embed;    // [N, D_m]
  torch::Tensor det_features;  // [N, D] hidden features of the detection head
  torch::Tensor seg_features;  // [N, D] hidden features of the segmentation head
};

/// Grid prior box of every token: its cell centre with a side of
/// 0.05 * 2^level, [N, 4].
torch::Tensor token_prior_boxes(const transformer::LevelLayout& layout, const torch::TensorOptions& options);

class EncoderHeadsImpl : public torch::nn::Module {
 public:
  EncoderHeadsImpl(int dim, int num_classes, int mask_dim);
  EncoderHeadOutput forward(const transformer::TokenSequence& memory);

  torch::nn::Linear class_head{nullptr};
  Mlp box_head{nullptr};
  Mlp mask_head{nullptr};
};
TORCH_MODULE(EncoderHeads);

/// Indices of the K tokens with the largest max-over-classes score, best
/// first; ties go to the lower token index. The score is the class logit,
/// which orders tokens exactly like its sigmoid without saturating.
std::vector<int64_t> select_topk(const torch::Tensor& class_logits, int64_t k);

/// MLP followed by row-wise L2 normalisation.
class ProjectionHeadImpl : public torch::nn::Module {
 public:
  ProjectionHeadImpl(int in_dim, int out_dim, int layers);
  torch::Tensor forward(const torch::Tensor& x);
  Mlp mlp{nullptr};
};
TORCH_MODULE(ProjectionHead);

/// Two-layer head for low-level (fine-grained) embeddings.
ProjectionHead make_low_projection(int in_dim, int out_dim);
/// Four-layer head for high-level embeddings.
ProjectionHead make_high_projection(int in_dim, int out_dim);

/// Embeddings for the low-level objective. Rows are unit-norm.
struct LowEmbeddings {
  torch::Tensor detection;     // [n, D_low]   f_i
  torch::Tensor segmentation;  // [n', D_low]  f_j
  torch::Tensor candidates;    // [k, D_low]   f_c, the classification-ranked set
  double tau = 0.1;
  /// (i, j) pairs that contribute. Empty means every (i, j).
  std::vector<std::pair<int64_t, int64_t>> pairs;
};

struct ContrastiveLoss {
  torch::Tensor sum;   // scalar
  torch::Tensor mean;  // sum / pairs
  int64_t pairs = 0;
};

/// sum over pairs (i, j) of -log( exp(f_i.f_j / tau) / sum_c exp(f_c.f_j / tau) ),
/// log-sum-exp stabilised. Non-negative whenever each f_i is among the
/// candidates. Throws ConfigError for tau <= 0.
ContrastiveLoss loss_low(const LowEmbeddings& emb);

/// sum over features i of -log( exp(f_i.p_a(i) / phi_a(i)) / sum_c exp(f_c.p_a(i) / phi_a(i)) )
/// with the denominator over `candidates` (defaults to `features`).
ContrastiveLoss loss_high(const torch::Tensor& features, const torch::Tensor& prototypes, const torch::Tensor& phi,
                          const std::vector<int64_t>& assignment, const torch::Tensor& candidates = {});

struct ConcentrationParams {
  double alpha = 10.0;
  double phi_floor = 0.05;
  double phi_ceil = 2.0;
};

/// phi_j = sum_{z in A_j} |z - p_j| / (|A_j| log(|A_j| + alpha)), clamped;
/// prototypes without assigned features keep `previous`.
torch::Tensor estimate_concentration(const torch::Tensor& features, const torch::Tensor& prototypes,
                                     const std::vector<int64_t>& assignment, const torch::Tensor& previous,
                                     const ConcentrationParams& params = {});

/// Prototypes p_j with concentrations phi_j, kept as buffers so they are
/// checkpointed with the model. Updated only through update().
class PrototypeBankImpl : public torch::nn::Module {
 public:
  PrototypeBankImpl(int count, int dim, double momentum, ConcentrationParams params = {});

  /// Nearest prototype by cosine similarity for every row.
  std::vector<int64_t> assign(const torch::Tensor& features) const;
  /// EMA update of assigned prototypes (renormalised) and their concentrations.
  void update(const torch::Tensor& features, const std::vector<int64_t>& assignment);

  const torch::Tensor& prototypes() const { return prototypes_; }
  const torch::Tensor& phi() const { return phi_; }
  int64_t size() const { return prototypes_.size(0); }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  ConcentrationParams params_;
  torch::Tensor prototypes_;
  torch::Tensor phi_;
};
TORCH_MODULE(PrototypeBank);

/// Tight box of {p >= threshold} per mask as normalized cx, cy, w, h; an
/// empty mask yields the full image (0.5, 0.5, 1, 1). masks [K, h, w] -> [K, 4].
torch::Tensor init_anchors_from_masks(const torch::Tensor& masks, double threshold);

/// Temperature presets by dataset name.
double tau_preset(const std::string& name);
bool is_tau_preset(const std::string& name);

}  // namespace docseg::queryselect
