#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "docseg/model.hpp"
#include "docseg/segbranch.hpp"
#include "docseg/synthdoc.hpp"

namespace docseg::matchloss {

struct CostWeights {
  double w_cls = 2.0;
  double w_l1 = 5.0;
  double w_mask = 5.0;  // scales dice and BCE alike

  bool hybrid() const { return w_mask > 0.0; }
  void validate() const;
};

struct MatchResult {
  std::vector<std::pair<int64_t, int64_t>> pairs;  // (query, gt), ascending gt
  std::vector<int64_t> unmatched_queries;
  double total_cost = 0.0;
  std::map<std::string, double> per_term;  // weighted cls / l1 / mask sums over pairs
};

struct DomainShiftSchedule {
  enum class Shape { cosine, linear };
  double w_start = 15.0;
  double w_end = 5.0;
  int64_t total_steps = 1;
  Shape shape = Shape::cosine;

  void validate() const;
};

enum class ClassScoring {
  softmax,  // [Q, C + 1] logits, last column background
  sigmoid,  // [Q, C] logits, background is all-negative
};

/// Ground truth at mask-logit resolution.
struct GtTargets {
  torch::Tensor classes;  // long [q]
  torch::Tensor boxes;    // [q, 4]
  torch::Tensor masks;    // [q, h, w] soft coverage in [0, 1]

  int64_t size() const { return classes.size(0); }
};

/// Masks are average-pooled to (mask_h, mask_w); the image size must be an
/// integer multiple of it.
GtTargets make_targets(const std::vector<synthdoc::Instance>& gt, int64_t mask_h, int64_t mask_w,
                       torch::ScalarType dtype = torch::kFloat32);

/// -alpha (1 - p_t)^gamma log p_t averaged over rows. Long targets [Q] select
/// the softmax form; floating one-hot targets [Q, C] select the sigmoid form,
/// which weighs positives by alpha, negatives by 1 - alpha and sums over
/// classes before averaging. In the softmax form rows targeting the last
/// (background) column count `background_weight` times and the average is
/// taken over the row weights.
torch::Tensor focal_loss(const torch::Tensor& logits, const torch::Tensor& targets, double alpha = 0.25,
                         double gamma = 2.0, double background_weight = 1.0);
torch::Tensor l1_box_loss(const torch::Tensor& pred, const torch::Tensor& gt);
/// 1 - (2 sum(p y) + 1) / (sum p + sum y + 1) per mask, averaged over masks.
torch::Tensor dice_loss(const torch::Tensor& prob, const torch::Tensor& gt);
torch::Tensor mask_bce(const torch::Tensor& logits, const torch::Tensor& gt);

struct CostTerms {
  torch::Tensor cls;   // [Q, q] focal-style, unweighted
  torch::Tensor l1;    // [Q, q]
  torch::Tensor mask;  // [Q, q] dice + BCE
};

CostTerms cost_terms(const segbranch::InstancePrediction& pred, const GtTargets& gt, ClassScoring scoring,
                     double alpha = 0.25, double gamma = 2.0);
torch::Tensor cost_matrix(const segbranch::InstancePrediction& pred, const GtTargets& gt, const CostWeights& w,
                          ClassScoring scoring = ClassScoring::softmax);

/// Minimum-cost injective assignment of cost [Q, q]. Among optimal
/// assignments the one smallest in lexicographic (gt, query) order wins.
MatchResult hungarian(const torch::Tensor& cost);
MatchResult hungarian(const std::vector<std::vector<double>>& cost);

MatchResult match(const segbranch::InstancePrediction& pred, const GtTargets& gt, const CostWeights& w,
                  ClassScoring scoring = ClassScoring::softmax);

/// Interpolates w_start -> w_end; steps outside [0, total] are clamped with a warning.
double hybrid_weight(int64_t step, const DomainShiftSchedule& sched);

struct LossConfig {
  CostWeights weights;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  /// Relative weight of matching rows assigned to background.
  double background_weight = 0.1;
  double w_low = 1.0;
  double w_high = 1.0;
  bool encoder_stage = true;

  void validate() const;
};

inline const std::vector<std::string>& loss_term_names() {
  static const std::vector<std::string> names{"cls",    "l1",     "mask_dice", "mask_bce",
                                              "cdn_pos", "cdn_neg", "low_con",  "high_con"};
  return names;
}

struct LossBreakdown {
  torch::Tensor total;
  std::map<std::string, torch::Tensor> terms;
  double w_mask_eff = 0.0;

  double value(const std::string& term) const { return terms.at(term).item<double>(); }
};

/// Weighted sum over every decoder layer and the encoder stage, plus the
/// denoising and contrastive terms. `w_mask_eff` replaces weights.w_mask in
/// both the matching cost and the mask losses. Throws TrainingError naming
/// the first non-finite term.
LossBreakdown total_loss(const ModelOutput& out, const GtTargets& gt, const LossConfig& cfg, double w_mask_eff);
LossBreakdown total_loss(const ModelOutput& out, const GtTargets& gt, const LossConfig& cfg);

}  // namespace docseg::matchloss
