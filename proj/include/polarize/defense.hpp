#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polarize/augmented.hpp"
#include "polarize/evalkit.hpp"
#include "polarize/nn.hpp"
#include "polarize/perturb.hpp"

namespace polarize {

/// Probabilities are clipped to [kProbClip, 1-kProbClip] inside logs so the
/// losses stay finite at the softmax boundary.
inline constexpr double kProbClip = 1e-8;

std::vector<double> softmax(std::span<const double> logits);

/// -log(1 - s_T): penalizes confidence in the (estimated) attack target at
/// the perturbed point.
double loss_asr(std::span<const double> probs, int64_t target);

/// -log(s_y) - log(1 - max_{k != y} s_k): boosted cross-entropy pulling the
/// perturbed sample back to its true label.
double loss_bce(std::span<const double> probs, int64_t y);

/// Plain softmax cross-entropy on clean logits.
double loss_bn(std::span<const double> logits, int64_t y);

struct LossWeights {
  double lambda1 = 1.0;  // clean CE
  double lambda2 = 0.4;  // loss_asr
  double lambda3 = 0.4;  // loss_bce
};

/// Term switches for the loss-component ablation study.
struct LossFlags {
  bool use_bce1 = true;
  bool use_bce2 = true;
  bool use_asr = true;
};

struct OuterLossTerms {
  double bn = 0, asr = 0, bce = 0, total = 0;
};

/// Batch mean of lambda1*L_bn(x,y) + lambda2*L_asr(x+delta,y') +
/// lambda3*L_bce(x+delta,y), evaluated in inference mode (no state change).
/// `deltas` has either batch size or a single shared sample.
OuterLossTerms outer_loss(const AugmentedModel& model, const Tensor& x,
                          std::span<const int64_t> labels, const Tensor& deltas,
                          std::span<const int64_t> surrogate_targets,
                          const LossWeights& weights, const LossFlags& flags = {});

/// One outer-minimization step's loss terms and polarizer parameter
/// gradients on a batch (no optimizer update): clean pass weighted by
/// lambda1, perturbed pass by lambda2/lambda3. Gradients accumulate into the
/// polarizer's grad buffers. With `surrogate_targets_from_perturbed`,
/// `targets` is ignored and L_asr scores each sample against the surrogate
/// target of its perturbed logits (the untargeted-variant rule).
OuterLossTerms outer_step_grad(AugmentedModel& model, const Tensor& x,
                               std::span<const int64_t> labels, const Tensor& deltas,
                               std::span<const int64_t> targets,
                               const LossWeights& weights, const LossFlags& flags,
                               Mode polarizer_mode = Mode::kTrain,
                               bool surrogate_targets_from_perturbed = false);

enum class DefenseVariant { kNpd, kNpdTp, kNpdTu, kNpdUp, kNpdUu };

std::string variant_name(DefenseVariant v);
DefenseVariant variant_from_name(const std::string& name);

struct DefenseConfig {
  DefenseVariant variant = DefenseVariant::kNpd;
  LossWeights weights;              // (1, 0.1, 0.1) recommended for TP/TU
  LossFlags flags;
  int epochs = 50;
  int warmup_epochs = 2;
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 128;
  PerturbationConfig perturbation;
  int insertion_index = 3;          // before the last conv block by default
  std::optional<int64_t> known_target;  // required for TP/TU
  uint64_t seed = 0;
};

void validate_defense_config(const DefenseConfig& cfg, int64_t num_classes,
                             int max_insertion);

/// Clean-CE training of the polarizer only (Algorithm warm-up phase).
void warmup_polarizer(AugmentedModel& model, const Dataset& d_bn, int epochs,
                      double lr, int batch_size, uint64_t seed,
                      double momentum = 0.9);

struct DefenseEpochStats {
  int epoch = 0;
  double l_bn = 0, l_asr = 0, l_bce = 0, total = 0;
  double acc = std::numeric_limits<double>::quiet_NaN();
  double asr = std::numeric_limits<double>::quiet_NaN();
};

struct NpdResult {
  AugmentedModel model;
  std::vector<DefenseEpochStats> log;
};

/// The full defense: insert an identity polarizer at cfg.insertion_index,
/// warm up on clean CE, then alternate per mini-batch between perturbation
/// generation (variant-specific) and one SGD step on the polarizer for the
/// weighted three-term loss. Base weights and statistics are never modified.
/// `hooks`, when given, adds per-epoch ACC/ASR to the log.
NpdResult npd_fit(CnnModel& base, const Dataset& d_bn, const DefenseConfig& cfg,
                  const TrainEvalHooks* hooks = nullptr);

/// metrics.csv payload: epoch,loss_bn,loss_asr,loss_bce,total,acc,asr.
std::string defense_log_csv(const std::vector<DefenseEpochStats>& log);

/// Runs npd_fit once per boundary with identical seeds; returns reports in
/// the given order.
std::vector<std::pair<std::string, EvalReport>> layer_sweep(
    CnnModel& base, const Dataset& d_bn, const DefenseConfig& cfg,
    std::span<const int> insertion_indices, const TrainEvalHooks& hooks,
    const EvalReport* pre = nullptr);

}  // namespace polarize
