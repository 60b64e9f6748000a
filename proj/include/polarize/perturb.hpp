#pragma once

#include <optional>
#include <span>
#include <vector>

#include "polarize/dataset.hpp"
#include "polarize/tensor.hpp"

namespace polarize {

/// A frozen differentiable classifier: logits plus per-sample input gradients
/// of the cross-entropy against given labels. Implementations must not mutate
/// any internal state (weights, normalization statistics) in these calls.
class GradModel {
 public:
  virtual ~GradModel() = default;
  virtual int64_t num_classes() const = 0;
  /// (B, K, 1, 1) logits.
  virtual Tensor logits(const Tensor& x) const = 0;
  /// Sample i of the result holds d CE(f(x_i), targets[i]) / d x_i.
  virtual Tensor ce_input_grad(const Tensor& x,
                               std::span<const int64_t> targets) const = 0;
};

enum class NormKind { kL2, kLinf };

struct PerturbationConfig {
  NormKind norm = NormKind::kL2;
  double rho = 1.5;        // budget, normalized pixel units
  int steps = 5;
  double step_size = 0.0;  // <= 0 means the 2.5*rho/steps default
  bool clamp = true;       // keep x + delta inside [0,1]
};

void validate_perturbation_config(const PerturbationConfig& cfg);
double effective_step_size(const PerturbationConfig& cfg);

/// Highest-scoring class other than y; ties toward the smaller index.
int64_t surrogate_target(std::span<const double> logits, int64_t y);

/// Project one flattened perturbation onto the norm ball of radius rho.
/// Interior points are returned bit-identical.
void project_inplace(std::span<double> delta, NormKind norm, double rho);
/// Per-sample projection over a batch.
Tensor project(const Tensor& delta, NormKind norm, double rho);

/// Targeted PGD: `steps` normalized-gradient descent steps on
/// CE(f(x+delta), target), a projection after each step, and (with clamp) a
/// re-derivation of delta from the clamped perturbed input. Zero init.
Tensor pgd_targeted(const GradModel& model, const Tensor& x,
                    std::span<const int64_t> targets, const PerturbationConfig& cfg);

/// Untargeted PGD: ascends CE(f(x+delta), y).
Tensor pgd_untargeted(const GradModel& model, const Tensor& x,
                      std::span<const int64_t> labels, const PerturbationConfig& cfg);

enum class UapMode { kTargeted, kUntargeted };

/// One shared perturbation (1, C, H, W) trained over mini-batches of the
/// dataset: per batch one step along the batch-mean CE gradient (toward
/// `target` if targeted, away from true labels otherwise), then projection.
/// cfg.steps counts passes over the dataset.
Tensor universal_perturbation(const GradModel& model, const Dataset& data, UapMode mode,
                              std::optional<int64_t> target,
                              const PerturbationConfig& cfg, int batch_size = 128);

}  // namespace polarize
