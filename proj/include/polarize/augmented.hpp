#pragma once

#include <vector>

#include "polarize/nn.hpp"
#include "polarize/perturb.hpp"
#include "polarize/polarizer.hpp"

namespace polarize {

/// The frozen backdoored model with a polarizer spliced in at a block
/// boundary. Base layers always run in inference mode here and their
/// parameters are never touched; only the polarizer is trainable. The base
/// model is held by pointer and must outlive the augmented model.
class AugmentedModel : public GradModel {
 public:
  AugmentedModel(CnnModel& base, int insertion_index, PolarizerParams polarizer);

  const CnnModel& base() const { return *base_; }
  int insertion_index() const { return insertion_index_; }
  const std::string& boundary_name() const;
  PolarizerParams& polarizer() { return polarizer_; }
  const PolarizerParams& polarizer() const { return polarizer_; }

  /// Forward pass f(L)∘…∘f(k+1)∘g∘f(k)∘…∘f(1); `polarizer_mode` controls only
  /// the polarizer's BN (base BN always uses running statistics).
  Tensor forward(const Tensor& x, Mode polarizer_mode) const;

  /// Forward keeping per-layer caches for a following backward call.
  struct Caches {
    std::vector<LayerCache> prefix;
    PolarizerCache polarizer;
    std::vector<LayerCache> suffix;
  };
  Tensor forward_cached(const Tensor& x, Mode polarizer_mode, Caches& caches);

  /// Backprop dL/dlogits into the polarizer parameter grads (base untouched).
  void backward_to_polarizer(const Caches& caches, const Tensor& dlogits);

  std::vector<int64_t> predict(const Tensor& batch) const;

  // GradModel (inference mode, no state mutation)
  int64_t num_classes() const override { return base_->meta.num_classes; }
  Tensor logits(const Tensor& x) const override { return forward(x, Mode::kInfer); }
  Tensor ce_input_grad(const Tensor& x,
                       std::span<const int64_t> targets) const override;

 private:
  CnnModel* base_;
  int insertion_index_;  // k: polarizer sits after unit k, k in [1, L-1]
  int split_layer_;      // flat layer index of the boundary
  PolarizerParams polarizer_;
};

/// Validates the insertion point and channel agreement, then splices.
AugmentedModel insert_polarizer(CnnModel& base, int insertion_index,
                                PolarizerParams polarizer);

}  // namespace polarize
