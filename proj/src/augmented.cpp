#include "polarize/augmented.hpp"

#include <cmath>

namespace polarize {

AugmentedModel::AugmentedModel(CnnModel& base, int insertion_index,
                               PolarizerParams polarizer)
    : base_(&base), insertion_index_(insertion_index), polarizer_(std::move(polarizer)) {
  const int max_k = base.num_units() - 1;
  PZ_REQUIRE(insertion_index >= 1 && insertion_index <= max_k,
             "insertion index must be in [1, " + std::to_string(max_k) +
                 "] (after a conv block, not after the head)");
  const Boundary& b = base.boundaries[static_cast<size_t>(insertion_index - 1)];
  PZ_REQUIRE(polarizer_.channels == b.channels,
             "polarizer channels (" + std::to_string(polarizer_.channels) +
                 ") do not match boundary " + b.name + " (" +
                 std::to_string(b.channels) + ")");
  split_layer_ = b.layer_end;
}

const std::string& AugmentedModel::boundary_name() const {
  return base_->boundaries[static_cast<size_t>(insertion_index_ - 1)].name;
}

Tensor AugmentedModel::forward(const Tensor& x, Mode polarizer_mode) const {
  auto* self = const_cast<AugmentedModel*>(this);
  Tensor mid = self->base_->forward(x, Mode::kInfer, nullptr, 0, split_layer_);
  mid = polarizer_apply(self->polarizer_, mid, polarizer_mode);
  return self->base_->forward(mid, Mode::kInfer, nullptr, split_layer_, -1);
}

Tensor AugmentedModel::forward_cached(const Tensor& x, Mode polarizer_mode,
                                      Caches& caches) {
  Tensor mid = base_->forward(x, Mode::kInfer, &caches.prefix, 0, split_layer_);
  mid = polarizer_apply(polarizer_, mid, polarizer_mode, &caches.polarizer);
  return base_->forward(mid, Mode::kInfer, &caches.suffix, split_layer_, -1);
}

void AugmentedModel::backward_to_polarizer(const Caches& caches, const Tensor& dlogits) {
  Tensor g = dlogits;
  for (int l = static_cast<int>(base_->layers.size()) - 1; l >= split_layer_; --l)
    g = base_->layers[static_cast<size_t>(l)]->backward(
        caches.suffix[static_cast<size_t>(l)], g, /*want_input_grad=*/true,
        /*accum_param_grads=*/false);
  polarizer_backward(polarizer_, caches.polarizer, g, /*want_input_grad=*/false,
                     /*accum_param_grads=*/true);
}

std::vector<int64_t> AugmentedModel::predict(const Tensor& batch) const {
  return predict_classes(forward(batch, Mode::kInfer));
}

Tensor AugmentedModel::ce_input_grad(const Tensor& x,
                                     std::span<const int64_t> targets) const {
  PZ_REQUIRE(static_cast<int64_t>(targets.size()) == x.n,
             "target count does not match batch");
  auto* self = const_cast<AugmentedModel*>(this);
  Caches caches;
  Tensor logits = self->forward_cached(x, Mode::kInfer, caches);

  // per-sample CE gradient: softmax(z) - onehot(target)
  const int64_t K = logits.sample_size();
  Tensor dlogits(logits.n, logits.c, logits.h, logits.w);
  for (int64_t i = 0; i < logits.n; ++i) {
    auto z = logits.sample(i);
    auto d = dlogits.sample(i);
    const int64_t t = targets[static_cast<size_t>(i)];
    PZ_REQUIRE(t >= 0 && t < K, "target label out of range");
    double m = z[0];
    for (int64_t k = 1; k < K; ++k) m = std::max(m, z[static_cast<size_t>(k)]);
    double sum = 0;
    for (int64_t k = 0; k < K; ++k) sum += std::exp(z[static_cast<size_t>(k)] - m);
    const double lse = m + std::log(sum);
    for (int64_t k = 0; k < K; ++k)
      d[static_cast<size_t>(k)] =
          std::exp(z[static_cast<size_t>(k)] - lse) - (k == t ? 1.0 : 0.0);
  }

  Tensor g = dlogits;
  for (int l = static_cast<int>(base_->layers.size()) - 1; l >= split_layer_; --l)
    g = base_->layers[static_cast<size_t>(l)]->backward(
        caches.suffix[static_cast<size_t>(l)], g, /*want_input_grad=*/true,
        /*accum_param_grads=*/false);
  g = polarizer_backward(self->polarizer_, caches.polarizer, g,
                         /*want_input_grad=*/true, /*accum_param_grads=*/false);
  for (int l = split_layer_ - 1; l >= 0; --l)
    g = base_->layers[static_cast<size_t>(l)]->backward(
        caches.prefix[static_cast<size_t>(l)], g, /*want_input_grad=*/true,
        /*accum_param_grads=*/false);
  return g;
}

AugmentedModel insert_polarizer(CnnModel& base, int insertion_index,
                                PolarizerParams polarizer) {
  return AugmentedModel(base, insertion_index, std::move(polarizer));
}

}  // namespace polarize
