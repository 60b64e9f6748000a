#include "polarize/perturb.hpp"

#include <algorithm>
#include <cmath>

namespace polarize {

void validate_perturbation_config(const PerturbationConfig& cfg) {
  PZ_REQUIRE(cfg.rho > 0, "perturbation budget rho must be positive");
  PZ_REQUIRE(cfg.steps >= 0, "steps must be non-negative");
  if (cfg.steps > 0)
    PZ_REQUIRE(effective_step_size(cfg) > 0, "step size must be positive");
}

double effective_step_size(const PerturbationConfig& cfg) {
  if (cfg.step_size > 0) return cfg.step_size;
  return cfg.steps > 0 ? 2.5 * cfg.rho / static_cast<double>(cfg.steps) : 0.0;
}

int64_t surrogate_target(std::span<const double> logits, int64_t y) {
  const auto K = static_cast<int64_t>(logits.size());
  PZ_REQUIRE(K >= 2, "need at least two classes for a surrogate target");
  PZ_REQUIRE(y >= 0 && y < K, "true label out of range");
  int64_t best = -1;
  for (int64_t k = 0; k < K; ++k) {
    if (k == y) continue;
    if (best < 0 || logits[static_cast<size_t>(k)] > logits[static_cast<size_t>(best)])
      best = k;
  }
  return best;
}

void project_inplace(std::span<double> delta, NormKind norm, double rho) {
  PZ_REQUIRE(rho > 0, "rho must be positive");
  for (double d : delta) PZ_REQUIRE(std::isfinite(d), "non-finite perturbation entry");
  if (norm == NormKind::kLinf) {
    for (double& d : delta) d = std::clamp(d, -rho, rho);
    return;
  }
  double sq = 0;
  for (double d : delta) sq += d * d;
  const double nrm = std::sqrt(sq);
  if (nrm <= rho) return;  // interior points untouched
  const double scale = rho / nrm;
  for (double& d : delta) d *= scale;
}

Tensor project(const Tensor& delta, NormKind norm, double rho) {
  Tensor out = delta;
  for (int64_t i = 0; i < out.n; ++i) project_inplace(out.sample(i), norm, rho);
  return out;
}

namespace {

// One normalized-gradient step: sign for Linf, L2-normalized direction for
// L2. Zero-gradient samples are skipped.
void gradient_step(Tensor& delta, const Tensor& grad, NormKind norm, double step,
                   double sign) {
  for (int64_t i = 0; i < delta.n; ++i) {
    auto d = delta.sample(i);
    auto g = grad.sample(i);
    if (norm == NormKind::kLinf) {
      bool any = false;
      for (double gv : g)
        if (gv != 0) {
          any = true;
          break;
        }
      if (!any) continue;
      for (size_t e = 0; e < d.size(); ++e)
        d[e] += sign * step * (g[e] > 0 ? 1.0 : (g[e] < 0 ? -1.0 : 0.0));
    } else {
      double sq = 0;
      for (double gv : g) sq += gv * gv;
      const double nrm = std::sqrt(sq);
      if (nrm == 0) continue;
      for (size_t e = 0; e < d.size(); ++e) d[e] += sign * step * g[e] / nrm;
    }
  }
}

// delta := clip(x+delta, 0, 1) - x, computed directly on delta so entries
// that were already feasible come back bit-identical.
void clamp_to_domain(Tensor& delta, const Tensor& x) {
  for (size_t e = 0; e < delta.v.size(); ++e)
    delta.v[e] = std::clamp(delta.v[e], -x.v[e], 1.0 - x.v[e]);
}

Tensor pgd_run(const GradModel& model, const Tensor& x, std::span<const int64_t> labels,
               const PerturbationConfig& cfg, double sign) {
  validate_perturbation_config(cfg);
  PZ_REQUIRE(static_cast<int64_t>(labels.size()) == x.n,
             "label count does not match batch");
  PZ_REQUIRE(x.all_finite(), "non-finite input batch");
  Tensor delta = Tensor::zeros_like(x);
  const double step = effective_step_size(cfg);
  for (int s = 0; s < cfg.steps; ++s) {
    Tensor xp = x;
    for (size_t e = 0; e < xp.v.size(); ++e) xp.v[e] += delta.v[e];
    Tensor grad = model.ce_input_grad(xp, labels);
    gradient_step(delta, grad, cfg.norm, step, sign);
    for (int64_t i = 0; i < delta.n; ++i) project_inplace(delta.sample(i), cfg.norm, cfg.rho);
    if (cfg.clamp) clamp_to_domain(delta, x);
  }
  return delta;
}

}  // namespace

Tensor pgd_targeted(const GradModel& model, const Tensor& x,
                    std::span<const int64_t> targets, const PerturbationConfig& cfg) {
  return pgd_run(model, x, targets, cfg, /*sign=*/-1.0);  // descend toward target
}

Tensor pgd_untargeted(const GradModel& model, const Tensor& x,
                      std::span<const int64_t> labels, const PerturbationConfig& cfg) {
  return pgd_run(model, x, labels, cfg, /*sign=*/+1.0);  // ascend away from label
}

Tensor universal_perturbation(const GradModel& model, const Dataset& data, UapMode mode,
                              std::optional<int64_t> target,
                              const PerturbationConfig& cfg, int batch_size) {
  validate_perturbation_config(cfg);
  validate_dataset(data);
  PZ_REQUIRE(data.size() > 0, "dataset is empty");
  PZ_REQUIRE(batch_size >= 1, "batch size must be >= 1");
  if (mode == UapMode::kTargeted)
    PZ_REQUIRE(target && *target >= 0 && *target < data.meta.num_classes,
               "targeted universal perturbation needs a valid target label");

  const int64_t ss = data.images.sample_size();
  Tensor delta(1, data.images.c, data.images.h, data.images.w);
  const double step = effective_step_size(cfg);
  const double sign = mode == UapMode::kTargeted ? -1.0 : +1.0;

  // Universal feasibility envelope: x_i + delta stays in [0,1] for every i,
  // i.e. delta in [-min_i x_i, 1 - max_i x_i] elementwise.
  std::vector<double> lo(static_cast<size_t>(ss), -1.0), hi(static_cast<size_t>(ss), 1.0);
  if (cfg.clamp) {
    for (int64_t i = 0; i < data.size(); ++i) {
      auto s = data.images.sample(i);
      for (int64_t e = 0; e < ss; ++e) {
        lo[static_cast<size_t>(e)] = std::max(lo[static_cast<size_t>(e)], -s[static_cast<size_t>(e)]);
        hi[static_cast<size_t>(e)] = std::min(hi[static_cast<size_t>(e)], 1.0 - s[static_cast<size_t>(e)]);
      }
    }
  }

  for (int pass = 0; pass < cfg.steps; ++pass) {
    for (int64_t off = 0; off < data.size(); off += batch_size) {
      const int64_t cnt = std::min<int64_t>(batch_size, data.size() - off);
      Tensor xp = data.images.slice(off, cnt);
      std::vector<int64_t> labels(static_cast<size_t>(cnt));
      for (int64_t i = 0; i < cnt; ++i)
        labels[static_cast<size_t>(i)] =
            mode == UapMode::kTargeted ? *target : data.labels[static_cast<size_t>(off + i)];
      for (int64_t i = 0; i < cnt; ++i) {
        auto s = xp.sample(i);
        for (int64_t e = 0; e < ss; ++e) s[static_cast<size_t>(e)] += delta.v[static_cast<size_t>(e)];
      }
      Tensor grad = model.ce_input_grad(xp, labels);
      // batch-mean gradient
      Tensor mean_grad(1, delta.c, delta.h, delta.w);
      for (int64_t i = 0; i < cnt; ++i) {
        auto g = grad.sample(i);
        for (int64_t e = 0; e < ss; ++e)
          mean_grad.v[static_cast<size_t>(e)] += g[static_cast<size_t>(e)] / static_cast<double>(cnt);
      }
      gradient_step(delta, mean_grad, cfg.norm, step, sign);
      project_inplace(delta.sample(0), cfg.norm, cfg.rho);
      if (cfg.clamp)
        for (int64_t e = 0; e < ss; ++e)
          delta.v[static_cast<size_t>(e)] =
              std::clamp(delta.v[static_cast<size_t>(e)], lo[static_cast<size_t>(e)], hi[static_cast<size_t>(e)]);
    }
  }
  return delta;
}

}  // namespace polarize
