#include "polarize/defense.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace polarize {

namespace {

double clip_prob(double s) { return std::clamp(s, kProbClip, 1.0 - kProbClip); }

void validate_probs(std::span<const double> probs) {
  PZ_REQUIRE(probs.size() >= 2, "probability vector needs at least two entries");
  double sum = 0;
  for (double p : probs) {
    PZ_REQUIRE(p >= 0.0 && p <= 1.0 + 1e-9, "probability entry outside [0,1]");
    sum += p;
  }
  PZ_REQUIRE(std::abs(sum - 1.0) < 1e-6, "probabilities do not sum to 1");
}

int64_t runner_up(std::span<const double> s, int64_t y) {
  int64_t best = -1;
  for (int64_t k = 0; k < static_cast<int64_t>(s.size()); ++k) {
    if (k == y) continue;
    if (best < 0 || s[static_cast<size_t>(k)] > s[static_cast<size_t>(best)]) best = k;
  }
  return best;
}

}  // namespace

std::vector<double> softmax(std::span<const double> logits) {
  PZ_REQUIRE(!logits.empty(), "empty logit vector");
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  std::vector<double> s(logits.size());
  double sum = 0;
  for (size_t k = 0; k < logits.size(); ++k) {
    s[k] = std::exp(logits[k] - m);
    sum += s[k];
  }
  for (double& v : s) v /= sum;
  return s;
}

double loss_asr(std::span<const double> probs, int64_t target) {
  validate_probs(probs);
  PZ_REQUIRE(target >= 0 && target < static_cast<int64_t>(probs.size()),
             "target out of range");
  return -std::log(1.0 - clip_prob(probs[static_cast<size_t>(target)]));
}

double loss_bce(std::span<const double> probs, int64_t y) {
  validate_probs(probs);
  PZ_REQUIRE(y >= 0 && y < static_cast<int64_t>(probs.size()), "label out of range");
  const int64_t m = runner_up(probs, y);
  return -std::log(clip_prob(probs[static_cast<size_t>(y)])) -
         std::log(1.0 - clip_prob(probs[static_cast<size_t>(m)]));
}

double loss_bn(std::span<const double> logits, int64_t y) {
  PZ_REQUIRE(y >= 0 && y < static_cast<int64_t>(logits.size()), "label out of range");
  double m = logits[0];
  for (double z : logits) m = std::max(m, z);
  double sum = 0;
  for (double z : logits) sum += std::exp(z - m);
  return m + std::log(sum) - logits[static_cast<size_t>(y)];
}

namespace {

// ---------------------------------------------------------------------------
// per-sample loss values and dL/dlogits at the perturbed point
// ---------------------------------------------------------------------------

struct PerturbedTerms {
  double asr = 0, bce = 0;
};

// Analytic gradients match finite differences of the clipped losses: inside a
// clip region the loss is constant, so the corresponding term contributes 0.
PerturbedTerms perturbed_loss_grad(std::span<const double> z, int64_t y, int64_t ytgt,
                                   const LossWeights& w, const LossFlags& flags,
                                   std::span<double> dz) {
  const auto K = static_cast<int64_t>(z.size());
  std::vector<double> s = softmax(z);
  std::fill(dz.begin(), dz.end(), 0.0);
  PerturbedTerms out;

  if (flags.use_asr) {
    const double st = s[static_cast<size_t>(ytgt)];
    out.asr = -std::log(1.0 - clip_prob(st));
    if (st > kProbClip && st < 1.0 - kProbClip) {
      const double coef = w.lambda2 * st / (1.0 - st);
      for (int64_t k = 0; k < K; ++k)
        dz[static_cast<size_t>(k)] +=
            coef * ((k == ytgt ? 1.0 : 0.0) - s[static_cast<size_t>(k)]);
    }
  }
  double bce = 0;
  if (flags.use_bce1) {
    const double sy = s[static_cast<size_t>(y)];
    bce += -std::log(clip_prob(sy));
    if (sy > kProbClip && sy < 1.0 - kProbClip) {
      for (int64_t k = 0; k < K; ++k)
        dz[static_cast<size_t>(k)] +=
            w.lambda3 * (s[static_cast<size_t>(k)] - (k == y ? 1.0 : 0.0));
    }
  }
  if (flags.use_bce2) {
    const int64_t m = runner_up(s, y);
    const double sm = s[static_cast<size_t>(m)];
    bce += -std::log(1.0 - clip_prob(sm));
    if (sm > kProbClip && sm < 1.0 - kProbClip) {
      const double coef = w.lambda3 * sm / (1.0 - sm);
      for (int64_t k = 0; k < K; ++k)
        dz[static_cast<size_t>(k)] +=
            coef * ((k == m ? 1.0 : 0.0) - s[static_cast<size_t>(k)]);
    }
  }
  out.bce = bce;
  return out;
}

Tensor add_delta(const Tensor& x, const Tensor& deltas) {
  PZ_REQUIRE(deltas.same_chw(x) && (deltas.n == x.n || deltas.n == 1),
             "delta batch shape mismatch");
  Tensor xp = x;
  for (int64_t i = 0; i < x.n; ++i) {
    auto d = deltas.sample(deltas.n == 1 ? 0 : i);
    auto s = xp.sample(i);
    for (size_t e = 0; e < s.size(); ++e) s[e] += d[e];
  }
  return xp;
}

std::pair<Tensor, std::vector<int64_t>> gather(const Dataset& ds,
                                               std::span<const int64_t> idx) {
  Tensor x(static_cast<int64_t>(idx.size()), ds.images.c, ds.images.h, ds.images.w);
  std::vector<int64_t> y(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) {
    auto src = ds.images.sample(idx[i]);
    std::copy(src.begin(), src.end(), x.sample(static_cast<int64_t>(i)).begin());
    y[i] = ds.labels[static_cast<size_t>(idx[i])];
  }
  return {std::move(x), std::move(y)};
}

}  // namespace

OuterLossTerms outer_loss(const AugmentedModel& model, const Tensor& x,
                          std::span<const int64_t> labels, const Tensor& deltas,
                          std::span<const int64_t> surrogate_targets,
                          const LossWeights& weights, const LossFlags& flags) {
  PZ_REQUIRE(static_cast<int64_t>(labels.size()) == x.n, "label count mismatch");
  PZ_REQUIRE(surrogate_targets.size() == labels.size(), "target count mismatch");
  Tensor z_clean = model.logits(x);
  Tensor z_pert = model.logits(add_delta(x, deltas));
  OuterLossTerms terms;
  std::vector<double> scratch(static_cast<size_t>(z_clean.sample_size()));
  for (int64_t i = 0; i < x.n; ++i) {
    terms.bn += loss_bn(z_clean.sample(i), labels[static_cast<size_t>(i)]);
    auto t = perturbed_loss_grad(z_pert.sample(i), labels[static_cast<size_t>(i)],
                                 surrogate_targets[static_cast<size_t>(i)], weights,
                                 flags, scratch);
    terms.asr += t.asr;
    terms.bce += t.bce;
  }
  const double n = static_cast<double>(x.n);
  terms.bn /= n;
  terms.asr /= n;
  terms.bce /= n;
  terms.total = weights.lambda1 * terms.bn + weights.lambda2 * terms.asr +
                weights.lambda3 * terms.bce;
  return terms;
}

OuterLossTerms outer_step_grad(AugmentedModel& model, const Tensor& x,
                               std::span<const int64_t> labels, const Tensor& deltas,
                               std::span<const int64_t> targets,
                               const LossWeights& weights, const LossFlags& flags,
                               Mode polarizer_mode,
                               bool surrogate_targets_from_perturbed) {
  const auto b = x.n;
  PZ_REQUIRE(static_cast<int64_t>(labels.size()) == b, "label count mismatch");
  if (!surrogate_targets_from_perturbed)
    PZ_REQUIRE(static_cast<int64_t>(targets.size()) == b, "target count mismatch");

  AugmentedModel::Caches clean_caches, pert_caches;
  Tensor z_clean = model.forward_cached(x, polarizer_mode, clean_caches);
  Tensor z_pert = model.forward_cached(add_delta(x, deltas), polarizer_mode, pert_caches);

  std::vector<int64_t> own_targets;
  std::span<const int64_t> use_targets = targets;
  if (surrogate_targets_from_perturbed) {
    own_targets.resize(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i)
      own_targets[static_cast<size_t>(i)] =
          surrogate_target(z_pert.sample(i), labels[static_cast<size_t>(i)]);
    use_targets = own_targets;
  }

  Tensor d_clean(z_clean.n, z_clean.c, 1, 1), d_pert(z_pert.n, z_pert.c, 1, 1);
  OuterLossTerms terms;
  for (int64_t i = 0; i < b; ++i) {
    const int64_t y = labels[static_cast<size_t>(i)];
    auto zi = z_clean.sample(i);
    terms.bn += loss_bn(zi, y);
    std::vector<double> s = softmax(zi);
    auto dc = d_clean.sample(i);
    for (size_t k = 0; k < s.size(); ++k)
      dc[k] = weights.lambda1 * (s[k] - (static_cast<int64_t>(k) == y ? 1.0 : 0.0)) /
              static_cast<double>(b);
    auto t = perturbed_loss_grad(z_pert.sample(i), y, use_targets[static_cast<size_t>(i)],
                                 weights, flags, d_pert.sample(i));
    terms.asr += t.asr;
    terms.bce += t.bce;
    auto dp = d_pert.sample(i);
    for (double& g : dp) g /= static_cast<double>(b);
  }
  terms.bn /= static_cast<double>(b);
  terms.asr /= static_cast<double>(b);
  terms.bce /= static_cast<double>(b);
  terms.total = weights.lambda1 * terms.bn + weights.lambda2 * terms.asr +
                weights.lambda3 * terms.bce;

  model.backward_to_polarizer(clean_caches, d_clean);
  model.backward_to_polarizer(pert_caches, d_pert);
  return terms;
}

std::string variant_name(DefenseVariant v) {
  switch (v) {
    case DefenseVariant::kNpd: return "NPD";
    case DefenseVariant::kNpdTp: return "NPD-TP";
    case DefenseVariant::kNpdTu: return "NPD-TU";
    case DefenseVariant::kNpdUp: return "NPD-UP";
    case DefenseVariant::kNpdUu: return "NPD-UU";
  }
  return "NPD";
}

DefenseVariant variant_from_name(const std::string& name) {
  if (name == "NPD") return DefenseVariant::kNpd;
  if (name == "NPD-TP" || name == "NPD_TP") return DefenseVariant::kNpdTp;
  if (name == "NPD-TU" || name == "NPD_TU") return DefenseVariant::kNpdTu;
  if (name == "NPD-UP" || name == "NPD_UP") return DefenseVariant::kNpdUp;
  if (name == "NPD-UU" || name == "NPD_UU") return DefenseVariant::kNpdUu;
  throw ConfigError("unknown defense variant: " + name);
}

void validate_defense_config(const DefenseConfig& cfg, int64_t num_classes,
                             int max_insertion) {
  if (cfg.variant == DefenseVariant::kNpdTp || cfg.variant == DefenseVariant::kNpdTu) {
    if (!cfg.known_target)
      throw ConfigError(variant_name(cfg.variant) + " requires defense.known_target");
    if (*cfg.known_target < 0 || *cfg.known_target >= num_classes)
      throw ConfigError("defense.known_target out of range");
  }
  if (cfg.epochs < 0) throw ConfigError("defense.epochs must be >= 0");
  if (cfg.warmup_epochs < 0) throw ConfigError("defense.warmup_epochs must be >= 0");
  if (cfg.lr <= 0) throw ConfigError("defense.lr must be positive");
  if (cfg.batch_size < 1) throw ConfigError("defense.batch_size must be >= 1");
  if (cfg.weights.lambda1 < 0 || cfg.weights.lambda2 < 0 || cfg.weights.lambda3 < 0)
    throw ConfigError("defense loss weights must be non-negative");
  if (cfg.insertion_index < 1 || cfg.insertion_index > max_insertion)
    throw ConfigError("defense.insertion_index must be in [1, " +
                      std::to_string(max_insertion) + "]");
  try {
    validate_perturbation_config(cfg.perturbation);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("defense.perturbation: ") + e.what());
  }
}

void warmup_polarizer(AugmentedModel& model, const Dataset& d_bn, int epochs, double lr,
                      int batch_size, uint64_t seed, double momentum) {
  validate_dataset(d_bn);
  PZ_REQUIRE(d_bn.size() > 0, "warm-up dataset is empty");
  PZ_REQUIRE(epochs >= 0 && lr > 0 && batch_size >= 1, "bad warm-up hyperparameters");

  std::vector<ParamView> params;
  model.polarizer().collect_params(params);
  SgdOptimizer opt(lr, momentum, /*weight_decay=*/0.0);

  std::vector<int64_t> order(static_cast<size_t>(d_bn.size()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, /*stream=*/11);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(batch_size)) {
      const size_t cnt = std::min<size_t>(batch_size, order.size() - off);
      auto [x, y] = gather(d_bn, {order.data() + off, cnt});
      AugmentedModel::Caches caches;
      Tensor z = model.forward_cached(x, Mode::kTrain, caches);
      Tensor dz(z.n, z.c, z.h, z.w);
      double total = 0;
      for (int64_t i = 0; i < z.n; ++i) {
        auto zi = z.sample(i);
        total += loss_bn(zi, y[static_cast<size_t>(i)]);
        std::vector<double> s = softmax(zi);
        auto d = dz.sample(i);
        for (size_t k = 0; k < s.size(); ++k)
          d[k] = (s[k] - (static_cast<int64_t>(k) == y[i] ? 1.0 : 0.0)) /
                 static_cast<double>(cnt);
      }
      if (!std::isfinite(total))
        throw TrainingFailure("warm-up diverged at epoch " + std::to_string(epoch), epoch);
      model.polarizer().zero_grad();
      model.backward_to_polarizer(caches, dz);
      opt.step(params);
    }
  }
}

NpdResult npd_fit(CnnModel& base, const Dataset& d_bn, const DefenseConfig& cfg,
                  const TrainEvalHooks* hooks) {
  validate_dataset(d_bn);
  PZ_REQUIRE(d_bn.size() > 0, "clean defense dataset is empty");
  PZ_REQUIRE(d_bn.meta == base.meta, "defense dataset meta does not match model");
  validate_defense_config(cfg, base.meta.num_classes, base.num_units() - 1);

  const Boundary& boundary = base.boundaries[static_cast<size_t>(cfg.insertion_index - 1)];
  NpdResult res{AugmentedModel(base, cfg.insertion_index,
                               identity_polarizer(boundary.channels)),
                {}};
  AugmentedModel& aug = res.model;

  warmup_polarizer(aug, d_bn, cfg.warmup_epochs, cfg.lr, cfg.batch_size,
                   mix_seed(cfg.seed, 21), cfg.momentum);

  std::vector<ParamView> params;
  aug.polarizer().collect_params(params);
  SgdOptimizer opt(cfg.lr, cfg.momentum, /*weight_decay=*/0.0);

  std::vector<int64_t> order(static_cast<size_t>(d_bn.size()));
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(cfg.seed, /*stream=*/13);

  const bool universal = cfg.variant == DefenseVariant::kNpdTu ||
                         cfg.variant == DefenseVariant::kNpdUu;
  const bool targeted_known = cfg.variant == DefenseVariant::kNpdTp ||
                              cfg.variant == DefenseVariant::kNpdTu;
  const bool untargeted = cfg.variant == DefenseVariant::kNpdUp ||
                          cfg.variant == DefenseVariant::kNpdUu;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Tensor delta_u;
    if (universal)  // refreshed once per epoch over the full clean set
      delta_u = universal_perturbation(
          aug, d_bn,
          cfg.variant == DefenseVariant::kNpdTu ? UapMode::kTargeted
                                                : UapMode::kUntargeted,
          cfg.known_target, cfg.perturbation, cfg.batch_size);

    std::shuffle(order.begin(), order.end(), rng);
    double sum_bn = 0, sum_asr = 0, sum_bce = 0;
    int64_t seen = 0;
    for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
      const size_t cnt = std::min<size_t>(cfg.batch_size, order.size() - off);
      auto [x, y] = gather(d_bn, {order.data() + off, cnt});
      const auto b = static_cast<int64_t>(cnt);

      // (i) per-sample targets, computed before perturbation generation
      std::vector<int64_t> targets(cnt, -1);
      if (cfg.variant == DefenseVariant::kNpd) {
        Tensor z = aug.logits(x);
        for (int64_t i = 0; i < b; ++i)
          targets[static_cast<size_t>(i)] =
              surrogate_target(z.sample(i), y[static_cast<size_t>(i)]);
      } else if (targeted_known) {
        std::fill(targets.begin(), targets.end(), *cfg.known_target);
      }

      // (ii) perturbations
      Tensor deltas;
      switch (cfg.variant) {
        case DefenseVariant::kNpd:
        case DefenseVariant::kNpdTp:
          deltas = pgd_targeted(aug, x, targets, cfg.perturbation);
          break;
        case DefenseVariant::kNpdUp:
          deltas = pgd_untargeted(aug, x, y, cfg.perturbation);
          break;
        case DefenseVariant::kNpdTu:
        case DefenseVariant::kNpdUu:
          deltas = delta_u;  // shared, broadcast below
          break;
      }

      // (iii) one SGD step on the polarizer for the outer loss
      aug.polarizer().zero_grad();
      OuterLossTerms terms =
          outer_step_grad(aug, x, y, deltas, targets, cfg.weights, cfg.flags,
                          Mode::kTrain, /*surrogate_targets_from_perturbed=*/untargeted);
      if (!std::isfinite(terms.total))
        throw TrainingFailure("defense diverged (non-finite loss) at epoch " +
                                  std::to_string(epoch),
                              epoch);
      opt.step(params);

      sum_bn += terms.bn * static_cast<double>(b);
      sum_asr += terms.asr * static_cast<double>(b);
      sum_bce += terms.bce * static_cast<double>(b);
      seen += b;
    }

    DefenseEpochStats st;
    st.epoch = epoch;
    st.l_bn = sum_bn / static_cast<double>(seen);
    st.l_asr = sum_asr / static_cast<double>(seen);
    st.l_bce = sum_bce / static_cast<double>(seen);
    st.total = cfg.weights.lambda1 * st.l_bn + cfg.weights.lambda2 * st.l_asr +
               cfg.weights.lambda3 * st.l_bce;
    if (hooks && hooks->clean_test) {
      auto pf = [&aug](const Tensor& batch) { return aug.predict(batch); };
      Dataset head;
      const Dataset* test = hooks->clean_test;
      if (hooks->max_eval > 0 && hooks->max_eval < test->size()) {
        head.meta = test->meta;
        head.images = test->images.slice(0, hooks->max_eval);
        head.labels.assign(test->labels.begin(), test->labels.begin() + hooks->max_eval);
        test = &head;
      }
      st.acc = accuracy(pf, *test);
      if (hooks->trigger && hooks->plan)
        st.asr = attack_success_rate(pf, *test, *hooks->trigger, *hooks->plan);
    }
    res.log.push_back(st);
  }
  return res;
}

std::string defense_log_csv(const std::vector<DefenseEpochStats>& log) {
  std::string out = "epoch,loss_bn,loss_asr,loss_bce,total,acc,asr\n";
  char buf[256];
  for (const auto& st : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", st.epoch,
                  st.l_bn, st.l_asr, st.l_bce, st.total, st.acc, st.asr);
    out += buf;
  }
  return out;
}

std::vector<std::pair<std::string, EvalReport>> layer_sweep(
    CnnModel& base, const Dataset& d_bn, const DefenseConfig& cfg,
    std::span<const int> insertion_indices, const TrainEvalHooks& hooks,
    const EvalReport* pre) {
  PZ_REQUIRE(hooks.clean_test && hooks.trigger && hooks.plan,
             "layer_sweep needs a full evaluation context");
  std::vector<std::pair<std::string, EvalReport>> out;
  for (int k : insertion_indices) {
    DefenseConfig run_cfg = cfg;
    run_cfg.insertion_index = k;
    NpdResult res = npd_fit(base, d_bn, run_cfg);
    auto pf = [&res](const Tensor& b) { return res.model.predict(b); };
    out.emplace_back(res.model.boundary_name(),
                     evaluate(pf, *hooks.clean_test, *hooks.trigger, *hooks.plan, pre));
  }
  return out;
}

}  // namespace polarize
