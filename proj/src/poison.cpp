#include "polarize/poison.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace polarize {

TriggerSpec make_patch_trigger(const DatasetMeta& meta, int64_t size, double value) {
  validate_meta(meta);
  PZ_REQUIRE(size >= 1 && size <= meta.height && size <= meta.width,
             "patch size out of range");
  PZ_REQUIRE(value >= 0.0 && value <= 1.0, "patch value must be in [0,1]");
  TriggerSpec t;
  t.kind = TriggerKind::kPatch;
  t.pattern = Tensor(1, meta.channels, meta.height, meta.width);
  t.mask = Tensor(1, 1, meta.height, meta.width);
  for (int64_t h = meta.height - size; h < meta.height; ++h)
    for (int64_t w = meta.width - size; w < meta.width; ++w) {
      t.mask.at(0, 0, h, w) = 1.0;
      for (int64_t c = 0; c < meta.channels; ++c) t.pattern.at(0, c, h, w) = value;
    }
  return t;
}

TriggerSpec make_blend_trigger(const DatasetMeta& meta, double alpha, uint64_t pattern_seed) {
  validate_meta(meta);
  PZ_REQUIRE(alpha >= 0.0 && alpha <= 1.0, "blend alpha must be in [0,1]");
  TriggerSpec t;
  t.kind = TriggerKind::kBlend;
  t.blend_ratio = alpha;
  t.pattern = Tensor(1, meta.channels, meta.height, meta.width);
  auto rng = make_rng(pattern_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& x : t.pattern.v) x = u(rng);
  return t;
}

void validate_trigger(const TriggerSpec& trig) {
  PZ_REQUIRE(trig.pattern.n == 1 && trig.pattern.size() > 0,
             "trigger pattern must be a single image");
  for (double x : trig.pattern.v)
    PZ_REQUIRE(x >= 0.0 && x <= 1.0, "trigger pattern entries must be in [0,1]");
  if (trig.kind == TriggerKind::kPatch) {
    PZ_REQUIRE(trig.mask.n == 1 && trig.mask.c == 1 && trig.mask.h == trig.pattern.h &&
                   trig.mask.w == trig.pattern.w,
               "patch mask must be (1,1,H,W) matching the pattern");
    for (double m : trig.mask.v)
      PZ_REQUIRE(m == 0.0 || m == 1.0, "mask entries must be 0 or 1");
  } else {
    PZ_REQUIRE(trig.blend_ratio >= 0.0 && trig.blend_ratio <= 1.0,
               "blend ratio must be in [0,1]");
  }
}

Tensor apply_trigger(const Tensor& images, const TriggerSpec& trig) {
  validate_trigger(trig);
  PZ_REQUIRE(images.same_chw(trig.pattern),
             "image and trigger pattern shapes differ");
  Tensor out = images;
  const int64_t hw = images.spatial();
  for (int64_t i = 0; i < images.n; ++i) {
    double* dst = out.v.data() + i * images.sample_size();
    if (trig.kind == TriggerKind::kPatch) {
      for (int64_t c = 0; c < images.c; ++c)
        for (int64_t p = 0; p < hw; ++p) {
          const double m = trig.mask.v[static_cast<size_t>(p)];
          double& x = dst[c * hw + p];
          x = x * (1.0 - m) + trig.pattern.v[static_cast<size_t>(c * hw + p)] * m;
        }
    } else {
      const double a = trig.blend_ratio;
      for (int64_t e = 0; e < images.sample_size(); ++e)
        dst[e] = (1.0 - a) * dst[e] + a * trig.pattern.v[static_cast<size_t>(e)];
    }
  }
  out.clamp_(0.0, 1.0);  // guards fp round-off at the boundaries
  return out;
}

int64_t target_label(int64_t y, const PoisonPlan& plan, const DatasetMeta& meta) {
  PZ_REQUIRE(y >= 0 && y < meta.num_classes, "label out of range");
  if (plan.mode == PoisonMode::kAllToOne) {
    PZ_REQUIRE(plan.target >= 0 && plan.target < meta.num_classes,
               "plan target out of range");
    return plan.target;
  }
  return (y + 1) % meta.num_classes;
}

PoisonResult poison_dataset(const Dataset& ds, const PoisonPlan& plan,
                            const TriggerSpec& trig) {
  validate_dataset(ds);
  PZ_REQUIRE(ds.size() > 0, "dataset is empty");
  PZ_REQUIRE(plan.ratio >= 0.0 && plan.ratio <= 1.0, "poison ratio must be in [0,1]");

  const int64_t n = ds.size();
  const auto count = static_cast<int64_t>(std::floor(plan.ratio * static_cast<double>(n)));

  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(plan.seed, /*stream=*/0);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<size_t>(count));
  std::sort(idx.begin(), idx.end());

  PoisonResult res;
  res.data = ds;
  res.poisoned_indices = idx;
  for (int64_t i : idx) {
    Tensor poisoned = apply_trigger(ds.images.slice(i, 1), trig);
    std::copy(poisoned.v.begin(), poisoned.v.end(),
              res.data.images.v.begin() + i * ds.images.sample_size());
    res.data.labels[static_cast<size_t>(i)] =
        target_label(ds.labels[static_cast<size_t>(i)], plan, ds.meta);
  }
  return res;
}

static std::pair<Dataset, Dataset> split_by_indices(const Dataset& ds,
                                                    const std::vector<int64_t>& take) {
  std::vector<char> taken(static_cast<size_t>(ds.size()), 0);
  Dataset sub, rest;
  sub.meta = rest.meta = ds.meta;
  sub.images = Tensor(static_cast<int64_t>(take.size()), ds.images.c, ds.images.h, ds.images.w);
  rest.images = Tensor(ds.size() - static_cast<int64_t>(take.size()), ds.images.c,
                       ds.images.h, ds.images.w);
  sub.labels.reserve(take.size());
  rest.labels.reserve(static_cast<size_t>(rest.images.n));
  int64_t si = 0;
  for (int64_t i : take) {
    taken[static_cast<size_t>(i)] = 1;
    auto src = ds.images.sample(i);
    std::copy(src.begin(), src.end(), sub.images.sample(si++).begin());
    sub.labels.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  int64_t ri = 0;
  for (int64_t i = 0; i < ds.size(); ++i) {
    if (taken[static_cast<size_t>(i)]) continue;
    auto src = ds.images.sample(i);
    std::copy(src.begin(), src.end(), rest.images.sample(ri++).begin());
    rest.labels.push_back(ds.labels[static_cast<size_t>(i)]);
  }
  return {std::move(sub), std::move(rest)};
}

std::pair<Dataset, Dataset> split_clean_count(const Dataset& ds, int64_t count,
                                              uint64_t seed) {
  validate_dataset(ds);
  PZ_REQUIRE(ds.size() > 0, "dataset is empty");
  PZ_REQUIRE(count >= 0 && count <= ds.size(), "subset count out of range");
  std::vector<int64_t> idx(static_cast<size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), 0);
  auto rng = make_rng(seed, /*stream=*/1);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<size_t>(count));
  return split_by_indices(ds, idx);
}

std::pair<Dataset, Dataset> split_clean_subset(const Dataset& ds, double fraction,
                                               uint64_t seed) {
  PZ_REQUIRE(fraction >= 0.0 && fraction <= 1.0, "fraction must be in [0,1]");
  validate_dataset(ds);
  PZ_REQUIRE(ds.size() > 0, "dataset is empty");
  const auto count =
      static_cast<int64_t>(std::floor(fraction * static_cast<double>(ds.size())));
  return split_clean_count(ds, count, seed);
}

void save_poison_manifest(const std::filesystem::path& file, const PoisonPlan& plan,
                          const std::vector<int64_t>& poisoned_indices) {
  nlohmann::json j{
      {"mode", plan.mode == PoisonMode::kAllToOne ? "all_to_one" : "all_to_all"},
      {"target", plan.target},
      {"ratio", plan.ratio},
      {"seed", plan.seed},
      {"poisoned_indices", poisoned_indices}};
  std::ofstream f(file);
  PZ_REQUIRE(f.good(), "cannot write poison manifest");
  f << j.dump(2) << "\n";
}

}  // namespace polarize
