#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "polarize/dataset.hpp"

namespace polarize {

enum class TriggerKind { kPatch, kBlend };

/// A trigger pattern plus the rule for fusing it into an image.
/// Patch: x*(1-mask) + pattern*mask, mask broadcast over channels.
/// Blend: (1-alpha)*x + alpha*pattern.
struct TriggerSpec {
  TriggerKind kind = TriggerKind::kPatch;
  Tensor pattern;           // (1, C, H, W), entries in [0,1]
  Tensor mask;              // (1, 1, H, W), entries in {0,1}; patch only
  double blend_ratio = 0.0; // alpha in [0,1]; blend only
};

/// Seed for the default blend noise pattern (reproducible stand-in for an
/// externally published pattern).
inline constexpr uint64_t kDefaultBlendPatternSeed = 0xb1e7d;

/// Solid patch of `value` in the bottom-right corner.
TriggerSpec make_patch_trigger(const DatasetMeta& meta, int64_t size = 3, double value = 1.0);

/// Uniform-noise blend pattern drawn from `pattern_seed`.
TriggerSpec make_blend_trigger(const DatasetMeta& meta, double alpha = 0.2,
                               uint64_t pattern_seed = kDefaultBlendPatternSeed);

void validate_trigger(const TriggerSpec& trig);

/// Fuse the trigger into every sample of the batch. Input is not mutated;
/// output entries stay in [0,1].
Tensor apply_trigger(const Tensor& images, const TriggerSpec& trig);

enum class PoisonMode { kAllToOne, kAllToAll };

struct PoisonPlan {
  PoisonMode mode = PoisonMode::kAllToOne;
  int64_t target = 0;   // T; all_to_one only
  double ratio = 0.0;   // fraction of samples poisoned
  uint64_t seed = 0;
};

/// all_to_one: T for every y. all_to_all: (y+1) mod K.
int64_t target_label(int64_t y, const PoisonPlan& plan, const DatasetMeta& meta);

struct PoisonResult {
  Dataset data;
  std::vector<int64_t> poisoned_indices;  // sorted ascending
};

/// Replace floor(ratio*N) uniformly chosen samples with
/// (apply_trigger(x), target_label(y)); deterministic given plan.seed.
PoisonResult poison_dataset(const Dataset& ds, const PoisonPlan& plan,
                            const TriggerSpec& trig);

/// Draw floor(fraction*N) samples without replacement (seeded shuffle);
/// returns (subset, remainder).
std::pair<Dataset, Dataset> split_clean_subset(const Dataset& ds, double fraction,
                                               uint64_t seed);
/// Same, with an explicit sample count.
std::pair<Dataset, Dataset> split_clean_count(const Dataset& ds, int64_t count,
                                              uint64_t seed);

/// Poison manifest: {mode, target, ratio, seed, poisoned_indices}.
void save_poison_manifest(const std::filesystem::path& file, const PoisonPlan& plan,
                          const std::vector<int64_t>& poisoned_indices);

}  // namespace polarize
