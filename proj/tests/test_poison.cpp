#include <doctest.h>

#include <set>

#include "polarize/poison.hpp"
#include "test_util.hpp"

using namespace polarize;

namespace {
const DatasetMeta kMeta{10, 3, 16, 16};
}

TEST_CASE("apply_trigger blend identity at alpha=0") {
  TriggerSpec trig = make_blend_trigger(kMeta, 0.0);
  Tensor x = test::random_tensor(4, 3, 16, 16, 42);
  Tensor out = apply_trigger(x, trig);
  CHECK(max_abs_diff(out, x) == 0.0);
}

TEST_CASE("apply_trigger blend convex combination") {
  TriggerSpec trig = make_blend_trigger(kMeta, 0.2);
  trig.pattern.fill(1.0);
  Tensor x(1, 3, 16, 16);
  x.fill(0.5);
  Tensor out = apply_trigger(x, trig);
  for (double v : out.v) CHECK(v == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("apply_trigger patch with all-ones mask returns the pattern") {
  TriggerSpec trig = make_patch_trigger(kMeta, 16, 1.0);  // full-size patch
  trig.mask.fill(1.0);
  for (size_t i = 0; i < trig.pattern.v.size(); ++i)
    trig.pattern.v[i] = static_cast<double>(i % 97) / 96.0;
  Tensor x = test::random_tensor(2, 3, 16, 16, 7);
  Tensor out = apply_trigger(x, trig);
  for (int64_t i = 0; i < out.n; ++i)
    CHECK(max_abs_diff(out.slice(i, 1), trig.pattern) == 0.0);
}

TEST_CASE("apply_trigger rejects shape mismatch and keeps input intact") {
  TriggerSpec trig = make_patch_trigger(kMeta);
  Tensor wrong(1, 3, 8, 8);
  CHECK_THROWS_AS(apply_trigger(wrong, trig), std::invalid_argument);

  Tensor x = test::random_tensor(1, 3, 16, 16, 3);
  Tensor before = x;
  (void)apply_trigger(x, trig);
  CHECK(max_abs_diff(x, before) == 0.0);  // no mutation
}

TEST_CASE("patch trigger application is idempotent") {
  TriggerSpec trig = make_patch_trigger(kMeta, 3, 1.0);
  Tensor x = test::random_tensor(3, 3, 16, 16, 11);
  Tensor once = apply_trigger(x, trig);
  Tensor twice = apply_trigger(once, trig);
  CHECK(max_abs_diff(once, twice) == 0.0);
}

TEST_CASE("blend output lies between min and max of inputs") {
  TriggerSpec trig = make_blend_trigger(kMeta, 0.37);
  Tensor x = test::random_tensor(2, 3, 16, 16, 13);
  Tensor out = apply_trigger(x, trig);
  for (int64_t i = 0; i < out.n; ++i) {
    auto xi = x.sample(i);
    auto oi = out.sample(i);
    for (size_t e = 0; e < xi.size(); ++e) {
      const double d = trig.pattern.v[e];
      CHECK(oi[e] >= std::min(xi[e], d) - 1e-12);
      CHECK(oi[e] <= std::max(xi[e], d) + 1e-12);
    }
  }
}

TEST_CASE("target_label modes") {
  PoisonPlan one{PoisonMode::kAllToOne, 0, 0.1, 1};
  CHECK(target_label(7, one, kMeta) == 0);
  PoisonPlan all{PoisonMode::kAllToAll, 0, 0.1, 1};
  CHECK(target_label(9, all, kMeta) == 0);
  CHECK(target_label(3, all, kMeta) == 4);
  CHECK_THROWS_AS(target_label(10, one, kMeta), std::invalid_argument);
}

TEST_CASE("all_to_all is a fixed-point-free permutation") {
  PoisonPlan all{PoisonMode::kAllToAll, 0, 0.1, 1};
  std::set<int64_t> seen;
  for (int64_t y = 0; y < kMeta.num_classes; ++y) {
    const int64_t t = target_label(y, all, kMeta);
    CHECK(t != y);
    seen.insert(t);
  }
  CHECK(seen.size() == static_cast<size_t>(kMeta.num_classes));
}

TEST_CASE("poison_dataset counts, determinism and untouched remainder") {
  Dataset ds = test::random_dataset(kMeta, 100, 99);
  TriggerSpec trig = make_patch_trigger(kMeta);
  PoisonPlan plan{PoisonMode::kAllToOne, 2, 0.1, 1234};

  auto res = poison_dataset(ds, plan, trig);
  CHECK(res.poisoned_indices.size() == 10);
  CHECK(res.data.size() == ds.size());

  auto res2 = poison_dataset(ds, plan, trig);
  CHECK(res.poisoned_indices == res2.poisoned_indices);

  std::set<int64_t> poisoned(res.poisoned_indices.begin(), res.poisoned_indices.end());
  for (int64_t i = 0; i < ds.size(); ++i) {
    if (poisoned.count(i)) {
      CHECK(res.data.labels[static_cast<size_t>(i)] == 2);
    } else {
      CHECK(res.data.labels[static_cast<size_t>(i)] ==
            ds.labels[static_cast<size_t>(i)]);
      CHECK(max_abs_diff(res.data.images.slice(i, 1), ds.images.slice(i, 1)) == 0.0);
    }
  }
}

TEST_CASE("poison_dataset edge ratios") {
  Dataset ds = test::random_dataset(kMeta, 20, 5);
  TriggerSpec trig = make_patch_trigger(kMeta);

  PoisonPlan zero{PoisonMode::kAllToOne, 0, 0.0, 1};
  auto res = poison_dataset(ds, zero, trig);
  CHECK(res.poisoned_indices.empty());
  CHECK(max_abs_diff(res.data.images, ds.images) == 0.0);

  PoisonPlan bad{PoisonMode::kAllToOne, 0, 1.5, 1};
  CHECK_THROWS_AS(poison_dataset(ds, bad, trig), std::invalid_argument);
}

TEST_CASE("split_clean_subset sizes") {
  // floor(fraction*N) at the paper's 5% operating point
  Dataset big;
  big.meta = DatasetMeta{2, 1, 12, 12};
  big.images = Tensor(50000, 1, 12, 12);
  big.labels.assign(50000, 0);
  auto [sub, rest] = split_clean_subset(big, 0.05, 1);
  CHECK(sub.size() == 2500);
  CHECK(rest.size() == 47500);
}

TEST_CASE("split_clean_subset degenerate fractions and membership") {
  Dataset ds = test::random_dataset(kMeta, 40, 17);
  // tag each sample so provenance is checkable
  for (int64_t i = 0; i < ds.size(); ++i) ds.images.at(i, 0, 0, 0) = static_cast<double>(i) / 64.0;

  auto [all, none] = split_clean_subset(ds, 1.0, 3);
  CHECK(all.size() == 40);
  CHECK(none.size() == 0);
  std::multiset<double> orig, got;
  for (int64_t i = 0; i < 40; ++i) {
    orig.insert(ds.images.at(i, 0, 0, 0));
    got.insert(all.images.at(i, 0, 0, 0));
  }
  CHECK(orig == got);  // a permutation of the full dataset

  auto [empty, rest] = split_clean_subset(ds, 0.0, 3);
  CHECK(empty.size() == 0);
  CHECK(rest.size() == 40);

  auto [sub_a, rest_a] = split_clean_subset(ds, 0.25, 9);
  auto [sub_b, rest_b] = split_clean_subset(ds, 0.25, 9);
  CHECK(max_abs_diff(sub_a.images, sub_b.images) == 0.0);
  CHECK(sub_a.size() + rest_a.size() == 40);
}

TEST_CASE("dataset disk round trip") {
  Dataset ds = test::random_dataset(kMeta, 12, 23);
  const auto dir = std::filesystem::temp_directory_path() / "polarize_ds_test";
  std::filesystem::remove_all(dir);
  save_dataset(dir, ds);
  Dataset back = load_dataset(dir);
  CHECK(back.meta == ds.meta);
  CHECK(back.labels == ds.labels);
  // storage is float32, so round trip is exact only to f32 resolution
  CHECK(max_abs_diff(back.images, ds.images) < 1e-7);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic dataset is deterministic, balanced and in range") {
  Dataset a = make_synthetic_dataset(kMeta, 50, 77);
  Dataset b = make_synthetic_dataset(kMeta, 50, 77);
  CHECK(max_abs_diff(a.images, b.images) == 0.0);
  CHECK(a.labels == b.labels);
  for (double v : a.images.v) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  std::vector<int> counts(10, 0);
  for (int64_t y : a.labels) counts[static_cast<size_t>(y)]++;
  for (int c : counts) CHECK(c == 5);
}
