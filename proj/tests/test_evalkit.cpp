#include <doctest.h>

#include <algorithm>
#include <random>

#include "polarize/evalkit.hpp"
#include "test_util.hpp"

using namespace polarize;

namespace {

const DatasetMeta kMeta{10, 3, 16, 16};

// deterministic stub predictor: classifies by the brightness of pixel (0,0,0)
PredictFn fixed_predictor(std::vector<int64_t> answers) {
  auto state = std::make_shared<std::pair<std::vector<int64_t>, size_t>>(
      std::move(answers), 0);
  return [state](const Tensor& batch) {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < batch.n; ++i) out.push_back(state->first[state->second++]);
    return out;
  };
}

}  // namespace

TEST_CASE("accuracy on simple outcomes") {
  Dataset ds = test::random_dataset(kMeta, 4, 1);
  ds.labels = {1, 2, 3, 4};
  CHECK(accuracy(fixed_predictor({1, 2, 3, 4}), ds) == 1.0);
  CHECK(accuracy(fixed_predictor({0, 0, 0, 0}), ds) == 0.0);
  CHECK(accuracy(fixed_predictor({1, 2, 3, 0}), ds) == 0.75);

  Dataset empty;
  empty.meta = kMeta;
  empty.images = Tensor(0, 3, 16, 16);
  CHECK_THROWS_AS(accuracy(fixed_predictor({}), empty), std::invalid_argument);
}

TEST_CASE("attack_success_rate counts eligible triggered predictions") {
  Dataset ds = test::random_dataset(kMeta, 5, 2);
  ds.labels = {0, 1, 2, 3, 4};
  TriggerSpec trig = make_patch_trigger(kMeta);
  PoisonPlan plan{PoisonMode::kAllToOne, 0, 0.1, 1};

  // label-0 sample is excluded; 4 eligible
  CHECK(attack_success_rate(fixed_predictor({0, 0, 0, 0}), ds, trig, plan) == 1.0);
  CHECK(attack_success_rate(fixed_predictor({1, 2, 3, 4}), ds, trig, plan) == 0.0);
  CHECK(attack_success_rate(fixed_predictor({0, 0, 3, 4}), ds, trig, plan) == 0.5);

  Dataset only_target = test::random_dataset(kMeta, 3, 3);
  only_target.labels = {0, 0, 0};
  CHECK_THROWS_AS(attack_success_rate(fixed_predictor({}), only_target, trig, plan),
                  std::invalid_argument);

  // all_to_all: every sample eligible, target is the successor class
  PoisonPlan a2a{PoisonMode::kAllToAll, 0, 0.1, 1};
  CHECK(attack_success_rate(fixed_predictor({1, 2, 3, 4, 5}), ds, trig, a2a) == 1.0);
}

TEST_CASE("DER matches the published rows") {
  auto make = [](double acc, double asr) {
    EvalReport r;
    r.acc = acc;
    r.asr = asr;
    return r;
  };
  // no-change baseline
  CHECK(defense_effectiveness_rating(make(0.9, 0.9), make(0.9, 0.9)) == 0.5);
  // printed row: 91.82/93.79 -> 88.93/1.26 gives DER 94.82
  CHECK(defense_effectiveness_rating(make(0.9182, 0.9379), make(0.8893, 0.0126)) ==
        doctest::Approx(0.9482).epsilon(1e-12));
  // ACC improvement is floored at zero
  CHECK(defense_effectiveness_rating(make(0.80, 0.75), make(0.85, 0.25)) ==
        doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("evaluate fills counts and DER") {
  Dataset ds = test::random_dataset(kMeta, 6, 4);
  ds.labels = {0, 1, 2, 3, 4, 5};
  TriggerSpec trig = make_patch_trigger(kMeta);
  PoisonPlan plan{PoisonMode::kAllToOne, 0, 0.1, 1};

  EvalReport pre;
  pre.acc = 0.9;
  pre.asr = 0.95;
  // 6 clean predictions then 5 triggered ones (label 0 excluded)
  auto pf = fixed_predictor({0, 1, 2, 3, 4, 5, 0, 0, 0, 0, 0});
  EvalReport r = evaluate(pf, ds, trig, plan, &pre);
  CHECK(r.acc == 1.0);
  CHECK(r.asr == 1.0);
  CHECK(r.n_clean_eval == 6);
  CHECK(r.n_poison_eval == 5);
  REQUIRE(r.der.has_value());
  // dASR=-0.05 floors to 0, dACC=-0.1 floors to 0 -> 0.5
  CHECK(*r.der == 0.5);
}

TEST_CASE("accuracy is permutation invariant") {
  Dataset ds = test::random_dataset(kMeta, 30, 5);
  // predictor keyed on image content, not position
  auto content_pf = [](const Tensor& batch) {
    std::vector<int64_t> out;
    for (int64_t i = 0; i < batch.n; ++i)
      out.push_back(static_cast<int64_t>(batch.sample(i)[0] * 10) % 10);
    return out;
  };
  const double base = accuracy(content_pf, ds);

  Dataset shuffled = ds;
  std::vector<int64_t> perm(static_cast<size_t>(ds.size()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(8));
  for (int64_t i = 0; i < ds.size(); ++i) {
    auto src = ds.images.sample(perm[static_cast<size_t>(i)]);
    std::copy(src.begin(), src.end(), shuffled.images.sample(i).begin());
    shuffled.labels[static_cast<size_t>(i)] =
        ds.labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
  }
  CHECK(accuracy(content_pf, shuffled) == base);
}

TEST_CASE("report_csv emits the documented columns") {
  EvalReport r;
  r.acc = 0.875;
  r.asr = 0.0125;
  r.der = 0.9;
  r.n_clean_eval = 2000;
  r.n_poison_eval = 1800;
  const std::string csv = report_csv({{"badnets-a2o", "NPD", r, 42}});
  CHECK(csv.rfind("attack,variant,acc,asr,der,n_clean_eval,n_poison_eval,seed\n", 0) == 0);
  CHECK(csv.find("badnets-a2o,NPD,0.875000,0.012500,0.900000,2000,1800,42\n") !=
        std::string::npos);
}
