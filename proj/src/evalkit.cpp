#include "polarize/evalkit.hpp"

#include <algorithm>
#include <cstdio>

namespace polarize {

namespace {

std::vector<int64_t> predict_all(const PredictFn& predict, const Tensor& images,
                                 int batch_size) {
  std::vector<int64_t> out;
  out.reserve(static_cast<size_t>(images.n));
  for (int64_t off = 0; off < images.n; off += batch_size) {
    const int64_t cnt = std::min<int64_t>(batch_size, images.n - off);
    auto preds = predict(images.slice(off, cnt));
    PZ_REQUIRE(static_cast<int64_t>(preds.size()) == cnt,
               "predict returned wrong batch size");
    out.insert(out.end(), preds.begin(), preds.end());
  }
  return out;
}

}  // namespace

double accuracy(const PredictFn& predict, const Dataset& clean_test, int batch_size) {
  validate_dataset(clean_test);
  PZ_REQUIRE(clean_test.size() > 0, "empty evaluation set");
  auto preds = predict_all(predict, clean_test.images, batch_size);
  int64_t correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == clean_test.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(clean_test.size());
}

double attack_success_rate(const PredictFn& predict, const Dataset& clean_test,
                           const TriggerSpec& trig, const PoisonPlan& plan,
                           int batch_size) {
  validate_dataset(clean_test);
  PZ_REQUIRE(clean_test.size() > 0, "empty evaluation set");

  // Select eligible samples first so triggered prediction runs only on them.
  std::vector<int64_t> eligible;
  for (int64_t i = 0; i < clean_test.size(); ++i) {
    const int64_t y = clean_test.labels[static_cast<size_t>(i)];
    if (plan.mode == PoisonMode::kAllToOne && y == plan.target) continue;
    eligible.push_back(i);
  }
  PZ_REQUIRE(!eligible.empty(), "no eligible samples for ASR evaluation");

  int64_t hits = 0;
  for (size_t off = 0; off < eligible.size(); off += static_cast<size_t>(batch_size)) {
    const size_t cnt = std::min<size_t>(batch_size, eligible.size() - off);
    Tensor batch(static_cast<int64_t>(cnt), clean_test.images.c, clean_test.images.h,
                 clean_test.images.w);
    std::vector<int64_t> targets(cnt);
    for (size_t i = 0; i < cnt; ++i) {
      const int64_t src = eligible[off + i];
      auto s = clean_test.images.sample(src);
      std::copy(s.begin(), s.end(), batch.sample(static_cast<int64_t>(i)).begin());
      targets[i] =
          target_label(clean_test.labels[static_cast<size_t>(src)], plan, clean_test.meta);
    }
    auto preds = predict(apply_trigger(batch, trig));
    for (size_t i = 0; i < cnt; ++i)
      if (preds[i] == targets[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(eligible.size());
}

double defense_effectiveness_rating(const EvalReport& pre, const EvalReport& post) {
  const double d_asr = pre.asr - post.asr;
  const double d_acc = pre.acc - post.acc;
  return (std::max(0.0, d_asr) - std::max(0.0, d_acc) + 1.0) / 2.0;
}

EvalReport evaluate(const PredictFn& predict, const Dataset& clean_test,
                    const TriggerSpec& trig, const PoisonPlan& plan,
                    const EvalReport* pre, int batch_size) {
  EvalReport r;
  r.acc = accuracy(predict, clean_test, batch_size);
  r.asr = attack_success_rate(predict, clean_test, trig, plan, batch_size);
  r.n_clean_eval = clean_test.size();
  int64_t eligible = 0;
  for (int64_t i = 0; i < clean_test.size(); ++i) {
    const int64_t y = clean_test.labels[static_cast<size_t>(i)];
    if (plan.mode == PoisonMode::kAllToOne && y == plan.target) continue;
    ++eligible;
  }
  r.n_poison_eval = eligible;
  if (pre) r.der = defense_effectiveness_rating(*pre, r);
  return r;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::string out = "attack,variant,acc,asr,der,n_clean_eval,n_poison_eval,seed\n";
  char buf[256];
  for (const auto& r : rows) {
    if (r.report.der)
      std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%.6f,%lld,%lld,%llu\n",
                    r.attack.c_str(), r.variant.c_str(), r.report.acc, r.report.asr,
                    *r.report.der, static_cast<long long>(r.report.n_clean_eval),
                    static_cast<long long>(r.report.n_poison_eval),
                    static_cast<unsigned long long>(r.seed));
    else
      std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,,%lld,%lld,%llu\n",
                    r.attack.c_str(), r.variant.c_str(), r.report.acc, r.report.asr,
                    static_cast<long long>(r.report.n_clean_eval),
                    static_cast<long long>(r.report.n_poison_eval),
                    static_cast<unsigned long long>(r.seed));
    out += buf;
  }
  return out;
}

}  // namespace polarize
