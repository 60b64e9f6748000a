#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "polarize/dataset.hpp"
#include "polarize/poison.hpp"

namespace polarize {

/// Metrics are fractions in [0,1] everywhere; percent formatting is a
/// reporting concern only.
struct EvalReport {
  double acc = 0.0;
  double asr = 0.0;
  std::optional<double> der;  // only when a pre-defense reference exists
  int64_t n_clean_eval = 0;
  int64_t n_poison_eval = 0;
};

using PredictFn = std::function<std::vector<int64_t>(const Tensor&)>;

double accuracy(const PredictFn& predict, const Dataset& clean_test,
                int batch_size = 256);

/// Fraction of eligible triggered samples predicted as their target label.
/// all_to_one excludes samples whose ground truth already equals the target.
double attack_success_rate(const PredictFn& predict, const Dataset& clean_test,
                           const TriggerSpec& trig, const PoisonPlan& plan,
                           int batch_size = 256);

/// [max(0, pre.asr - post.asr) - max(0, pre.acc - post.acc) + 1] / 2
double defense_effectiveness_rating(const EvalReport& pre, const EvalReport& post);

/// ACC + ASR in one pass; fills der when `pre` is given.
EvalReport evaluate(const PredictFn& predict, const Dataset& clean_test,
                    const TriggerSpec& trig, const PoisonPlan& plan,
                    const EvalReport* pre = nullptr, int batch_size = 256);

/// One CSV row per report; columns
/// attack,variant,acc,asr,der,n_clean_eval,n_poison_eval,seed.
struct ReportRow {
  std::string attack;
  std::string variant;
  EvalReport report;
  uint64_t seed = 0;
};
std::string report_csv(const std::vector<ReportRow>& rows);

}  // namespace polarize
