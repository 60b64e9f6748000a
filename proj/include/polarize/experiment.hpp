#pragma once

#include <filesystem>

#include <nlohmann/json.hpp>

#include "polarize/defense.hpp"
#include "polarize/evalkit.hpp"
#include "polarize/nn.hpp"
#include "polarize/poison.hpp"

namespace polarize {

/// Experiment drivers behind the CLI subcommands. Each takes the user config
/// (already parsed JSON), resolves defaults, validates strictly (unknown keys
/// and out-of-range values raise ConfigError), executes, and fills `run_dir`
/// with artifacts plus a manifest. Returns the metric summary.

nlohmann::json run_attack(const nlohmann::json& config,
                          const std::filesystem::path& run_dir);
nlohmann::json run_defend(const nlohmann::json& config,
                          const std::filesystem::path& run_dir);
nlohmann::json run_eval(const nlohmann::json& config,
                        const std::filesystem::path& run_dir);
nlohmann::json run_sweep(const nlohmann::json& config,
                         const std::filesystem::path& run_dir);

// Shared pieces, exposed for tests and the python bindings.

nlohmann::json resolve_attack_section(const nlohmann::json& attack,
                                      const DatasetMeta& meta);
nlohmann::json resolve_defense_section(const nlohmann::json& defense,
                                       const DatasetMeta& meta);

TriggerSpec trigger_from_json(const nlohmann::json& resolved_trigger,
                              const DatasetMeta& meta);
PoisonPlan plan_from_json(const nlohmann::json& resolved_attack);
DefenseConfig defense_config_from_json(const nlohmann::json& resolved_defense);

/// "badnets-a2o", "badnets-a2a" or "blended".
std::string attack_label(const TriggerSpec& trig, const PoisonPlan& plan);

nlohmann::json report_to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

}  // namespace polarize
