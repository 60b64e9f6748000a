#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polarize/common.hpp"

namespace polarize {

nlohmann::json load_json_file(const std::filesystem::path& file);

/// Rejects unknown keys so config typos fail fast instead of silently using
/// defaults.
void require_known_keys(const nlohmann::json& obj, const std::string& section,
                        const std::vector<std::string>& allowed);

/// 8-hex-digit digest of a canonically serialized config.
std::string config_hash(const nlohmann::json& config);

uint64_t file_checksum(const std::filesystem::path& file);

/// <out_root>/<command>-<UTC timestamp>-<config hash>; created on disk.
std::filesystem::path make_run_dir(const std::filesystem::path& out_root,
                                   const std::string& command,
                                   const nlohmann::json& config);

/// Collects a run's artifacts and finalizes manifest.json. Every file the run
/// writes must go through `write_*` or be `note`d; the manifest lists them
/// all, plus input hashes, the resolved config, seeds, wall time and the
/// metric summary.
class RunWriter {
 public:
  RunWriter(std::filesystem::path run_dir, std::string command,
            nlohmann::json resolved_config);

  const std::filesystem::path& dir() const { return dir_; }

  void write_text(const std::string& rel_path, const std::string& content);
  void write_json(const std::string& rel_path, const nlohmann::json& j);
  /// Register an artifact produced by other code (checkpoints, datasets).
  void note(const std::string& rel_path);
  void note_input(const std::filesystem::path& file);

  void set_metrics(nlohmann::json metrics) { metrics_ = std::move(metrics); }
  void set_seeds(nlohmann::json seeds) { seeds_ = std::move(seeds); }

  /// Writes manifest.json; call exactly once, last.
  void finalize();

 private:
  std::filesystem::path dir_;
  std::string command_;
  nlohmann::json config_;
  nlohmann::json metrics_;
  nlohmann::json seeds_;
  nlohmann::json input_hashes_;
  std::vector<std::string> outputs_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace polarize
