#include "polarize/runio.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>

namespace polarize {

nlohmann::json load_json_file(const std::filesystem::path& file) {
  std::ifstream f(file);
  if (!f.good()) throw ConfigError("cannot open config file: " + file.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed JSON in " + file.string() + ": " + e.what());
  }
}

void require_known_keys(const nlohmann::json& obj, const std::string& section,
                        const std::vector<std::string>& allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("unknown key '" + it.key() + "' in config section '" + section + "'");
  }
}

std::string config_hash(const nlohmann::json& config) {
  const std::string s = config.dump();  // nlohmann objects serialize key-sorted
  const uint64_t h = fnv1a64(s.data(), s.size());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08x", static_cast<uint32_t>(h ^ (h >> 32)));
  return buf;
}

uint64_t file_checksum(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  PZ_REQUIRE(f.good(), "cannot read file for hashing: " + file.string());
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f.read(buf, sizeof(buf)) || f.gcount() > 0)
    h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
  return h;
}

std::filesystem::path make_run_dir(const std::filesystem::path& out_root,
                                   const std::string& command,
                                   const nlohmann::json& config) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%S", &tm);
  std::filesystem::path dir =
      out_root / (command + "-" + stamp + "-" + config_hash(config));
  // multiple runs within one second get a numeric suffix
  int salt = 1;
  while (std::filesystem::exists(dir))
    dir = out_root / (command + "-" + stamp + "-" + config_hash(config) + "." +
                      std::to_string(salt++));
  std::filesystem::create_directories(dir);
  return dir;
}

RunWriter::RunWriter(std::filesystem::path run_dir, std::string command,
                     nlohmann::json resolved_config)
    : dir_(std::move(run_dir)),
      command_(std::move(command)),
      config_(std::move(resolved_config)),
      metrics_(nlohmann::json::object()),
      seeds_(nlohmann::json::object()),
      input_hashes_(nlohmann::json::object()),
      start_(std::chrono::steady_clock::now()) {
  std::filesystem::create_directories(dir_);
}

void RunWriter::write_text(const std::string& rel_path, const std::string& content) {
  const auto p = dir_ / rel_path;
  std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p);
  PZ_REQUIRE(f.good(), "cannot write " + p.string());
  f << content;
  outputs_.push_back(rel_path);
}

void RunWriter::write_json(const std::string& rel_path, const nlohmann::json& j) {
  write_text(rel_path, j.dump(2) + "\n");
}

void RunWriter::note(const std::string& rel_path) { outputs_.push_back(rel_path); }

void RunWriter::note_input(const std::filesystem::path& file) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(file_checksum(file)));
  input_hashes_[file.string()] = buf;
}

void RunWriter::finalize() {
  const double dur =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  nlohmann::json manifest{{"run_id", dir_.filename().string()},
                          {"command", command_},
                          {"config", config_},
                          {"seeds", seeds_},
                          {"input_hashes", input_hashes_},
                          {"outputs", outputs_},
                          {"duration_sec", dur},
                          {"metrics", metrics_}};
  std::ofstream f(dir_ / "manifest.json");
  PZ_REQUIRE(f.good(), "cannot write manifest");
  f << manifest.dump(2) << "\n";
}

}  // namespace polarize
