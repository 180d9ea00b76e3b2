#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

namespace hagd {

// Flat `key = value` configuration. Every key has a default; unknown keys and
// malformed values raise ConfigError.
class RunConfig {
 public:
  RunConfig();  // all defaults
  static RunConfig parse(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  // "key=value"
  void apply_override(const std::string& assignment);

  const std::string& get(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;
  std::uint64_t seed() const { return count("seed"); }

  // `key = value` lines, sorted, for keys starting with any of the prefixes
  // (all keys when empty).
  std::string echo(const std::vector<std::string>& prefixes = {}) const;
  nlohmann::json to_json(const std::vector<std::string>& prefixes = {}) const;

 private:
  std::map<std::string, std::string> values_;
};

enum class Stage { train_model, train_transcoders, build_graph, build_hierarchy, search, validate, transfer, report };

inline constexpr Stage all_stages[] = {Stage::train_model,     Stage::train_transcoders, Stage::build_graph,
                                       Stage::build_hierarchy, Stage::search,            Stage::validate,
                                       Stage::transfer,        Stage::report};

std::string to_string(Stage s);
Stage stage_from_string(const std::string& s);  // ConfigError on unknown names
std::vector<Stage> stage_dependencies(Stage s);

// Hash of the configuration a stage consumes, chained through the hashes of
// the stages it depends on.
std::string stage_config_hash(const RunConfig& cfg, Stage s);

// Paths are relative to the run directory.
struct ArtifactRecord {
  std::string path;
  std::string hash;
  bool operator==(const ArtifactRecord&) const = default;
};

struct StageRecord {
  std::string config_hash;
  std::vector<ArtifactRecord> inputs;
  std::vector<ArtifactRecord> artifacts;
  std::vector<std::string> volatile_artifacts;  // wall-clock content, not hashed
};

struct Manifest {
  std::map<std::string, StageRecord> stages;

  static Manifest load(const std::filesystem::path& run_dir);  // empty when absent
  // Written to a temporary file and renamed into place.
  void save(const std::filesystem::path& run_dir) const;
};

// One run directory, single writer.
class Pipeline {
 public:
  Pipeline(RunConfig cfg, std::filesystem::path run_dir);

  // Checks upstream artifacts (DependencyError when missing, StalenessError
  // when their hash or producing config no longer matches), runs the stage and
  // records it in the manifest.
  void run_stage(Stage s);
  void run_all();

  const RunConfig& config() const { return cfg_; }
  const std::filesystem::path& dir() const { return dir_; }
  // Stages missing from the manifest, in pipeline order.
  std::vector<Stage> missing_stages() const;

 private:
  void check_dependencies(Stage s, const Manifest& m) const;

  RunConfig cfg_;
  std::filesystem::path dir_;
};

// Files under the run directory not referenced by the manifest.
std::vector<std::string> orphans(const std::filesystem::path& run_dir);

}  // namespace hagd
