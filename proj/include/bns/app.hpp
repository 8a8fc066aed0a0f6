#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "bns/bench.hpp"
#include "bns/microbn.hpp"
#include "bns/net.hpp"

namespace bns::app {

enum ExitCode : int { ok = 0, crash = 1, invalid_config = 2, diverged = 3 };

/// Schema violation; `field` is the dotted path of the offending key.
class ConfigError : public std::invalid_argument {
public:
  ConfigError(std::string field, const std::string& what)
      : std::invalid_argument("config field '" + field + "': " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

private:
  std::string field_;
};

inline const std::vector<std::string>& commands() {
  static const std::vector<std::string> c{"train", "microbn", "bench", "analyze", "decay-sweep"};
  return c;
}

struct RunConfig {
  std::string command;
  std::vector<std::uint64_t> seeds{1};
  SamplingStrategy strategy;
  VdnConfig vdn;
  /// Moving-average weight of the newest estimate.
  double decay = 0.9;
  TrainConfig train;
  BlobParams dataset;
  std::vector<std::size_t> channels{8, 8, 8};
  MicroBnConfig microbn;
  std::size_t bench_repetitions = 7;
  std::vector<BenchCell> bench_grid;
  std::vector<double> alphas{0.5, 0.7, 0.9, 1.0};
  std::filesystem::path output_dir = "out";
  /// Optional fitted dataset statistics for VDN.
  std::optional<std::filesystem::path> vdn_stats;

  /// Every field with defaults filled in, as recorded in manifest.json.
  nlohmann::json resolved() const;
};

/// Validates `j` against the schema. Unknown keys are errors.
RunConfig parse_config(const nlohmann::json& j, const std::string& command);
RunConfig load_config(const std::filesystem::path& path, const std::string& command);

/// Overrides applied after parsing: --seed beats BNSAMPLE_SEED beats the file.
void apply_overrides(RunConfig& cfg, std::optional<std::uint64_t> seed, std::optional<std::filesystem::path> out);

/// FNV-1a 64 of the resolved config and version, as 16 hex digits.
std::string manifest_hash(const nlohmann::json& resolved, const std::string& version);

std::string version();

struct Options {
  std::string command;
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::size_t jobs = 1;
};

/// Runs one command end to end and returns the process exit code.
int run(const Options& opts, std::ostream& log);

}  // namespace bns::app
