#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "aag/data.hpp"
#include "aag/training.hpp"
#include "json.hpp"

namespace aag {

enum ExitCode { kExitOk = 0, kExitRuntime = 1, kExitBadInput = 2, kExitUnsupported = 3 };

// Fully resolved arguments of one command. Written as config.json next to
// the command's outputs; `aag rerun config.json` executes it again.
struct RunConfig {
  std::string command;
  std::string dataset;
  std::string out;
  std::string model = "attention-net";
  std::size_t input_size = 64;
  std::size_t base_channels = 0;  // 0 keeps the backbone's default width
  bool gender_augmentation = true;
  bool detach_gender = false;
  TrainConfig train;
  std::vector<std::string> weights;
  std::vector<std::string> images;
  std::uint64_t split_seed = 0;
  std::size_t subset = 0;  // 0 = all records
  std::string partition = "test";
  std::string resume;
  bool allow_config_mismatch = false;
  bool per_channel = false;

  MultiTaskModelSpec model_spec() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

// First `n` records ordered by a keyed hash of their filenames; independent
// of listing order. n = 0 returns everything.
std::vector<SampleRecord> take_subset(std::vector<SampleRecord> records, std::size_t n, std::uint64_t seed);

// Runs a resolved command, writing results under cfg.out. Throws aag errors.
void execute(const RunConfig& cfg, std::ostream& out);

// Parses argv (flags, then AAG_* environment variables, then defaults),
// executes and maps failures to exit codes.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace aag
