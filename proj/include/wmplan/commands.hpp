#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wmplan/config.hpp"

namespace wmplan {

/// Flags shared by every subcommand.
struct CommandOptions {
  std::filesystem::path config;
  /// Overrides the seed the command consumes (dataset, training, episode or eval base seed).
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::optional<std::string> out;
  std::optional<std::string> checkpoint;
  /// plan: use the initial state as the goal.
  bool self_goal = false;
  /// sweep: the varied axis.
  std::string axis;
};

enum class SweepAxis { planner, rollout_steps, proprio, W, conditioning, depth, width };

SweepAxis sweep_axis_from_string(const std::string& s);

/**
 * Config file with the command-line overrides applied. Unless
 * `dataset_follows_out`, an implicit dataset stem stays under the configured
 * out_dir when --out redirects the outputs.
 */
RunConfig resolve_config(const CommandOptions& opts, bool dataset_follows_out = false);

std::filesystem::path dataset_stem(const RunConfig& cfg);

void cmd_generate(const CommandOptions& opts);
void cmd_train(const CommandOptions& opts);
void cmd_plan(const CommandOptions& opts);
void cmd_eval(const CommandOptions& opts);
void cmd_sweep(const CommandOptions& opts);

/// Runs a subcommand and maps failures to exit codes: 0 ok, 2 config error, 3 runtime failure.
int run_command(const std::string& name, const CommandOptions& opts);

/// Checkpoint files matching a path whose file name may contain * and ? wildcards, ordered by epoch.
std::vector<std::filesystem::path> glob_checkpoints(const std::string& pattern);

/**
 * @brief Exclusive claim on an output directory.
 *
 * Creation fails when another invocation holds the lock; the file is removed
 * on destruction.
 */
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& dir);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace wmplan
