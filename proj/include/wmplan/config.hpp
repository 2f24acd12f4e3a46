#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "wmplan/dataset.hpp"
#include "wmplan/env.hpp"
#include "wmplan/model.hpp"
#include "wmplan/planning.hpp"
#include "wmplan/training.hpp"

namespace wmplan {

struct DatasetConfig {
  Policy policy = Policy::scripted_door;
  int n_traj = 1920;
  int traj_len = 50;
  int frameskip = 5;
  double train_frac = 0.9;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  int episodes = 96;
  int trailing_n = 10;
  std::uint64_t seed_base = 1000;
  int horizons = 5;
};

struct IoConfig {
  std::string out_dir = "runs/default";
  /// Dataset stem; empty means `<out_dir>/dataset`.
  std::string dataset;
  /// Checkpoint read by `plan` and, as a glob, by `eval`.
  std::string checkpoint;
};

/// Planning part of the planner section: objective and MPC settings.
struct PlannerSection {
  PlannerConfig optimizer;
  PlanProblem problem;
  int m = 6;
  int M = 30;
};

/**
 * @brief Complete run description, one section per module.
 *
 * Loading rejects unknown keys and wrong types with a ConfigError naming the
 * offending key, then checks cross-section consistency.
 */
struct RunConfig {
  EnvConfig env;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig training;
  PlannerSection planner;
  EvalConfig eval;
  IoConfig io;

  MpcConfig mpc() const { return MpcConfig{planner.m, planner.M, dataset.frameskip}; }
  /// Throws ConfigError on inconsistent sections.
  void validate() const;
};

nlohmann::json env_to_json(const EnvConfig& env);
EnvConfig env_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::json model_to_json(const ModelConfig& m);
ModelConfig model_from_json(const nlohmann::json& j, const std::string& path);
nlohmann::json norm_stats_to_json(const NormStats& s);
NormStats norm_stats_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace wmplan
