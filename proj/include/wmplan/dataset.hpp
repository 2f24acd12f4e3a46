#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "wmplan/env.hpp"

namespace wmplan {

enum class Policy { random, scripted_door };

std::string to_string(Policy p);
Policy policy_from_string(const std::string& s);

inline constexpr int kActionDim = 2;
inline constexpr int kProprioDim = 4;

/// One rollout. Stored in float32 so that files round-trip exactly.
struct Trajectory {
  int grid = 0;
  std::uint64_t seed = 0;
  std::vector<float> rasters;  // (T+1) * grid^2
  std::vector<float> proprio;  // (T+1) * 4, raw (pos, vel)
  std::vector<float> actions;  // T * 2, raw forces

  std::size_t num_actions() const { return actions.size() / kActionDim; }
  std::size_t num_observations() const { return proprio.size() / kProprioDim; }
  Observation observation(std::size_t i) const;
  Action action(std::size_t i) const;
};

struct Dataset {
  EnvConfig env;
  Policy policy = Policy::random;
  int frameskip = 5;
  std::uint64_t seed = 0;
  std::vector<Trajectory> trajectories;
};

struct NormStats {
  Vec action_mean = Vec::Zero(kActionDim);
  Vec action_std = Vec::Ones(kActionDim);
  Vec proprio_mean = Vec::Zero(kProprioDim);
  Vec proprio_std = Vec::Ones(kProprioDim);

  Vec normalize_action(const Vec& a) const;
  Vec denormalize_action(const Vec& a) const;
  Vec normalize_proprio(const Vec& p) const;
};

inline constexpr double kStdFloor = 1e-6;

/// Window of W+1 observations and W+1 actions starting at `offset`.
struct SliceRecord {
  std::size_t trajectory = 0;
  std::size_t offset = 0;
  std::size_t length = 0;  // W+1
};

struct SliceSet {
  std::vector<SliceRecord> slices;
  std::size_t skipped_trajectories = 0;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/**
 * @brief Rolls `policy` in the environment and records n_traj trajectories.
 *
 * Each model-level action is held for `frameskip` simulator steps. Every
 * trajectory draws from its own stream keyed by (seed, index), so the result
 * does not depend on `threads`.
 */
Dataset generate(const EnvConfig& env, Policy policy, std::size_t n_traj, std::size_t traj_len,
                 std::uint64_t seed, int frameskip, int threads = 1);

/// Population mean/std over the given trajectories, std floored at kStdFloor.
NormStats compute_norm_stats(const Dataset& data, std::span<const std::size_t> trajectories);
NormStats compute_norm_stats(const Dataset& data);

/// Stride-1 windows of W+1 observations and W+1 actions; short trajectories are skipped.
SliceSet slice(const Dataset& data, std::span<const std::size_t> trajectories, int W);
SliceSet slice(const Dataset& data, int W);

/// Trajectory-level split: floor(train_frac * n) trajectories go to train.
Split split(std::size_t n, double train_frac, std::uint64_t seed);

std::vector<std::size_t> all_indices(std::size_t n);

/// Writes `<stem>.manifest.json` and `<stem>.bin`.
void save_dataset(const Dataset& data, const std::filesystem::path& stem, const Split& split,
                  const NormStats& stats, int slice_W);

struct LoadedDataset {
  Dataset data;
  Split split;
  NormStats stats;
  std::string env_hash;
};

LoadedDataset load_dataset(const std::filesystem::path& stem);

/// Stable fingerprint of an environment configuration.
std::string env_hash(const EnvConfig& env);

}  // namespace wmplan
