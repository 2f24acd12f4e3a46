#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "wmplan/planning.hpp"
#include "wmplan/training.hpp"

namespace wmplan {

struct SuccessSummary {
  double rate = 0.0;
  std::vector<EpisodeResult> episodes;
};

/// Runs episodes with seeds seed_base .. seed_base+e-1, in parallel over seeds.
SuccessSummary success_rate(const EnvConfig& env, const Controller& controller, const MpcConfig& mpc, int episodes,
                            std::uint64_t seed_base, int threads = 1);

struct TrailingStat {
  double mean = 0.0;
  double std = 0.0;  // population
};

/// Mean and spread of the last min(n, len) values.
TrailingStat trailing_average(const std::vector<double>& series, int n);

/**
 * @brief Recursive prediction error on ground-truth actions.
 *
 * Every slice contributes prefixes p = 1..prefix_W of ground-truth frames;
 * horizon h compares the h-th recursive prediction with the true embedding
 * at p+h-1. The window holds at most Wp latents. Horizon 1 evaluates exactly
 * the teacher-forcing terms. Slices need prefix_W + horizons frames.
 */
UnrollErrors unroll_error(const WorldModel& model, const EmbeddedData& data, const std::vector<SliceRecord>& slices,
                          int prefix_W, int horizons, int Wp);

/// Linear read-out from visual embeddings to (x, y, vx, vy).
struct StateProbe {
  Mat weights;  // 4 x (D+1), last column is the bias
  bool used_ridge = false;

  Eigen::Vector4d decode(const Vec& z) const;
};

/// Least squares on the columns of `features` (D x n) against `targets` (4 x n); ridge 1e-6 when ill-conditioned.
StateProbe fit_state_probe(const Mat& features, const Mat& targets);
/// Probe over every observation of the given trajectories.
StateProbe fit_state_probe(const EmbeddedData& data, const Dataset& raw, const std::vector<std::size_t>& trajectories);

/// Ridge solution of min ||X w - y||^2 + lambda ||w||^2 per column of Y (rows of X are samples).
Mat ridge_solve(const Mat& X, const Mat& Y, double lambda);

struct ProbeErrors {
  std::vector<double> pos;  // mean position error per horizon
  std::vector<double> vel;
};

ProbeErrors probe_error(const WorldModel& model, const EmbeddedData& data, const Dataset& raw,
                        const std::vector<SliceRecord>& slices, const StateProbe& probe, int prefix_W, int horizons,
                        int Wp);

struct ActionScore {
  double error = 0.0;
  double score = 0.0;
};

/// Mean L1 error over both action dims and the rescaled score 800 * (0.1 - E), zero once E >= 0.1.
ActionScore action_error_and_score(const Mat& planned, const Mat& groundtruth);
double action_score(double error);

/// Rank correlation with average ranks for ties; absent when either series is constant.
std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys);
std::vector<double> average_ranks(const std::vector<double>& xs);

}  // namespace wmplan
