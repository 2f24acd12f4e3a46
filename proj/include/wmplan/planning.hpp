#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wmplan/dataset.hpp"
#include "wmplan/env.hpp"
#include "wmplan/model.hpp"

namespace wmplan {

enum class PlannerKind { cem, cma_diag, gd, adam };
enum class Distance { L1, L2 };

std::string to_string(PlannerKind k);
PlannerKind planner_kind_from_string(const std::string& s);
std::string to_string(Distance d);
Distance distance_from_string(const std::string& s);

struct PlannerConfig {
  PlannerKind kind = PlannerKind::cem;
  int N = 300;
  int J = 30;
  int K = 10;
  double mu0 = 0.0;
  double sigma0 = 1.0;
  /// Gradient planners: step size, per-iteration noise, Adam moments.
  double lr = 1.0;
  double sigma_noise = 0.003;
  double beta1 = 0.9;
  double beta2 = 0.995;
  double eps = 1e-8;
  /// Gradient planners start from N(mu0, sigma0^2) when true, from zeros otherwise.
  bool random_init = true;
  /// Optional bound on the norm of each sampled per-step action (normalized space).
  std::optional<double> action_clip;
  /// Diagonal CMA-ES: keep the best-ever point in every generation and shrink the initial scale.
  bool elitist = false;
  double sigma_floor = 1e-3;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
};

/**
 * Settings for `kind` derived from a sampling-planner configuration: the
 * sampling planners keep its budget, the gradient planners switch to their
 * own defaults (one candidate, J=500, step 1, sigma0 1, noise 0.003).
 */
PlannerConfig planner_for(PlannerKind kind, const PlannerConfig& base);

/// Sampling streams: candidate i of iteration t draws from Rng::stream(seed, {key, t, i}).
inline constexpr std::uint64_t kCemStreamKey = 0x43454dULL;
inline constexpr std::uint64_t kCmaStreamKey = 0x434d41ULL;
/// Gradient planners draw initialization and noise from Rng::stream(seed, {key}).
inline constexpr std::uint64_t kGradStreamKey = 0x475244ULL;

/// Step-size factor used by the elitist diagonal CMA-ES variant.
inline constexpr double kElitistScale = 0.895;

struct TraceRow {
  double best = 0.0;
  double mean = 0.0;
  double std = 0.0;
};

struct PlanResult {
  Mat best_actions;  // H x A, normalized space
  double best_cost = 0.0;
  std::vector<TraceRow> cost_trace;
  std::size_t evaluations = 0;
  /// Gradient steps whose gradient had to be zeroed because it was not finite.
  std::size_t nonfinite_gradients = 0;
  /// Set when no candidate of some iteration had a finite cost.
  bool degenerate = false;
};

/**
 * @brief Cost over flattened action sequences x (x[h*A + a]).
 *
 * Implementations must make evaluate() results independent of the thread
 * count and of how candidates are grouped.
 */
class PlanObjective {
 public:
  virtual ~PlanObjective() = default;
  virtual int horizon() const = 0;
  virtual int action_dim() const { return kActionDim; }
  int dim() const { return horizon() * action_dim(); }

  /// Costs of the columns of `candidates` (dim x n). Non-finite costs become +inf.
  virtual Vec evaluate(const Mat& candidates, int threads) const = 0;
  /// Cost and gradient at one point. Defaults to central differences.
  virtual double value_and_gradient(const Vec& x, Vec& grad) const;

  /// Per-coordinate bounds applied by gradient planners (empty = unbounded).
  Vec lower;
  Vec upper;
};

struct PlanProblem {
  int H = 6;
  double alpha = 0.1;
  int Wp = 2;
  Distance distance = Distance::L2;
  /// Permit Wp larger than the trained context (diagnostics only).
  bool allow_wide_window = false;

  void validate() const;
};

/// Latents produced by recursive prediction.
struct Unrolled {
  std::vector<LatentBatch> steps;  // steps[i] = latent after i actions (steps[0] is the encoding)
  /// Per predictor call: frame indices occupying the context, oldest first.
  std::vector<std::vector<int>> windows;
};

/**
 * Encodes `init`, then applies the actions (k x A, normalized) one predictor
 * call at a time, keeping at most Wp latents in the window.
 */
Unrolled unroll(const WorldModel& model, const NormStats& stats, const Observation& init, const Mat& actions, int Wp,
                int trained_context, bool allow_wide_window = false);

/// Planning cost against a goal observation, batched over candidates.
class WorldModelObjective : public PlanObjective {
 public:
  WorldModelObjective(const WorldModel& model, const NormStats& stats, const Observation& init,
                      const Observation& goal, const PlanProblem& problem, int trained_context);

  int horizon() const override { return problem_.H; }
  Vec evaluate(const Mat& candidates, int threads) const override;
  double value_and_gradient(const Vec& x, Vec& grad) const override;

  /// Cost of one candidate; with `grad`, also d cost / d x.
  Vec evaluate_chunk(const Mat& candidates, Mat* grad) const;

  const LatentBatch& start() const { return start_; }
  const LatentBatch& goal() const { return goal_; }

 private:
  const WorldModel& model_;
  PlanProblem problem_;
  LatentBatch start_;
  LatentBatch goal_;
};

/// Chunk of candidates evaluated together. Fixed so results do not depend on the thread count.
inline constexpr int kCandidateChunk = 64;

PlanResult cem_plan(const PlanObjective& obj, const PlannerConfig& cfg);
PlanResult cma_diag_plan(const PlanObjective& obj, const PlannerConfig& cfg);
PlanResult gradient_plan(const PlanObjective& obj, const PlannerConfig& cfg);
/// Dispatches on cfg.kind.
PlanResult plan(const PlanObjective& obj, const PlannerConfig& cfg);

/// Trace as CSV (iteration,best_cost,mean,std).
std::string trace_csv(const PlanResult& r);

/// Produces raw (denormalized) actions, one row per model-level step.
class Controller {
 public:
  virtual ~Controller() = default;
  virtual Mat act(const EnvState& state, const Observation& obs, const Observation& goal, std::uint64_t seed,
                  double* cost) const = 0;
};

/// Plans with a trained world model and denormalizes the result.
class WorldModelController : public Controller {
 public:
  WorldModelController(const WorldModel& model, const NormStats& stats, const EnvConfig& env,
                       const PlanProblem& problem, const PlannerConfig& planner, int trained_context);
  Mat act(const EnvState& state, const Observation& obs, const Observation& goal, std::uint64_t seed,
          double* cost) const override;

  /// Appends every PlanResult to `log`. Not safe with concurrent act() calls.
  void record_to(std::vector<PlanResult>* log) { log_ = log; }

 private:
  const WorldModel& model_;
  NormStats stats_;
  EnvConfig env_;
  PlanProblem problem_;
  PlannerConfig planner_;
  int trained_context_;
  std::vector<PlanResult>* log_ = nullptr;
};

struct MpcConfig {
  int m = 6;   // model actions executed per plan
  int M = 30;  // episode length in simulator steps
  int frameskip = 5;

  void validate(int H) const;
};

struct EpisodeStep {
  int step = 0;
  Vec2 pos = Vec2::Zero();
  Vec2 action = Vec2::Zero();
  double cost = 0.0;
};

struct EpisodeResult {
  bool success = false;
  int steps_taken = 0;
  double final_distance = 0.0;
  int planning_calls = 0;
  std::uint64_t seed = 0;
  std::vector<EpisodeStep> trace;
};

EpisodeResult run_episode(const EnvConfig& env, const EnvState& init, const Observation& goal_obs,
                          const Controller& controller, const MpcConfig& mpc, std::uint64_t seed);

/// Samples the episode for `seed` and runs it.
EpisodeResult mpc_episode(const EnvConfig& env, std::uint64_t seed, const Controller& controller, const MpcConfig& mpc);

std::string episode_jsonl(const EpisodeResult& r);

}  // namespace wmplan
