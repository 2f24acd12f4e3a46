#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wmplan/dataset.hpp"
#include "wmplan/model.hpp"

namespace wmplan {

enum class Strategy { last_gradient_only, all_gradients, equal_order };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct TrainConfig {
  int W = 3;
  int rollout_steps = 1;  // k_max
  Strategy strategy = Strategy::last_gradient_only;
  double scheduled_sampling_p = 0.0;
  double lr = 5e-4;
  double weight_decay_start = 1e-7;
  double weight_decay_final = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.995;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  int batch_size = 128;
  int epochs = 50;
  std::uint64_t seed = 0;
  /// Slices per deterministic work unit inside a step.
  int chunk_size = 32;
  /// Validation unroll metrics are recorded every this many iterations.
  int eval_interval = 300;
  int eval_horizon = 5;
  int eval_batch = 256;

  void validate() const;
};

/// Frozen visual embeddings plus normalized proprio/actions of every trajectory.
struct EmbeddedData {
  std::vector<Mat> vis;   // D x (T+1)
  std::vector<Mat> prop;  // 4 x (T+1), normalized
  std::vector<Mat> act;   // 2 x T, normalized
};

EmbeddedData embed_dataset(const WorldModel& model, const Dataset& data, const NormStats& stats, int threads = 1);

/// One loss term: predict timestep `target` of slice `slice` at unroll order `order`.
struct LossTerm {
  std::size_t slice = 0;
  int target = 0;
  int order = 0;
  bool operator==(const LossTerm&) const = default;
  auto operator<=>(const LossTerm&) const = default;
};

struct LossReport {
  std::vector<double> losses;  // L_1 .. L_k
  double total = 0.0;
  double grad_norm = 0.0;  // before clipping
  std::size_t step = 0;
  /// Ground-truth prefix length per slice drawn by last_gradient_only (empty otherwise).
  std::vector<int> prefixes;
};

/// Rule deciding which frames of a context are ground truth and which are fed-back predictions.
enum class ContextRule { chain, equal_order };

/**
 * @brief Recursive predictor rollout over a batch of slices.
 *
 * Level k (1-based) evaluates the listed terms with one batched predictor
 * call. Fed-back predictions are detached, so each level's loss only reaches
 * the parameters through its own call and the ground-truth encoders.
 */
struct RolloutSpec {
  int window = 1;
  ContextRule rule = ContextRule::chain;
  /// levels[k-1] lists the order-k terms; term.order must equal k.
  std::vector<std::vector<LossTerm>> levels;
  /// Chain prefix per term, parallel to levels (only for ContextRule::chain).
  std::vector<std::vector<int>> prefixes;
  double scheduled_sampling_p = 0.0;
};

struct LevelStats {
  std::size_t count = 0;
  double sq = 0.0;       // sum over terms of (vis MSE + prop MSE)
  double abs = 0.0;      // sum over terms of (vis MAE + prop MAE)
  double vis_sq = 0.0;
  double vis_abs = 0.0;
  Mat predicted_vis;     // D x count, in term order
};

/**
 * Runs `spec` on `batch`. When `grad` is non-null, adds the gradient of
 * sum_k scale[k] * sq_k into it. `rng` is only drawn from when scheduled
 * sampling is active.
 */
std::vector<LevelStats> run_rollout(const WorldModel& model, const EmbeddedData& data,
                                    const std::vector<SliceRecord>& batch, const RolloutSpec& spec,
                                    const std::vector<double>& scale, Vec* grad, Rng* rng);

/// Order-1 predictions from every context length 1..W, terms ordered by target then slice.
std::vector<LossTerm> teacher_forcing_terms(std::size_t batch, int W);

/// Every term a strategy includes; `prefixes` are the per-slice draws of last_gradient_only.
std::vector<LossTerm> enumerate_terms(Strategy strategy, std::size_t batch, int W, int k_max,
                                      const std::vector<int>& prefixes = {});

LossReport teacher_forcing_loss(const WorldModel& model, const EmbeddedData& data,
                                const std::vector<SliceRecord>& batch, int W, Vec* grad = nullptr);

LossReport multistep_loss(const WorldModel& model, const EmbeddedData& data, const std::vector<SliceRecord>& batch,
                          int W, int k_max, Strategy strategy, double p, Rng& rng, Vec* grad = nullptr);

/// Weight-decay value at `step` of `total_steps` (cosine from start to final).
double weight_decay_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct AdamState {
  Vec m;
  Vec v;
  std::size_t t = 0;
};

/// Decoupled weight decay followed by an Adam step.
void adamw_update(Vec& theta, const Vec& grad, AdamState& state, double lr, double wd, double beta1, double beta2,
                  double eps);

/// Rescales `grad` to `max_norm` when larger; returns the norm before clipping.
double clip_global_norm(Vec& grad, double max_norm);

/**
 * @brief One optimizer step on Σ_k L_k.
 *
 * The batch is cut into fixed chunks that are processed on up to `threads`
 * workers and reduced in chunk order, so the result does not depend on the
 * worker count. Throws InvariantViolation on a non-finite loss.
 */
LossReport train_step(WorldModel& model, AdamState& opt, const EmbeddedData& data,
                      const std::vector<SliceRecord>& batch, const TrainConfig& cfg, std::size_t step_index,
                      std::size_t total_steps, int threads = 1);

/// Validation unroll errors at horizons 1..n.
struct UnrollErrors {
  std::vector<double> l1;
  std::vector<double> l2;
  std::vector<double> vis_l1;
  std::vector<double> vis_l2;
};

struct EpochMetrics {
  int epoch = 0;
  std::size_t step = 0;
  std::vector<double> train_losses;  // mean L_k over the epoch
  double grad_norm = 0.0;            // mean pre-clip norm
  double val_loss = 0.0;             // teacher forcing on validation slices
  UnrollErrors val_unroll;
};

struct TrainOutput {
  std::vector<Checkpoint> checkpoints;  // index e holds the state after epoch e (0 = initial)
  std::vector<EpochMetrics> epochs;
  /// (step, errors) recorded every eval_interval iterations.
  std::vector<std::pair<std::size_t, UnrollErrors>> interval_metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&, const Checkpoint&)>;

/// Full training run. The model's trained context is cfg.W.
TrainOutput train(WorldModel& model, const LoadedDataset& ds, const TrainConfig& cfg, int threads = 1,
                  const EpochCallback& on_epoch = {});

/// CSV header and row for EpochMetrics.
std::string metrics_csv_header(int k_max, int horizons);
std::string metrics_csv_row(const EpochMetrics& m);

}  // namespace wmplan
