#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "wmplan/dataset.hpp"
#include "wmplan/env.hpp"

namespace wmplan {

enum class Conditioning { feature_concat, layer_modulation };

std::string to_string(Conditioning c);
Conditioning conditioning_from_string(const std::string& s);

struct ModelConfig {
  int grid = 28;
  int vis_dim = 64;          // D
  int prop_dim = 8;          // P, proprio embedding size
  int action_embed_dim = 8;  // A_e
  int width = 128;
  int depth = 3;
  /// Number of context slots the predictor reads (its maximum window).
  int context = 3;
  bool proprio = false;
  Conditioning conditioning = Conditioning::feature_concat;
  double rff_bandwidth = 2.8;
  double rff_scale = 1.0;
  std::uint64_t encoder_seed = 7;
  std::uint64_t init_seed = 11;

  void validate() const;
};

/**
 * @brief Frozen random-Fourier-feature embedding of a raster.
 *
 * z = scale * cos(M x + b) with M ~ N(0, 1/bandwidth^2) entrywise and
 * b ~ U[0, 2 pi). Built once from `encoder_seed` and never modified.
 */
class VisualEncoder {
 public:
  VisualEncoder(int grid, int dim, double bandwidth, double scale, std::uint64_t seed);

  int grid() const { return grid_; }
  int dim() const { return static_cast<int>(proj_.rows()); }

  Vec encode(std::span<const float> raster) const;
  /// Columns of `rasters` (grid^2 x N) are independent frames.
  Mat encode_batch(const Mat& rasters) const;

  /// Fingerprint of the projection, phases and scale.
  std::uint64_t hash() const;

 private:
  int grid_;
  double scale_;
  Mat proj_;
  Vec phase_;
};

/// Average cosine similarity between embeddings of agent positions `separation` apart.
double mean_neighbor_similarity(const VisualEncoder& enc, const EnvConfig& env, double separation,
                                int samples, std::uint64_t seed);

/// Bisection on the bandwidth so that `mean_neighbor_similarity` hits `target`.
double calibrate_bandwidth(const EnvConfig& env, int dim, std::uint64_t seed, double separation, double target);

/// Per-timestep embedding pair for a batch of B columns.
struct LatentBatch {
  Mat vis;   // D x B
  Mat prop;  // P x B, empty when proprioception is off
};

/**
 * @brief Left-zero-padded window of latents and action embeddings.
 *
 * Slot `context-1` holds the most recent timestep. `mask(s, b)` is 1 for
 * filled slots. The last slot must be filled in every column.
 */
struct ContextBatch {
  std::vector<Mat> vis;   // per slot, D x B
  std::vector<Mat> prop;  // per slot, P x B (empty vector when off)
  std::vector<Mat> act;   // per slot, A_e x B
  Mat mask;               // slots x B

  Eigen::Index batch() const { return mask.cols(); }
  int slots() const { return static_cast<int>(mask.rows()); }

  /// Zeroed window with no filled slots.
  static ContextBatch empty(int slots, Eigen::Index batch, int vis_dim, int prop_dim, int act_dim, bool proprio);
};

struct ContextGrad {
  std::vector<Mat> vis;
  std::vector<Mat> prop;
  std::vector<Mat> act;
};

/// Activations kept by a forward pass for the matching backward pass.
struct PredictorTape {
  bool recorded = false;
  Mat input;
  Mat cond;
  Mat mask;
  std::vector<Mat> normed;
  std::vector<Eigen::RowVectorXd> inv_std;
  std::vector<Mat> gamma;
  std::vector<Mat> hidden;
};

/// Named block in the flat parameter vector.
struct ParamBlock {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Eigen::Index size() const { return rows * cols; }
};

/**
 * @brief Frozen visual encoder plus the trainable proprio encoder, action
 * encoder and context-windowed predictor.
 *
 * All trainable parameters live in one flat vector; gradients use the same
 * layout. Forward passes are const and may run concurrently.
 */
class WorldModel {
 public:
  explicit WorldModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const VisualEncoder& visual() const { return visual_; }

  Vec& parameters() { return theta_; }
  const Vec& parameters() const { return theta_; }
  Eigen::Index parameter_count() const { return theta_.size(); }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const;

  Eigen::Map<const Mat> view(const ParamBlock& b) const;
  Eigen::Map<Mat> view(const ParamBlock& b, Vec& storage) const;

  /// Visual embedding of one observation. Throws on raster shape mismatch.
  Vec encode_vis(const Observation& obs) const;
  /// Proprio embedding of normalized proprio columns (4 x B).
  Mat encode_prop(const Mat& proprio) const;
  /// Action embedding of normalized action columns (2 x B).
  Mat encode_action(const Mat& actions) const;

  /// Latent of one observation; its raw proprio vector is normalized with `stats`.
  LatentBatch encode_state(const Observation& obs, const NormStats& stats) const;

  LatentBatch predict(const ContextBatch& ctx, PredictorTape* tape = nullptr) const;

  /**
   * Reverse pass through one recorded `predict` call. Adds parameter
   * gradients into `grad` (when non-null) and returns gradients with respect
   * to every slot input.
   */
  ContextGrad backward(const PredictorTape& tape, const Mat& d_vis, const Mat& d_prop, Vec* grad) const;

  /// Adds encoder parameter gradients; returns d/d(actions).
  Mat backward_action(const Mat& actions, const Mat& d_embed, Vec* grad) const;
  void backward_prop(const Mat& proprio, const Mat& d_embed, Vec* grad) const;

  int input_dim() const;
  int cond_dim() const;

 private:
  ParamBlock& add_block(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  void initialize();

  ModelConfig cfg_;
  VisualEncoder visual_;
  Vec theta_;
  std::vector<ParamBlock> blocks_;
  // Cached block indices.
  int act_w_ = -1, act_b_ = -1, prop_w_ = -1, prop_b_ = -1;
  std::vector<int> layer_w_, layer_b_, gam_w_, gam_b_, bet_w_, bet_b_;
  int out_vis_w_ = -1, out_vis_b_ = -1, out_prop_w_ = -1, out_prop_b_ = -1;
};

/// Self-contained checkpoint: model config, normalization, training context and parameters.
struct Checkpoint {
  ModelConfig model;
  NormStats stats;
  int trained_context = 0;
  int epoch = 0;
  std::size_t step = 0;
  Vec parameters;
};

Checkpoint make_checkpoint(const WorldModel& model, const NormStats& stats, int trained_context, int epoch,
                           std::size_t step);
/// JSON header plus little-endian float32 parameters.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
WorldModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace wmplan
