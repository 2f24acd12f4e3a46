#include "wmplan/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "wmplan/eval.hpp"
#include "wmplan/parallel.hpp"

namespace wmplan {

namespace {

constexpr std::uint64_t kShuffleKey = 0x5348554646ULL;
constexpr std::uint64_t kStepKey = 0x53544550ULL;

// Where a context frame comes from: ground truth (order 0) or a detached prediction.
struct FrameSource {
  int order = 0;
  int column = -1;  // column in the level's prediction matrix when order > 0
};

struct LevelStore {
  Mat vis;
  Mat prop;
  std::vector<int> index;  // slice * L + time -> column, or -1
};

std::size_t level_count(Strategy s, int W, int k, std::size_t batch) {
  if (k == 1) return static_cast<std::size_t>(W) * batch;
  if (s == Strategy::last_gradient_only) return batch;
  return static_cast<std::size_t>(W - k + 1) * batch;
}

RolloutSpec build_spec(Strategy strategy, std::size_t batch, int W, int k_max, double p, Rng& rng,
                       std::vector<int>* drawn) {
  RolloutSpec spec;
  spec.window = W;
  spec.rule = strategy == Strategy::equal_order ? ContextRule::equal_order : ContextRule::chain;
  spec.scheduled_sampling_p = p;
  spec.levels.push_back(teacher_forcing_terms(batch, W));
  std::vector<int> tf_prefix;
  for (const auto& t : spec.levels[0]) tf_prefix.push_back(t.target);
  spec.prefixes.push_back(std::move(tf_prefix));

  std::vector<int> prefixes;
  if (strategy == Strategy::last_gradient_only && k_max > 1) {
    const auto span = static_cast<std::uint64_t>(W + 1 - k_max);
    prefixes.resize(batch);
    for (auto& pb : prefixes) pb = 1 + static_cast<int>(rng.below(span));
  }
  for (int k = 2; k <= k_max; ++k) {
    std::vector<LossTerm> terms;
    std::vector<int> pre;
    if (strategy == Strategy::last_gradient_only) {
      for (std::size_t b = 0; b < batch; ++b) {
        terms.push_back({b, prefixes[b] + k - 1, k});
        pre.push_back(prefixes[b]);
      }
    } else {
      for (int t = k; t <= W; ++t)
        for (std::size_t b = 0; b < batch; ++b) {
          terms.push_back({b, t, k});
          pre.push_back(t - k + 1);
        }
    }
    spec.levels.push_back(std::move(terms));
    spec.prefixes.push_back(std::move(pre));
  }
  if (drawn) *drawn = std::move(prefixes);
  return spec;
}

void check_rollout_args(int W, int k_max, double p) {
  if (W < 1) throw std::invalid_argument("W must be >= 1");
  if (k_max < 1) throw std::invalid_argument("rollout_steps must be >= 1");
  if (k_max > W) throw std::invalid_argument("rollout_steps must not exceed W");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("scheduled_sampling_p must lie in [0, 1]");
}

std::vector<std::size_t> evenly_spaced(std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  if (n == 0) return out;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) out.push_back(i * n / k);
  return out;
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::last_gradient_only:
      return "last_gradient_only";
    case Strategy::all_gradients:
      return "all_gradients";
    case Strategy::equal_order:
      return "equal_order";
  }
  return "?";
}

Strategy strategy_from_string(const std::string& s) {
  if (s == "last_gradient_only") return Strategy::last_gradient_only;
  if (s == "all_gradients") return Strategy::all_gradients;
  if (s == "equal_order") return Strategy::equal_order;
  throw std::invalid_argument("unknown strategy '" + s + "'");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("training." + what); };
  if (W < 1) fail("W must be >= 1");
  if (rollout_steps < 1) fail("rollout_steps must be >= 1");
  if (rollout_steps > W) fail("rollout_steps must not exceed W");
  if (!(scheduled_sampling_p >= 0.0 && scheduled_sampling_p <= 1.0)) fail("scheduled_sampling_p must lie in [0, 1]");
  if (!(lr > 0)) fail("lr must be > 0");
  if (weight_decay_start < 0 || weight_decay_final < 0) fail("weight decay must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0)) fail("adam_eps must be > 0");
  if (!(grad_clip > 0)) fail("grad_clip must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 0) fail("epochs must be >= 0");
  if (chunk_size < 1) fail("chunk_size must be >= 1");
  if (eval_interval < 1) fail("eval_interval must be >= 1");
  if (eval_horizon < 1) fail("eval_horizon must be >= 1");
  if (eval_batch < 1) fail("eval_batch must be >= 1");
}

EmbeddedData embed_dataset(const WorldModel& model, const Dataset& data, const NormStats& stats, int threads) {
  const auto n = data.trajectories.size();
  EmbeddedData out;
  out.vis.resize(n);
  out.prop.resize(n);
  out.act.resize(n);
  const int g2 = model.config().grid * model.config().grid;
  parallel_for(n, threads, [&](std::size_t i) {
    const auto& tr = data.trajectories[i];
    if (tr.grid != model.config().grid) throw std::invalid_argument("embed_dataset: raster grid mismatch");
    const auto n_obs = static_cast<Eigen::Index>(tr.num_observations());
    const auto n_act = static_cast<Eigen::Index>(tr.num_actions());
    Mat rasters(g2, n_obs);
    for (Eigen::Index c = 0; c < n_obs; ++c)
      for (int r = 0; r < g2; ++r) rasters(r, c) = tr.rasters[static_cast<std::size_t>(c * g2 + r)];
    out.vis[i] = model.visual().encode_batch(rasters);
    out.prop[i].resize(kProprioDim, n_obs);
    for (Eigen::Index c = 0; c < n_obs; ++c)
      for (int r = 0; r < kProprioDim; ++r)
        out.prop[i](r, c) = (tr.proprio[static_cast<std::size_t>(c * kProprioDim + r)] - stats.proprio_mean[r]) /
                            stats.proprio_std[r];
    out.act[i].resize(kActionDim, n_act);
    for (Eigen::Index c = 0; c < n_act; ++c)
      for (int r = 0; r < kActionDim; ++r)
        out.act[i](r, c) = (tr.actions[static_cast<std::size_t>(c * kActionDim + r)] - stats.action_mean[r]) /
                           stats.action_std[r];
  });
  return out;
}

std::vector<LossTerm> teacher_forcing_terms(std::size_t batch, int W) {
  std::vector<LossTerm> terms;
  terms.reserve(batch * static_cast<std::size_t>(W));
  for (int t = 1; t <= W; ++t)
    for (std::size_t b = 0; b < batch; ++b) terms.push_back({b, t, 1});
  return terms;
}

std::vector<LossTerm> enumerate_terms(Strategy strategy, std::size_t batch, int W, int k_max,
                                      const std::vector<int>& prefixes) {
  check_rollout_args(W, k_max, 0.0);
  if (strategy == Strategy::last_gradient_only && k_max > 1 && prefixes.size() != batch)
    throw std::invalid_argument("enumerate_terms: one prefix per slice required");
  std::vector<LossTerm> terms = teacher_forcing_terms(batch, W);
  for (int k = 2; k <= k_max; ++k) {
    if (strategy == Strategy::last_gradient_only) {
      for (std::size_t b = 0; b < batch; ++b) terms.push_back({b, prefixes[b] + k - 1, k});
    } else {
      for (int t = k; t <= W; ++t)
        for (std::size_t b = 0; b < batch; ++b) terms.push_back({b, t, k});
    }
  }
  return terms;
}

std::vector<LevelStats> run_rollout(const WorldModel& model, const EmbeddedData& data,
                                    const std::vector<SliceRecord>& batch, const RolloutSpec& spec,
                                    const std::vector<double>& scale, Vec* grad, Rng* rng) {
  const ModelConfig& mc = model.config();
  const int S = mc.context;
  const int D = mc.vis_dim;
  const int P = mc.prop_dim;
  const bool proprio = mc.proprio;
  const auto B = batch.size();
  if (spec.window < 1 || spec.window > S)
    throw std::invalid_argument("rollout window must lie in [1, model context]");
  if (grad && scale.size() < spec.levels.size()) throw std::invalid_argument("run_rollout: missing level scales");
  if (spec.rule == ContextRule::chain && spec.prefixes.size() != spec.levels.size())
    throw std::invalid_argument("run_rollout: chain rule needs prefixes");

  std::size_t L = 0;
  for (const auto& s : batch) L = std::max(L, s.length);
  for (const auto& s : batch)
    if (s.length != L) throw std::invalid_argument("run_rollout: slices must share one length");

  // Ground-truth inputs of every frame, column b * L + tau.
  const auto BL = static_cast<Eigen::Index>(B * L);
  Mat prop_in = Mat::Zero(kProprioDim, BL);
  Mat act_in = Mat::Zero(kActionDim, BL);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& rec = batch[b];
    if (rec.trajectory >= data.vis.size()) throw std::invalid_argument("run_rollout: slice outside dataset");
    const auto& act = data.act[rec.trajectory];
    if (static_cast<Eigen::Index>(rec.offset + L) > data.vis[rec.trajectory].cols())
      throw std::invalid_argument("run_rollout: slice runs past its trajectory");
    for (std::size_t tau = 0; tau < L; ++tau) {
      const auto col = static_cast<Eigen::Index>(b * L + tau);
      const auto src = static_cast<Eigen::Index>(rec.offset + tau);
      if (proprio) prop_in.col(col) = data.prop[rec.trajectory].col(src);
      if (src < act.cols()) act_in.col(col) = act.col(src);
    }
  }
  const Mat prop_emb = proprio ? model.encode_prop(prop_in) : Mat(0, BL);
  const Mat act_emb = model.encode_action(act_in);
  Mat d_prop_emb;
  Mat d_act_emb;
  if (grad) {
    d_prop_emb = Mat::Zero(prop_emb.rows(), BL);
    d_act_emb = Mat::Zero(act_emb.rows(), BL);
  }

  std::vector<LevelStore> store(spec.levels.size());
  std::vector<LevelStats> stats(spec.levels.size());
  const double p_flip = spec.scheduled_sampling_p;

  for (std::size_t li = 0; li < spec.levels.size(); ++li) {
    const auto& terms = spec.levels[li];
    const int k = static_cast<int>(li) + 1;
    const auto n = static_cast<Eigen::Index>(terms.size());
    ContextBatch ctx = ContextBatch::empty(S, n, D, P, mc.action_embed_dim, proprio);
    // Ground-truth frame column per (slot, term), -1 for fed-back predictions.
    std::vector<Eigen::Index> gt_col(static_cast<std::size_t>(S * n), -1);

    for (Eigen::Index j = 0; j < n; ++j) {
      const LossTerm& term = terms[static_cast<std::size_t>(j)];
      if (term.order != k) throw std::invalid_argument("run_rollout: term order does not match its level");
      if (term.slice >= B || term.target < 1 || static_cast<std::size_t>(term.target) >= L)
        throw std::invalid_argument("run_rollout: term outside its slice");
      const int t = term.target;
      int first = std::max(0, t - spec.window);
      if (spec.rule == ContextRule::equal_order) first = std::max(first, k - 1);
      const int prefix = spec.rule == ContextRule::chain ? spec.prefixes[li][static_cast<std::size_t>(j)] : 0;
      for (int tau = first; tau < t; ++tau) {
        const int slot = S - (t - tau);
        const auto gcol = static_cast<Eigen::Index>(term.slice * L + static_cast<std::size_t>(tau));
        int order = spec.rule == ContextRule::chain ? (tau < prefix ? 0 : tau - prefix + 1) : k - 1;
        if (order > 0 && p_flip > 0.0 && rng && rng->uniform() < p_flip) order = 0;
        if (order == 0) {
          ctx.vis[slot].col(j) = data.vis[batch[term.slice].trajectory].col(
              static_cast<Eigen::Index>(batch[term.slice].offset) + tau);
          if (proprio) ctx.prop[slot].col(j) = prop_emb.col(gcol);
          gt_col[static_cast<std::size_t>(slot * n + j)] = gcol;
        } else {
          if (order >= k) throw std::logic_error("run_rollout: context needs a prediction of too high an order");
          const LevelStore& src = store[static_cast<std::size_t>(order - 1)];
          const int c = src.index[static_cast<std::size_t>(gcol)];
          if (c < 0) throw std::logic_error("run_rollout: missing fed-back prediction");
          ctx.vis[slot].col(j) = src.vis.col(c);
          if (proprio) ctx.prop[slot].col(j) = src.prop.col(c);
        }
        ctx.act[slot].col(j) = act_emb.col(gcol);
        ctx.mask(slot, j) = 1.0;
      }
    }

    PredictorTape tape;
    const LatentBatch pred = model.predict(ctx, grad ? &tape : nullptr);

    LevelStats& st = stats[li];
    st.count = terms.size();
    Mat d_vis;
    Mat d_prop;
    if (grad) {
      d_vis.resize(D, n);
      d_prop.resize(proprio ? P : 0, n);
    }
    const double sc = grad ? scale[li] : 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      const LossTerm& term = terms[static_cast<std::size_t>(j)];
      const auto gcol = static_cast<Eigen::Index>(term.slice * L + static_cast<std::size_t>(term.target));
      const Vec dv = pred.vis.col(j) -
                     data.vis[batch[term.slice].trajectory].col(static_cast<Eigen::Index>(batch[term.slice].offset) +
                                                                term.target);
      const double vsq = dv.squaredNorm() / D;
      const double vab = dv.cwiseAbs().sum() / D;
      double psq = 0.0;
      double pab = 0.0;
      if (proprio) {
        const Vec dp = pred.prop.col(j) - prop_emb.col(gcol);
        psq = dp.squaredNorm() / P;
        pab = dp.cwiseAbs().sum() / P;
        if (grad) d_prop.col(j) = (2.0 * sc / P) * dp;
      }
      if (grad) d_vis.col(j) = (2.0 * sc / D) * dv;
      st.sq += vsq + psq;
      st.abs += vab + pab;
      st.vis_sq += vsq;
      st.vis_abs += vab;
    }
    st.predicted_vis = pred.vis;

    if (grad) {
      const ContextGrad cg = model.backward(tape, d_vis, d_prop, grad);
      for (int s = 0; s < S; ++s)
        for (Eigen::Index j = 0; j < n; ++j) {
          if (ctx.mask(s, j) == 0.0) continue;
          const LossTerm& term = terms[static_cast<std::size_t>(j)];
          const int tau = term.target - (S - s);
          const auto acol = static_cast<Eigen::Index>(term.slice * L + static_cast<std::size_t>(tau));
          d_act_emb.col(acol) += cg.act[static_cast<std::size_t>(s)].col(j);
          const Eigen::Index gcol = gt_col[static_cast<std::size_t>(s * n + j)];
          if (proprio && gcol >= 0) d_prop_emb.col(gcol) += cg.prop[static_cast<std::size_t>(s)].col(j);
        }
    }

    LevelStore& out = store[li];
    out.vis = pred.vis;
    out.prop = pred.prop;
    out.index.assign(B * L, -1);
    for (Eigen::Index j = 0; j < n; ++j) {
      const LossTerm& term = terms[static_cast<std::size_t>(j)];
      out.index[term.slice * L + static_cast<std::size_t>(term.target)] = static_cast<int>(j);
    }
  }

  if (grad) {
    if (proprio) model.backward_prop(prop_in, d_prop_emb, grad);
    model.backward_action(act_in, d_act_emb, grad);
  }
  return stats;
}

LossReport teacher_forcing_loss(const WorldModel& model, const EmbeddedData& data,
                                const std::vector<SliceRecord>& batch, int W, Vec* grad) {
  Rng unused(0);
  return multistep_loss(model, data, batch, W, 1, Strategy::last_gradient_only, 0.0, unused, grad);
}

LossReport multistep_loss(const WorldModel& model, const EmbeddedData& data, const std::vector<SliceRecord>& batch,
                          int W, int k_max, Strategy strategy, double p, Rng& rng, Vec* grad) {
  check_rollout_args(W, k_max, p);
  if (batch.empty()) throw std::invalid_argument("empty batch");
  for (const auto& s : batch)
    if (s.length < static_cast<std::size_t>(W + 1)) throw std::invalid_argument("slices must hold W+1 frames");
  LossReport rep;
  const RolloutSpec spec = build_spec(strategy, batch.size(), W, k_max, p, rng, &rep.prefixes);
  std::vector<double> scale;
  for (int k = 1; k <= k_max; ++k) scale.push_back(1.0 / static_cast<double>(level_count(strategy, W, k, batch.size())));
  const auto stats = run_rollout(model, data, batch, spec, scale, grad, &rng);
  for (std::size_t k = 0; k < stats.size(); ++k) {
    rep.losses.push_back(stats[k].sq / static_cast<double>(stats[k].count));
    rep.total += rep.losses.back();
  }
  return rep;
}

double weight_decay_at(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (total_steps <= 1) return cfg.weight_decay_start;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps - 1));
  return cfg.weight_decay_final +
         (cfg.weight_decay_start - cfg.weight_decay_final) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

void adamw_update(Vec& theta, const Vec& grad, AdamState& st, double lr, double wd, double beta1, double beta2,
                  double eps) {
  if (st.m.size() != theta.size()) {
    st.m = Vec::Zero(theta.size());
    st.v = Vec::Zero(theta.size());
    st.t = 0;
  }
  ++st.t;
  theta *= 1.0 - lr * wd;
  st.m = beta1 * st.m + (1.0 - beta1) * grad;
  st.v = beta2 * st.v + (1.0 - beta2) * grad.cwiseAbs2();
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  theta.array() -= lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + eps);
}

double clip_global_norm(Vec& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm) grad *= max_norm / norm;
  return norm;
}

LossReport train_step(WorldModel& model, AdamState& opt, const EmbeddedData& data,
                      const std::vector<SliceRecord>& batch, const TrainConfig& cfg, std::size_t step_index,
                      std::size_t total_steps, int threads) {
  check_rollout_args(cfg.W, cfg.rollout_steps, cfg.scheduled_sampling_p);
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const int k_max = cfg.rollout_steps;
  const auto chunk = static_cast<std::size_t>(cfg.chunk_size);
  const std::size_t n_chunks = (batch.size() + chunk - 1) / chunk;
  std::vector<double> scale;
  for (int k = 1; k <= k_max; ++k)
    scale.push_back(1.0 / static_cast<double>(level_count(cfg.strategy, cfg.W, k, batch.size())));

  struct ChunkResult {
    Vec grad;
    std::vector<LevelStats> stats;
    std::vector<int> prefixes;
  };
  std::vector<ChunkResult> results(n_chunks);
  const WorldModel& cmodel = model;
  parallel_for(n_chunks, threads, [&](std::size_t c) {
    const auto lo = c * chunk;
    const auto hi = std::min(batch.size(), lo + chunk);
    const std::vector<SliceRecord> part(batch.begin() + static_cast<std::ptrdiff_t>(lo),
                                        batch.begin() + static_cast<std::ptrdiff_t>(hi));
    Rng rng = Rng::stream(cfg.seed, {kStepKey, step_index, c});
    ChunkResult& r = results[c];
    const RolloutSpec spec = build_spec(cfg.strategy, part.size(), cfg.W, k_max, cfg.scheduled_sampling_p, rng,
                                        &r.prefixes);
    r.grad = Vec::Zero(cmodel.parameter_count());
    r.stats = run_rollout(cmodel, data, part, spec, scale, &r.grad, &rng);
    for (auto& s : r.stats) s.predicted_vis.resize(0, 0);
  });

  LossReport rep;
  rep.step = step_index;
  Vec grad = Vec::Zero(model.parameter_count());
  std::vector<double> sums(static_cast<std::size_t>(k_max), 0.0);
  for (auto& r : results) {
    grad += r.grad;
    for (std::size_t k = 0; k < r.stats.size(); ++k) sums[k] += r.stats[k].sq;
    rep.prefixes.insert(rep.prefixes.end(), r.prefixes.begin(), r.prefixes.end());
  }
  for (int k = 1; k <= k_max; ++k) {
    rep.losses.push_back(sums[static_cast<std::size_t>(k - 1)] * scale[static_cast<std::size_t>(k - 1)]);
    rep.total += rep.losses.back();
  }
  if (!std::isfinite(rep.total) || !grad.allFinite()) {
    std::ostringstream msg;
    msg << "non-finite training loss at step " << step_index << " (total=" << rep.total << ")";
    throw InvariantViolation(msg.str());
  }
  rep.grad_norm = clip_global_norm(grad, cfg.grad_clip);
  adamw_update(model.parameters(), grad, opt, cfg.lr, weight_decay_at(cfg, step_index, total_steps), cfg.adam_beta1,
               cfg.adam_beta2, cfg.adam_eps);
  return rep;
}

TrainOutput train(WorldModel& model, const LoadedDataset& ds, const TrainConfig& cfg, int threads,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (cfg.W > model.config().context)
    throw std::invalid_argument("training.W exceeds the model's context capacity");
  const EmbeddedData emb = embed_dataset(model, ds.data, ds.stats, threads);
  const SliceSet train_slices = slice(ds.data, ds.split.train, cfg.W);
  if (train_slices.slices.empty()) throw std::invalid_argument("no training slices (trajectories shorter than W+1)");

  const SliceSet val_tf_all = slice(ds.data, ds.split.val, cfg.W);
  const SliceSet val_unroll_all = slice(ds.data, ds.split.val, cfg.W + cfg.eval_horizon - 1);
  std::vector<SliceRecord> val_tf;
  std::vector<SliceRecord> val_unroll;
  for (auto i : evenly_spaced(val_tf_all.slices.size(), static_cast<std::size_t>(cfg.eval_batch)))
    val_tf.push_back(val_tf_all.slices[i]);
  for (auto i : evenly_spaced(val_unroll_all.slices.size(), static_cast<std::size_t>(cfg.eval_batch)))
    val_unroll.push_back(val_unroll_all.slices[i]);

  auto validation = [&](EpochMetrics& m) {
    if (!val_tf.empty()) m.val_loss = teacher_forcing_loss(model, emb, val_tf, cfg.W).total;
    if (!val_unroll.empty()) m.val_unroll = unroll_error(model, emb, val_unroll, cfg.W, cfg.eval_horizon, cfg.W);
  };

  const std::size_t n_train = train_slices.slices.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, n_train / bs);
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);

  TrainOutput out;
  AdamState opt;
  EpochMetrics m0;
  m0.train_losses.assign(static_cast<std::size_t>(cfg.rollout_steps), 0.0);
  validation(m0);
  out.epochs.push_back(m0);
  out.checkpoints.push_back(make_checkpoint(model, ds.stats, cfg.W, 0, 0));
  if (on_epoch) on_epoch(out.epochs.back(), out.checkpoints.back());

  std::size_t step = 0;
  std::vector<std::size_t> order(n_train);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
    Rng rng = Rng::stream(cfg.seed, {kShuffleKey, static_cast<std::uint64_t>(epoch)});
    for (std::size_t i = n_train; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_losses.assign(static_cast<std::size_t>(cfg.rollout_steps), 0.0);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<SliceRecord> batch;
      const std::size_t lo = s * bs;
      const std::size_t hi = std::min(n_train, lo + bs);
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(train_slices.slices[order[i]]);
      const LossReport rep = train_step(model, opt, emb, batch, cfg, step, total_steps, threads);
      for (std::size_t k = 0; k < rep.losses.size(); ++k) m.train_losses[k] += rep.losses[k];
      m.grad_norm += rep.grad_norm;
      ++step;
      if (step % static_cast<std::size_t>(cfg.eval_interval) == 0 && !val_unroll.empty())
        out.interval_metrics.emplace_back(step, unroll_error(model, emb, val_unroll, cfg.W, cfg.eval_horizon, cfg.W));
    }
    for (auto& l : m.train_losses) l /= static_cast<double>(steps_per_epoch);
    m.grad_norm /= static_cast<double>(steps_per_epoch);
    m.step = step;
    validation(m);
    out.epochs.push_back(m);
    out.checkpoints.push_back(make_checkpoint(model, ds.stats, cfg.W, epoch, step));
    if (on_epoch) on_epoch(out.epochs.back(), out.checkpoints.back());
  }
  return out;
}

std::string metrics_csv_header(int k_max, int horizons) {
  std::ostringstream os;
  os << "epoch,step";
  for (int k = 1; k <= k_max; ++k) os << ",L" << k;
  os << ",grad_norm,val_loss";
  for (int h = 1; h <= horizons; ++h) os << ",val_unroll_l1_h" << h << ",val_unroll_l2_h" << h;
  return os.str();
}

std::string metrics_csv_row(const EpochMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.epoch << ',' << m.step;
  for (double l : m.train_losses) os << ',' << l;
  os << ',' << m.grad_norm << ',' << m.val_loss;
  for (std::size_t h = 0; h < m.val_unroll.l1.size(); ++h) os << ',' << m.val_unroll.l1[h] << ',' << m.val_unroll.l2[h];
  return os.str();
}

}  // namespace wmplan
