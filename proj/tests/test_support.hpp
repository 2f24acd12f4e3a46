#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include "wmplan/eval.hpp"
#include "wmplan/planning.hpp"
#include "wmplan/training.hpp"

namespace wmplan::testing {

/// Small predictor used where the default size would only slow tests down.
inline ModelConfig tiny_model(Conditioning c = Conditioning::feature_concat, bool proprio = true, int context = 3) {
  ModelConfig m;
  m.vis_dim = 8;
  m.prop_dim = 4;
  m.action_embed_dim = 4;
  m.width = 16;
  m.depth = 3;
  m.context = context;
  m.proprio = proprio;
  m.conditioning = c;
  m.rff_bandwidth = 7.78318;
  return m;
}

inline LoadedDataset small_dataset(std::size_t n_traj = 24, std::size_t len = 12, std::uint64_t seed = 3) {
  LoadedDataset ds;
  EnvConfig env;
  ds.data = generate(env, Policy::scripted_door, n_traj, len, seed, 5);
  ds.split = split(n_traj, 0.75, seed);
  ds.stats = compute_norm_stats(ds.data, ds.split.train);
  ds.env_hash = env_hash(env);
  return ds;
}

/// Random parameters so that no head starts at exactly zero.
inline void perturb_parameters(WorldModel& model, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (Eigen::Index i = 0; i < model.parameters().size(); ++i) model.parameters()[i] += scale * rng.normal();
}

/// Central differences of f at x.
inline Vec central_difference(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  Vec g(x.size());
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double relative_error(const Vec& a, const Vec& b) {
  const double denom = std::max({a.norm(), b.norm(), 1e-12});
  return (a - b).norm() / denom;
}

/// Planning cost computed by the simulator itself: final squared distance to the goal.
class SimulatorObjective : public PlanObjective {
 public:
  SimulatorObjective(EnvConfig env, EnvState start, NormStats stats, int H, int frameskip)
      : env_(std::move(env)), start_(start), stats_(std::move(stats)), H_(H), frameskip_(frameskip) {}

  int horizon() const override { return H_; }
  Vec evaluate(const Mat& c, int) const override {
    Vec out(c.cols());
    for (Eigen::Index j = 0; j < c.cols(); ++j) {
      EnvState s = start_;
      for (int h = 0; h < H_; ++h) {
        const Vec a = stats_.denormalize_action(c.col(j).segment(2 * h, 2));
        s = frameskip_step(s, clip_action(Action{Vec2(a)}, env_), frameskip_, env_);
      }
      out[j] = (s.pos - s.goal_pos).squaredNorm();
    }
    return out;
  }

 private:
  EnvConfig env_;
  EnvState start_;
  NormStats stats_;
  int H_;
  int frameskip_;
};

/// Controller that plans against the true simulator.
class SimulatorController : public Controller {
 public:
  SimulatorController(EnvConfig env, NormStats stats, PlannerConfig planner, int H = 6, int frameskip = 5)
      : env_(std::move(env)), stats_(std::move(stats)), planner_(planner), H_(H), frameskip_(frameskip) {}

  Mat act(const EnvState& s, const Observation&, const Observation&, std::uint64_t seed,
          double* cost) const override {
    SimulatorObjective obj(env_, s, stats_, H_, frameskip_);
    PlannerConfig c = planner_;
    c.seed = seed;
    const PlanResult r = plan(obj, c);
    if (cost) *cost = r.best_cost;
    Mat raw(H_, 2);
    for (int h = 0; h < H_; ++h)
      raw.row(h) = stats_.denormalize_action(r.best_actions.row(h).transpose()).transpose();
    return raw;
  }

 private:
  EnvConfig env_;
  NormStats stats_;
  PlannerConfig planner_;
  int H_;
  int frameskip_;
};

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("wmplan_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace wmplan::testing
