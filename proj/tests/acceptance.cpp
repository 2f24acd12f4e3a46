#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "test_support.hpp"
#include "wmplan/commands.hpp"
#include "wmplan/config.hpp"

using namespace wmplan;
using namespace wmplan::testing;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = WMPLAN_SOURCE_DIR;

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

// ---------------------------------------------------------------------------
// Gradient oracle

struct RawContext {
  std::vector<Mat> vis, prop, act;
  Mat mask;
};

RawContext random_context(const WorldModel& m, Eigen::Index B, std::uint64_t seed) {
  const auto& c = m.config();
  Rng rng(seed);
  RawContext r;
  r.mask = Mat::Zero(c.context, B);
  for (Eigen::Index b = 0; b < B; ++b) {
    const int filled = 1 + static_cast<int>(b % c.context);
    for (int s = c.context - filled; s < c.context; ++s) r.mask(s, b) = 1.0;
  }
  auto rnd = [&](Eigen::Index rows) {
    Mat x(rows, B);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    return x;
  };
  for (int s = 0; s < c.context; ++s) {
    r.vis.push_back(rnd(c.vis_dim));
    r.prop.push_back(rnd(kProprioDim));
    r.act.push_back(rnd(kActionDim));
  }
  return r;
}

ContextBatch assemble(const WorldModel& m, const RawContext& r) {
  const auto& c = m.config();
  ContextBatch ctx = ContextBatch::empty(c.context, r.mask.cols(), c.vis_dim, c.prop_dim, c.action_embed_dim, c.proprio);
  ctx.mask = r.mask;
  for (int s = 0; s < c.context; ++s) {
    ctx.vis[s] = r.vis[s];
    if (c.proprio) ctx.prop[s] = m.encode_prop(r.prop[s]);
    ctx.act[s] = m.encode_action(r.act[s]);
  }
  return ctx;
}

/// Random linear functional of one predictor call.
double probe_loss(const WorldModel& m, const RawContext& r, const Mat& dv, const Mat& dp) {
  const LatentBatch out = m.predict(assemble(m, r));
  double l = (dv.array() * out.vis.array()).sum();
  if (m.config().proprio) l += (dp.array() * out.prop.array()).sum();
  return l;
}

Verdict gradient_oracle() {
  double worst = 0.0;
  for (auto cond : {Conditioning::feature_concat, Conditioning::layer_modulation})
    for (bool proprio : {false, true}) {
      ModelConfig mc = tiny_model(cond, proprio);
      WorldModel m(mc);
      perturb_parameters(m, 4);
      const RawContext r = random_context(m, 4, 5);
      Rng rng(6);
      Mat dv(mc.vis_dim, 4), dp(mc.prop_dim, 4);
      for (Eigen::Index i = 0; i < dv.size(); ++i) dv.data()[i] = rng.normal();
      for (Eigen::Index i = 0; i < dp.size(); ++i) dp.data()[i] = rng.normal();

      PredictorTape tape;
      m.predict(assemble(m, r), &tape);
      Vec grad = Vec::Zero(m.parameter_count());
      const ContextGrad cg = m.backward(tape, dv, proprio ? dp : Mat(0, dv.cols()), &grad);
      std::vector<Mat> d_act;
      for (int s = 0; s < mc.context; ++s) {
        d_act.push_back(m.backward_action(r.act[s], cg.act[s], &grad));
        if (proprio) m.backward_prop(r.prop[s], cg.prop[s], &grad);
      }
      WorldModel probe = m;
      const Vec fd = central_difference(
          [&](const Vec& th) {
            probe.parameters() = th;
            return probe_loss(probe, r, dv, dp);
          },
          m.parameters());
      worst = std::max(worst, relative_error(grad, fd));
      for (int s = 0; s < mc.context; ++s) {
        const Vec x0 = Eigen::Map<const Vec>(r.act[s].data(), r.act[s].size());
        const Vec fda = central_difference(
            [&](const Vec& x) {
              RawContext rr = r;
              rr.act[s] = Eigen::Map<const Mat>(x.data(), kActionDim, r.act[s].cols());
              return probe_loss(m, rr, dv, dp);
            },
            x0);
        const Vec ga = Eigen::Map<const Vec>(d_act[s].data(), d_act[s].size());
        worst = std::max(worst, fda.norm() == 0.0 ? ga.norm() : relative_error(ga, fda));
      }
    }
  return {worst < 1e-4, "max relative error " + fmt(worst, 3) + " over 4 model variants"};
}

// ---------------------------------------------------------------------------
// Loss identities

/// Teacher forcing evaluated one context at a time.
double sequential_teacher_forcing(const WorldModel& m, const EmbeddedData& emb, const std::vector<SliceRecord>& sl,
                                  int W) {
  const auto& c = m.config();
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& rec : sl) {
    const auto off = static_cast<Eigen::Index>(rec.offset);
    const Mat& vis = emb.vis[rec.trajectory];
    const Mat& prop = emb.prop[rec.trajectory];
    for (int t = 1; t <= W; ++t) {
      ContextBatch ctx = ContextBatch::empty(c.context, 1, c.vis_dim, c.prop_dim, c.action_embed_dim, c.proprio);
      for (int u = std::max(0, t - W); u < t; ++u) {
        const int slot = c.context - (t - u);
        ctx.vis[slot].col(0) = vis.col(off + u);
        if (c.proprio) ctx.prop[slot] = m.encode_prop(prop.col(off + u));
        ctx.act[slot] = m.encode_action(emb.act[rec.trajectory].col(off + u));
        ctx.mask(slot, 0) = 1.0;
      }
      const LatentBatch out = m.predict(ctx);
      double l = (out.vis.col(0) - vis.col(off + t)).squaredNorm() / c.vis_dim;
      if (c.proprio) l += (out.prop - m.encode_prop(prop.col(off + t))).squaredNorm() / c.prop_dim;
      total += l;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

Verdict loss_identities() {
  const LoadedDataset ds = small_dataset(12, 12);
  WorldModel m(tiny_model(Conditioning::layer_modulation, true, 3));
  perturb_parameters(m, 21, 0.2);
  const EmbeddedData emb = embed_dataset(m, ds.data, ds.stats);
  auto pick = [&](int slice_W) {
    const auto all = slice(ds.data, ds.split.train, slice_W).slices;
    std::vector<SliceRecord> out;
    for (std::size_t i = 0; i < 6; ++i) out.push_back(all[i * all.size() / 6]);
    return out;
  };
  const auto sl = pick(3);
  std::vector<std::string> failures;

  Rng rng(1);
  for (Strategy s : {Strategy::last_gradient_only, Strategy::all_gradients, Strategy::equal_order}) {
    Vec g1 = Vec::Zero(m.parameter_count());
    Vec g2 = Vec::Zero(m.parameter_count());
    const LossReport tf = teacher_forcing_loss(m, emb, sl, 3, &g1);
    const LossReport ms = multistep_loss(m, emb, sl, 3, 1, s, 0.0, rng, &g2);
    if (tf.total != ms.total || g1 != g2) failures.push_back("k=1 " + to_string(s));
  }

  const auto long_sl = pick(3 + 5 - 1);
  const UnrollErrors u = unroll_error(m, emb, long_sl, 3, 5, 3);
  const double tf_long = teacher_forcing_loss(m, emb, long_sl, 3).total;
  if (u.l2[0] != tf_long) failures.push_back("horizon-1 unroll");

  const double batched = teacher_forcing_loss(m, emb, sl, 3).total;
  const double seq = sequential_teacher_forcing(m, emb, sl, 3);
  const double rel = std::abs(batched - seq) / std::abs(seq);
  if (!(rel <= 1e-6)) failures.push_back("all-context batching");

  std::string detail = "k=1 and horizon-1 identities bit-exact, batched vs sequential rel. diff " + fmt(rel, 3);
  if (!failures.empty()) {
    detail = "failed:";
    for (const auto& f : failures) detail += " [" + f + "]";
  }
  return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// Planner checks

class Quadratic : public PlanObjective {
 public:
  Quadratic(Vec center, int horizon, int action_dim) : c_(std::move(center)), H_(horizon), A_(action_dim) {}
  int horizon() const override { return H_; }
  int action_dim() const override { return A_; }
  Vec evaluate(const Mat& x, int) const override {
    {
      std::lock_guard<std::mutex> lock(mu_);
      populations.push_back(x);
    }
    return (x.colwise() - c_).array().square().colwise().sum().transpose();
  }
  mutable std::vector<Mat> populations;

 private:
  Vec c_;
  int H_, A_;
  mutable std::mutex mu_;
};

Verdict cem_correctness() {
  Quadratic q1((Vec(1) << 0.7).finished(), 1, 1);
  PlannerConfig c;
  c.N = 64;
  c.K = 10;
  c.J = 30;
  c.seed = 5;
  const double x = cem_plan(q1, c).best_actions(0, 0);
  const double dist = std::abs(x - 0.7);

  const Vec center = (Vec(4) << 0.5, -1.0, 0.2, 2.0).finished();
  Quadratic q(center, 2, 2);
  PlannerConfig b;
  b.N = 40;
  b.K = 7;
  b.J = 6;
  b.mu0 = 0.1;
  b.sigma0 = 1.5;
  b.seed = 11;
  const PlanResult r = cem_plan(q, b);
  Vec mu = Vec::Constant(4, b.mu0);
  Vec sigma = Vec::Constant(4, b.sigma0);
  double worst = 0.0;
  for (int it = 0; it < b.J; ++it) {
    const Mat& pop = q.populations.at(static_cast<std::size_t>(it));
    for (int i = 0; i < b.N; ++i) {
      Rng rng = Rng::stream(b.seed, {kCemStreamKey, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(i)});
      for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(pop(d, i) - (mu[d] + sigma[d] * rng.normal())));
    }
    std::vector<double> cost(static_cast<std::size_t>(b.N));
    for (int i = 0; i < b.N; ++i) cost[i] = (pop.col(i) - center).squaredNorm();
    std::vector<bool> taken(static_cast<std::size_t>(b.N), false);
    std::vector<int> elites;
    for (int e = 0; e < b.K; ++e) {
      int best = -1;
      for (int i = 0; i < b.N; ++i)
        if (!taken[i] && (best < 0 || cost[i] < cost[best])) best = i;
      taken[best] = true;
      elites.push_back(best);
    }
    for (int d = 0; d < 4; ++d) {
      double mean = 0;
      for (int e : elites) mean += pop(d, e);
      mean /= b.K;
      double var = 0;
      for (int e : elites) var += (pop(d, e) - mean) * (pop(d, e) - mean);
      mu[d] = mean;
      sigma[d] = std::max(std::sqrt(var / (b.K - 1)), b.sigma_floor);
    }
  }
  for (int d = 0; d < 4; ++d) worst = std::max(worst, std::abs(r.best_actions(d / 2, d % 2) - mu[d]));
  return {dist < 0.05 && worst <= 1e-6,
          "1-D optimum missed by " + fmt(dist, 3) + ", elite refit deviation " + fmt(worst, 3)};
}

Verdict cma_sphere() {
  Quadratic q(Vec::Zero(12), 6, 2);
  PlannerConfig c;
  c.kind = PlannerKind::cma_diag;
  c.N = 300;
  c.J = 30;
  c.mu0 = 1.0;
  c.seed = 2;
  const PlanResult a = plan(q, c);
  const PlanResult b = plan(q, c);
  const bool same = a.best_actions == b.best_actions && a.best_cost == b.best_cost;
  const bool budget = a.evaluations <= 300u * 30u;
  return {a.best_cost < 1e-3 && same && budget, "cost " + fmt(a.best_cost, 3) + " after " +
                                                     std::to_string(a.evaluations) + " evaluations, repeat " +
                                                     (same ? "identical" : "differs")};
}

Verdict hyperparameters() {
  const RunConfig c = load_run_config(kSource / "configs" / "wall.json");
  std::vector<std::string> bad;
  auto expect = [&](const char* name, double got, double want) {
    if (got != want) bad.push_back(std::string(name) + "=" + fmt(got));
  };
  expect("N", c.planner.optimizer.N, 300);
  expect("H", c.planner.problem.H, 6);
  expect("m", c.planner.m, 6);
  expect("K", c.planner.optimizer.K, 10);
  expect("J", c.planner.optimizer.J, 30);
  expect("Wp", c.planner.problem.Wp, 2);
  expect("f", c.dataset.frameskip, 5);
  expect("M", c.planner.M, 30);
  expect("lr", c.training.lr, 5e-4);
  expect("wd_start", c.training.weight_decay_start, 1e-7);
  expect("wd_final", c.training.weight_decay_final, 1e-6);
  expect("clip", c.training.grad_clip, 1.0);
  expect("beta1", c.training.adam_beta1, 0.9);
  expect("beta2", c.training.adam_beta2, 0.995);
  if (to_json(run_config_from_json(to_json(c))) != to_json(c)) bad.push_back("snapshot round-trip");
  std::string detail = "wall preset matches all 14 planning and training values";
  if (!bad.empty()) {
    detail = "mismatch:";
    for (const auto& b : bad) detail += " " + b;
  }
  return {bad.empty(), detail};
}

Verdict action_scores() {
  const double e[] = {0.0, 0.05, 0.1, 0.2};
  const double want[] = {80.0, 40.0, 0.0, 0.0};
  std::string got;
  bool ok = true;
  for (int i = 0; i < 4; ++i) {
    const double s = action_score(e[i]);
    ok = ok && s == want[i];
    got += (i ? ", " : "") + fmt(s);
  }
  return {ok, "scores " + got};
}

// ---------------------------------------------------------------------------
// Determinism of the command-line pipeline

std::string diff_dirs(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a))
    if (e.is_regular_file() && e.path().filename() != "config.json") files.push_back(e.path().filename());
  if (files.empty()) return "no outputs in " + a.string();
  for (const auto& f : files)
    if (!fs::exists(b / f) || read_file(a / f) != read_file(b / f)) return f.string() + " differs";
  return {};
}

Verdict determinism(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  nlohmann::json j = nlohmann::json::parse(read_file(kSource / "configs" / "wall.json"));
  j["dataset"]["n_traj"] = 40;
  j["dataset"]["traj_len"] = 14;
  j["training"]["epochs"] = 2;
  j["training"]["batch_size"] = 64;
  j["model"]["width"] = 16;
  j["model"]["vis_dim"] = 16;
  j["planner"]["N"] = 40;
  j["planner"]["J"] = 3;
  j["io"]["out_dir"] = (dir / "data").string();
  write_file(dir / "config.json", j.dump(2));

  CommandOptions o;
  o.config = dir / "config.json";
  cmd_generate(o);
  std::vector<std::string> problems;
  auto train_into = [&](const std::string& name, int threads) {
    CommandOptions t = o;
    t.out = (dir / name).string();
    t.threads = threads;
    cmd_train(t);
  };
  train_into("train1", 1);
  train_into("train2", 1);
  train_into("train3", 3);
  if (auto d = diff_dirs(dir / "train1", dir / "train2"); !d.empty()) problems.push_back("train repeat: " + d);
  if (auto d = diff_dirs(dir / "train1", dir / "train3"); !d.empty()) problems.push_back("train threads: " + d);

  auto plan_into = [&](const std::string& name, int threads) {
    CommandOptions p = o;
    p.out = (dir / name).string();
    p.threads = threads;
    p.seed = 5;
    p.checkpoint = (dir / "train1" / "ckpt_ep2.bin").string();
    cmd_plan(p);
  };
  plan_into("plan1", 1);
  plan_into("plan2", 1);
  plan_into("plan3", 2);
  if (auto d = diff_dirs(dir / "plan1", dir / "plan2"); !d.empty()) problems.push_back("plan repeat: " + d);
  if (auto d = diff_dirs(dir / "plan1", dir / "plan3"); !d.empty()) problems.push_back("plan threads: " + d);

  std::string detail = "train and plan outputs byte-identical across repeats and thread counts";
  if (!problems.empty()) {
    detail.clear();
    for (const auto& p : problems) detail += (detail.empty() ? "" : "; ") + p;
  }
  return {problems.empty(), detail};
}

// ---------------------------------------------------------------------------
// Trend experiments on the full wall preset

/**
 * @brief Trained runs and success rates, cached under a work directory.
 *
 * A run is reused only when its stored configuration fingerprint matches;
 * success rates are cached per (run, evaluator, epoch).
 */
class Lab {
 public:
  Lab(fs::path work, int threads) : work_(std::move(work)), threads_(threads) {
    fs::create_directories(work_);
    base_ = load_run_config(kSource / "configs" / "wall.json");
    base_.io.out_dir = (work_ / "data").string();
    base_.io.dataset = (work_ / "data" / "dataset").string();
  }

  const RunConfig& base() const { return base_; }

  RunConfig variant(int seed, bool proprio, int rollout_steps) const {
    RunConfig c = base_;
    c.training.seed = static_cast<std::uint64_t>(seed);
    c.model.init_seed = 10 + static_cast<std::uint64_t>(seed);
    c.model.proprio = proprio;
    c.training.rollout_steps = rollout_steps;
    return c;
  }

  const LoadedDataset& dataset() {
    if (!ds_) {
      const fs::path dir = work_ / "data";
      RunConfig c = base_;
      c.io.dataset.clear();
      if (!fresh(dir, fingerprint(to_json(c)["dataset"].dump() + to_json(c)["env"].dump()))) {
        fs::remove_all(dir);
        fs::create_directories(dir);
        save_run_config(c, work_ / "data.json");
        CommandOptions o;
        o.config = work_ / "data.json";
        o.threads = threads_;
        cmd_generate(o);
        mark(dir, fingerprint(to_json(c)["dataset"].dump() + to_json(c)["env"].dump()));
      }
      ds_ = load_dataset(dir / "dataset");
    }
    return *ds_;
  }

  /// Trains `cfg` into `<work>/<name>` unless an identical run is already there.
  fs::path run(const std::string& name, RunConfig cfg) {
    dataset();
    const fs::path dir = work_ / name;
    cfg.io.out_dir = dir.string();
    const std::string fp = run_fingerprint(cfg);
    if (!fresh(dir, fp)) {
      log("training " + name);
      fs::remove_all(dir);
      save_run_config(cfg, work_ / (name + ".json"));
      CommandOptions o;
      o.config = work_ / (name + ".json");
      o.threads = threads_;
      cmd_train(o);
      mark(dir, fp);
    }
    return dir;
  }

  Checkpoint checkpoint(const fs::path& dir, int epoch) const {
    return load_checkpoint(dir / ("ckpt_ep" + std::to_string(epoch) + ".bin"));
  }

  /// Success rate over the preset's episode set.
  double success(const fs::path& dir, int epoch, const std::string& tag, const PlannerConfig& planner,
                 const PlanProblem& problem) {
    const fs::path cache = dir / ("success_" + tag + ".csv");
    std::map<int, double> known;
    if (std::ifstream in(cache); in) {
      int e;
      char comma;
      double r;
      while (in >> e >> comma >> r) known[e] = r;
    }
    if (auto it = known.find(epoch); it != known.end()) return it->second;
    const auto t0 = std::chrono::steady_clock::now();
    const Checkpoint ck = checkpoint(dir, epoch);
    const WorldModel model = model_from_checkpoint(ck);
    PlannerConfig pc = planner;
    pc.threads = 1;
    const WorldModelController ctl(model, ck.stats, base_.env, problem, pc, ck.trained_context);
    const double rate =
        success_rate(base_.env, ctl, base_.mpc(), base_.eval.episodes, base_.eval.seed_base, threads_).rate;
    std::ofstream(cache, std::ios::app) << epoch << ',' << std::setprecision(17) << rate << '\n';
    log(dir.filename().string() + " " + tag + " epoch " + std::to_string(epoch) + ": success " + fmt(rate) + " (" +
        fmt(seconds_since(t0), 3) + " s)");
    return rate;
  }

  double success(const fs::path& dir, int epoch) {
    return success(dir, epoch, "cem_L2", base_.planner.optimizer, base_.planner.problem);
  }

  /// Recursive prediction errors of a checkpoint on every validation slice.
  UnrollErrors val_unroll(const Checkpoint& ck, int prefix_W, int horizons, int Wp) {
    const LoadedDataset& ds = dataset();
    const WorldModel model = model_from_checkpoint(ck);
    const Dataset val = subset(ds.data, ds.split.val);
    const EmbeddedData emb = embed_dataset(model, val, ck.stats, threads_);
    const auto slices = slice(val, prefix_W + horizons - 1).slices;
    return unroll_error(model, emb, slices, prefix_W, horizons, Wp);
  }

  static double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  static void log(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

 private:
  static Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
    Dataset out;
    out.env = d.env;
    out.policy = d.policy;
    out.frameskip = d.frameskip;
    out.seed = d.seed;
    for (std::size_t i : idx) out.trajectories.push_back(d.trajectories[i]);
    return out;
  }

  static std::string fingerprint(const std::string& s) { return hex64(fnv1a64(s.data(), s.size())); }

  /// Paths in `io` do not affect results, so a run survives a moved or respelled work directory.
  static std::string run_fingerprint(const RunConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("io");
    return fingerprint(j.dump());
  }

  static bool fresh(const fs::path& dir, const std::string& fp) {
    const fs::path marker = dir / ".complete";
    return fs::exists(marker) && read_file(marker) == fp;
  }

  static void mark(const fs::path& dir, const std::string& fp) { write_file(dir / ".complete", fp); }

  fs::path work_;
  int threads_;
  RunConfig base_;
  std::optional<LoadedDataset> ds_;
};

constexpr int kFinalEpoch = 50;

Verdict planner_ordering(Lab& lab) {
  const fs::path a = lab.run("proprio_s1", lab.variant(1, true, 1));
  const RunConfig& b = lab.base();
  PlanProblem l1 = b.planner.problem;
  l1.distance = Distance::L1;
  const double cem_l2 = lab.success(a, kFinalEpoch);
  const double cem_l1 = lab.success(a, kFinalEpoch, "cem_L1", b.planner.optimizer, l1);
  const double gd_l2 =
      lab.success(a, kFinalEpoch, "gd_L2", planner_for(PlannerKind::gd, b.planner.optimizer), b.planner.problem);
  const bool pass = cem_l2 >= cem_l1 - 0.05 && cem_l2 - gd_l2 >= 0.3;
  return {pass, "success CEM-L2 " + fmt(cem_l2) + ", CEM-L1 " + fmt(cem_l1) + ", GD-L2 " + fmt(gd_l2) +
                    " over " + std::to_string(b.eval.episodes) + " episodes"};
}

Verdict window_finding(Lab& lab) {
  RunConfig c = lab.variant(1, true, 1);
  c.training.W = 1;
  c.model.context = 2;
  c.planner.problem.Wp = 1;
  const fs::path dir = lab.run("w1_s1", c);
  const Checkpoint ck = lab.checkpoint(dir, kFinalEpoch);
  const double wp1 = lab.val_unroll(ck, 1, 5, 1).l2[4];
  const double wp2 = lab.val_unroll(ck, 1, 5, 2).l2[4];
  return {wp2 >= 1.1 * wp1, "W=1 model, horizon-5 unroll MSE Wp=1 " + fmt(wp1) + ", Wp=2 " + fmt(wp2) + " (ratio " +
                                fmt(wp2 / wp1, 3) + ")"};
}

Verdict multistep_trend(Lab& lab) {
  std::string detail;
  int wins = 0;
  for (int seed = 1; seed <= 3; ++seed) {
    const std::string s = std::to_string(seed);
    const fs::path one = lab.run("proprio_s" + s, lab.variant(seed, true, 1));
    const fs::path two = lab.run("twostep_s" + s, lab.variant(seed, true, 2));
    const double e1 = lab.val_unroll(lab.checkpoint(one, kFinalEpoch), 3, 5, 3).l2[4];
    const double e2 = lab.val_unroll(lab.checkpoint(two, kFinalEpoch), 3, 5, 3).l2[4];
    const bool win = e2 <= e1;
    wins += win;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + s + ": 1-step " + fmt(e1) + ", 2-step " + fmt(e2);
    if (seed == 1 && win) return {true, "horizon-5 unroll MSE " + detail};
    if (seed >= 2 && (wins >= 2 || seed - wins >= 2)) break;
  }
  return {wins >= 2, "horizon-5 unroll MSE " + detail + " (" + std::to_string(wins) + "/3 seeds favour 2-step)"};
}

Verdict proprio_trend(Lab& lab) {
  const int n = lab.base().eval.trailing_n;
  double with = 0.0, without = 0.0;
  std::string detail;
  for (int seed = 1; seed <= 3; ++seed) {
    const std::string s = std::to_string(seed);
    for (bool proprio : {true, false}) {
      const fs::path dir = lab.run((proprio ? "proprio_s" : "noproprio_s") + s, lab.variant(seed, proprio, 1));
      std::vector<double> series;
      for (int e = kFinalEpoch - n + 1; e <= kFinalEpoch; ++e) series.push_back(lab.success(dir, e));
      const TrailingStat t = trailing_average(series, n);
      (proprio ? with : without) += t.mean / 3.0;
      detail += std::string(detail.empty() ? "" : ", ") + (proprio ? "p" : "np") + s + " " + fmt(t.mean, 3);
    }
  }
  return {with >= without - 0.02, "trailing-" + std::to_string(n) + " success with proprio " + fmt(with) +
                                      ", without " + fmt(without) + " (" + detail + ")"};
}

Verdict spearman_sign(Lab& lab) {
  const fs::path dir = lab.run("proprio_s1", lab.variant(1, true, 1));
  std::vector<int> epochs;
  for (int e = 0; e <= 20; ++e) epochs.push_back(e);
  for (int e = kFinalEpoch - lab.base().eval.trailing_n + 1; e <= kFinalEpoch; ++e) epochs.push_back(e);
  std::vector<double> err, succ;
  for (int e : epochs) {
    const Checkpoint ck = lab.checkpoint(dir, e);
    err.push_back(lab.val_unroll(ck, ck.trained_context, 1, ck.trained_context).vis_l1[0]);
    succ.push_back(lab.success(dir, e));
  }
  const auto rho = spearman(err, succ);
  if (!rho) return {false, "success rate constant across checkpoints; correlation undefined"};
  return {*rho < -0.3, "Spearman(horizon-1 visual L1, success) = " + fmt(*rho, 3) + " over " +
                           std::to_string(epochs.size()) + " checkpoints"};
}

struct Criterion {
  int id;
  const char* name;
  bool trend;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite: one pass/fail line per criterion"};
  bool fast = false, trends = false;
  fs::path work = fs::temp_directory_path() / "wmplan_acceptance";
  std::vector<int> only;
  int threads = 1;
  app.add_flag("--fast", fast, "Run the quick exact-value and property criteria");
  app.add_flag("--trends", trends, "Run the training-based trend criteria");
  app.add_option("--work", work, "Directory for datasets, runs and caches");
  app.add_option("--only", only, "Criterion numbers to run")->delimiter(',');
  app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  if (!fast && !trends && only.empty()) fast = trends = true;

  std::unique_ptr<Lab> lab;
  auto get_lab = [&]() -> Lab& {
    if (!lab) lab = std::make_unique<Lab>(work, threads);
    return *lab;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient oracle", false, gradient_oracle},
      {2, "loss identities", false, loss_identities},
      {3, "CEM correctness", false, cem_correctness},
      {4, "diagonal CMA-ES", false, cma_sphere},
      {5, "hyperparameter fidelity", false, hyperparameters},
      {6, "action score", false, action_scores},
      {7, "planner ordering", true, [&] { return planner_ordering(get_lab()); }},
      {8, "planning window within training window", true, [&] { return window_finding(get_lab()); }},
      {9, "multistep trend", true, [&] { return multistep_trend(get_lab()); }},
      {10, "proprioception trend", true, [&] { return proprio_trend(get_lab()); }},
      {11, "Spearman sign", true, [&] { return spearman_sign(get_lab()); }},
      {12, "determinism", false, [&] { return determinism(work / "determinism"); }},
  };

  const std::set<int> selected(only.begin(), only.end());
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    const bool wanted = selected.empty() ? (c.trend ? trends : fast) : selected.count(c.id) > 0;
    if (!wanted) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << "criterion " << std::setw(2) << c.id << (v.pass ? " PASS " : " FAIL ") << c.name << ": " << v.detail
              << " (" << fmt(Lab::seconds_since(t0), 3) << " s)" << std::endl;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
