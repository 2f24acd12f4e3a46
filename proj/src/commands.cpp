#include "wmplan/commands.hpp"

#include <fnmatch.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <cctype>

#include "wmplan/eval.hpp"

namespace wmplan {

namespace fs = std::filesystem;

namespace {

constexpr int kActionProbeSlices = 8;
constexpr std::size_t kEvalSlices = 256;

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string ckpt_name(int epoch) { return "ckpt_ep" + std::to_string(epoch) + ".bin"; }

LoadedDataset load_matching_dataset(const RunConfig& cfg) {
  const fs::path stem = dataset_stem(cfg);
  LoadedDataset ds = load_dataset(stem);
  if (ds.env_hash != env_hash(cfg.env))
    throw InvariantViolation("dataset " + stem.string() + " was generated for a different env configuration (hash " +
                             ds.env_hash + ", config " + env_hash(cfg.env) + ")");
  if (ds.data.frameskip != cfg.dataset.frameskip)
    throw InvariantViolation("dataset " + stem.string() + " uses frameskip " + std::to_string(ds.data.frameskip) +
                             " but the config asks for " + std::to_string(cfg.dataset.frameskip));
  return ds;
}

Checkpoint load_checked_checkpoint(const RunConfig& cfg, const fs::path& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.model.grid != cfg.env.grid) throw ConfigError("checkpoint " + path.string() + " grid differs from env.grid");
  if (ck.model.proprio && !cfg.env.proprio)
    throw ConfigError("checkpoint " + path.string() + " needs proprioception but env.proprio is false");
  return ck;
}

std::vector<SliceRecord> evenly(const std::vector<SliceRecord>& all, std::size_t k) {
  std::vector<SliceRecord> out;
  k = std::min(k, all.size());
  for (std::size_t i = 0; i < k; ++i) out.push_back(all[i * all.size() / k]);
  return out;
}

struct CheckpointMetrics {
  std::string name;
  int epoch = 0;
  double success = 0.0;
  UnrollErrors unroll;
  ProbeErrors probe;
  double action_error = 0.0;
  double action_score = 0.0;
  std::vector<EpisodeResult> episodes;
};

CheckpointMetrics evaluate_checkpoint(const RunConfig& cfg, const Checkpoint& ck, const std::string& name,
                                      const LoadedDataset& ds, int threads) {
  CheckpointMetrics r;
  r.name = name;
  r.epoch = ck.epoch;
  const WorldModel model = model_from_checkpoint(ck);
  PlannerConfig pc = cfg.planner.optimizer;
  pc.threads = 1;
  const WorldModelController ctl(model, ck.stats, cfg.env, cfg.planner.problem, pc, ck.trained_context);
  const SuccessSummary s = success_rate(cfg.env, ctl, cfg.mpc(), cfg.eval.episodes, cfg.eval.seed_base, threads);
  r.success = s.rate;
  r.episodes = s.episodes;

  const EmbeddedData emb = embed_dataset(model, ds.data, ds.stats, threads);
  const int W = ck.trained_context;
  const int n = cfg.eval.horizons;
  const auto val = evenly(slice(ds.data, ds.split.val, W + n - 1).slices, kEvalSlices);
  if (!val.empty()) {
    r.unroll = unroll_error(model, emb, val, W, n, W);
    const StateProbe probe = fit_state_probe(emb, ds.data, ds.split.train);
    r.probe = probe_error(model, emb, ds.data, val, probe, W, n, W);
  }

  const int H = cfg.planner.problem.H;
  const auto act_slices = evenly(slice(ds.data, ds.split.val, H).slices, kActionProbeSlices);
  for (std::size_t i = 0; i < act_slices.size(); ++i) {
    const auto& rec = act_slices[i];
    const auto& tr = ds.data.trajectories[rec.trajectory];
    Observation init = tr.observation(rec.offset);
    Observation goal = tr.observation(rec.offset + static_cast<std::size_t>(H));
    if (!model.config().proprio) {
      init.proprio.reset();
      goal.proprio.reset();
    }
    WorldModelObjective obj(model, ck.stats, init, goal, cfg.planner.problem, ck.trained_context);
    PlannerConfig c = pc;
    c.seed = splitmix64(pc.seed ^ (0xac7105ULL + i));
    const PlanResult pr = plan(obj, c);
    Mat gt(H, kActionDim);
    for (int h = 0; h < H; ++h)
      gt.row(h) = emb.act[rec.trajectory].col(static_cast<Eigen::Index>(rec.offset) + h).transpose();
    const ActionScore sc = action_error_and_score(pr.best_actions, gt);
    r.action_error += sc.error / static_cast<double>(act_slices.size());
    r.action_score += sc.score / static_cast<double>(act_slices.size());
  }
  return r;
}

std::vector<std::string> metric_columns(int horizons) {
  std::vector<std::string> cols;
  for (int h = 1; h <= horizons; ++h) {
    cols.push_back("unroll_l1_h" + std::to_string(h));
    cols.push_back("unroll_l2_h" + std::to_string(h));
    cols.push_back("unroll_vis_l1_h" + std::to_string(h));
    cols.push_back("unroll_vis_l2_h" + std::to_string(h));
    cols.push_back("probe_pos_h" + std::to_string(h));
    cols.push_back("probe_vel_h" + std::to_string(h));
  }
  cols.push_back("action_error");
  cols.push_back("action_score");
  return cols;
}

std::vector<double> metric_values(const CheckpointMetrics& m, int horizons) {
  std::vector<double> v;
  auto at = [](const std::vector<double>& xs, int h) { return h < static_cast<int>(xs.size()) ? xs[h] : 0.0; };
  for (int h = 0; h < horizons; ++h) {
    v.push_back(at(m.unroll.l1, h));
    v.push_back(at(m.unroll.l2, h));
    v.push_back(at(m.unroll.vis_l1, h));
    v.push_back(at(m.unroll.vis_l2, h));
    v.push_back(at(m.probe.pos, h));
    v.push_back(at(m.probe.vel, h));
  }
  v.push_back(m.action_error);
  v.push_back(m.action_score);
  return v;
}

struct TrainedRun {
  std::vector<Checkpoint> checkpoints;
  std::vector<EpochMetrics> epochs;
};

TrainedRun train_into(const RunConfig& cfg, const LoadedDataset& ds, const fs::path& dir, int threads) {
  fs::create_directories(dir);
  save_run_config(cfg, dir / "config.json");
  WorldModel model(cfg.model);
  std::ofstream csv(dir / "metrics.csv", std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
  csv << metrics_csv_header(cfg.training.rollout_steps, cfg.training.eval_horizon) << '\n';
  TrainOutput out = train(model, ds, cfg.training, threads, [&](const EpochMetrics& m, const Checkpoint& ck) {
    csv << metrics_csv_row(m) << '\n' << std::flush;
    save_checkpoint(ck, dir / ckpt_name(m.epoch));
    std::cerr << "epoch " << m.epoch << " val_loss " << m.val_loss << '\n';
  });
  std::ostringstream iv;
  iv << std::setprecision(17) << "step";
  for (int h = 1; h <= cfg.training.eval_horizon; ++h) iv << ",unroll_l1_h" << h << ",unroll_l2_h" << h;
  iv << '\n';
  for (const auto& [step, e] : out.interval_metrics) {
    iv << step;
    for (std::size_t h = 0; h < e.l1.size(); ++h) iv << ',' << e.l1[h] << ',' << e.l2[h];
    iv << '\n';
  }
  write_text(dir / "unroll_interval.csv", iv.str());
  return {std::move(out.checkpoints), std::move(out.epochs)};
}

double run_success(const RunConfig& cfg, const Checkpoint& ck, const PlannerConfig& planner, const PlanProblem& problem,
                   int threads) {
  const WorldModel model = model_from_checkpoint(ck);
  PlannerConfig pc = planner;
  pc.threads = 1;
  const WorldModelController ctl(model, ck.stats, cfg.env, problem, pc, ck.trained_context);
  return success_rate(cfg.env, ctl, cfg.mpc(), cfg.eval.episodes, cfg.eval.seed_base, threads).rate;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

SweepAxis sweep_axis_from_string(const std::string& s) {
  static const std::map<std::string, SweepAxis> axes = {
      {"planner", SweepAxis::planner}, {"rollout_steps", SweepAxis::rollout_steps},
      {"proprio", SweepAxis::proprio}, {"W", SweepAxis::W},
      {"conditioning", SweepAxis::conditioning}, {"depth", SweepAxis::depth},
      {"width", SweepAxis::width}};
  const auto it = axes.find(s);
  if (it == axes.end()) throw ConfigError("unknown sweep axis '" + s + "'");
  return it->second;
}

RunConfig resolve_config(const CommandOptions& opts, bool dataset_follows_out) {
  if (opts.config.empty()) throw ConfigError("--config is required");
  RunConfig cfg = load_run_config(opts.config);
  if (opts.out) {
    if (!dataset_follows_out && cfg.io.dataset.empty()) cfg.io.dataset = dataset_stem(cfg).string();
    cfg.io.out_dir = *opts.out;
  }
  if (opts.checkpoint) cfg.io.checkpoint = *opts.checkpoint;
  if (opts.threads < 1) throw ConfigError("--threads must be >= 1");
  return cfg;
}

fs::path dataset_stem(const RunConfig& cfg) {
  return cfg.io.dataset.empty() ? fs::path(cfg.io.out_dir) / "dataset" : fs::path(cfg.io.dataset);
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".wmplan.lock") {
  fs::create_directories(dir);
  std::FILE* f = std::fopen(path_.c_str(), "wx");
  if (!f)
    throw InvariantViolation("output directory " + dir.string() + " is in use by another invocation (remove " +
                             path_.string() + " if it is stale)");
  std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
  std::fclose(f);
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::vector<fs::path> glob_checkpoints(const std::string& pattern) {
  const fs::path p(pattern);
  const fs::path dir = p.has_parent_path() ? p.parent_path() : fs::path(".");
  const std::string name = p.filename().string();
  std::vector<fs::path> out;
  if (name.find_first_of("*?[") == std::string::npos) {
    if (!fs::exists(p)) throw std::runtime_error("missing checkpoint: " + p.string());
    out.push_back(p);
    return out;
  }
  if (!fs::is_directory(dir)) throw std::runtime_error("missing checkpoint directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && ::fnmatch(name.c_str(), e.path().filename().c_str(), 0) == 0) out.push_back(e.path());
  auto number = [](const fs::path& f) {
    const std::string s = f.stem().string();
    std::size_t end = s.size();
    std::size_t begin = end;
    while (begin > 0 && std::isdigit(static_cast<unsigned char>(s[begin - 1]))) --begin;
    return begin < end ? std::stoll(s.substr(begin)) : -1LL;
  };
  std::sort(out.begin(), out.end(), [&](const fs::path& a, const fs::path& b) {
    const auto na = number(a);
    const auto nb = number(b);
    return na != nb ? na < nb : a < b;
  });
  return out;
}

void cmd_generate(const CommandOptions& opts) {
  RunConfig cfg = resolve_config(opts, true);
  if (opts.seed) cfg.dataset.seed = *opts.seed;
  OutputLock lock(cfg.io.out_dir);
  const auto& d = cfg.dataset;
  const Dataset data = generate(cfg.env, d.policy, static_cast<std::size_t>(d.n_traj),
                                static_cast<std::size_t>(d.traj_len), d.seed, d.frameskip, opts.threads);
  const Split sp = split(data.trajectories.size(), d.train_frac, d.seed);
  const NormStats stats = compute_norm_stats(data, sp.train);
  save_dataset(data, dataset_stem(cfg), sp, stats, cfg.training.W);
  save_run_config(cfg, fs::path(cfg.io.out_dir) / "config.json");
  std::cout << "generated " << data.trajectories.size() << " trajectories (" << sp.train.size() << " train, "
            << sp.val.size() << " val) at " << dataset_stem(cfg).string() << '\n';
}

void cmd_train(const CommandOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (opts.seed) cfg.training.seed = *opts.seed;
  OutputLock lock(cfg.io.out_dir);
  const LoadedDataset ds = load_matching_dataset(cfg);
  const TrainedRun run = train_into(cfg, ds, cfg.io.out_dir, opts.threads);
  std::cout << "trained " << cfg.training.epochs << " epochs; checkpoints in " << cfg.io.out_dir << '\n';
}

void cmd_plan(const CommandOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.io.checkpoint.empty()) throw ConfigError("io.checkpoint is empty; pass --checkpoint");
  const std::uint64_t seed = opts.seed.value_or(cfg.eval.seed_base);
  OutputLock lock(cfg.io.out_dir);
  const Checkpoint ck = load_checked_checkpoint(cfg, cfg.io.checkpoint);
  const WorldModel model = model_from_checkpoint(ck);
  PlannerConfig pc = cfg.planner.optimizer;
  pc.threads = opts.threads;
  WorldModelController ctl(model, ck.stats, cfg.env, cfg.planner.problem, pc, ck.trained_context);
  std::vector<PlanResult> log;
  ctl.record_to(&log);
  Episode ep = sample_episode(seed, cfg.env);
  if (opts.self_goal) {
    ep.init.goal_pos = ep.init.pos;
    ep.goal_obs = render(ep.init, cfg.env);
  }
  const EpisodeResult r = run_episode(cfg.env, ep.init, ep.goal_obs, ctl, cfg.mpc(), seed);

  const fs::path dir = cfg.io.out_dir;
  std::ostringstream trace;
  trace << std::setprecision(17) << "call,iteration,best_cost,mean,std\n";
  for (std::size_t c = 0; c < log.size(); ++c)
    for (std::size_t i = 0; i < log[c].cost_trace.size(); ++i)
      trace << c << ',' << i << ',' << log[c].cost_trace[i].best << ',' << log[c].cost_trace[i].mean << ','
            << log[c].cost_trace[i].std << '\n';
  write_text(dir / "plan_trace.csv", trace.str());
  write_text(dir / "episode.jsonl", episode_jsonl(r));
  nlohmann::json res;
  res["seed"] = seed;
  res["success"] = r.success;
  res["steps_taken"] = r.steps_taken;
  res["final_distance"] = r.final_distance;
  res["planning_calls"] = r.planning_calls;
  res["planner"] = to_string(pc.kind);
  res["checkpoint"] = cfg.io.checkpoint;
  nlohmann::json plans = nlohmann::json::array();
  for (const auto& p : log) {
    nlohmann::json jp;
    jp["best_cost"] = p.best_cost;
    jp["evaluations"] = p.evaluations;
    std::vector<std::vector<double>> acts;
    for (Eigen::Index h = 0; h < p.best_actions.rows(); ++h) acts.push_back({p.best_actions(h, 0), p.best_actions(h, 1)});
    jp["best_actions"] = acts;
    plans.push_back(jp);
  }
  res["plans"] = plans;
  write_text(dir / "plan_result.json", res.dump(2) + "\n");
  std::cout << (r.success ? "success" : "failure") << " after " << r.steps_taken << " steps, " << r.planning_calls
            << " planning calls, final distance " << r.final_distance << '\n';
}

void cmd_eval(const CommandOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (cfg.io.checkpoint.empty()) throw ConfigError("io.checkpoint is empty; pass --checkpoint");
  if (opts.seed) cfg.eval.seed_base = *opts.seed;
  OutputLock lock(cfg.io.out_dir);
  const auto paths = glob_checkpoints(cfg.io.checkpoint);
  if (paths.empty()) throw std::runtime_error("no checkpoint matches " + cfg.io.checkpoint);
  const LoadedDataset ds = load_matching_dataset(cfg);
  const int n = cfg.eval.horizons;
  const auto cols = metric_columns(n);

  std::vector<CheckpointMetrics> rows;
  for (const auto& p : paths) {
    const Checkpoint ck = load_checked_checkpoint(cfg, p);
    rows.push_back(evaluate_checkpoint(cfg, ck, p.filename().string(), ds, opts.threads));
    std::cerr << p.filename().string() << " success " << rows.back().success << '\n';
  }

  const fs::path dir = cfg.io.out_dir;
  std::ostringstream csv;
  csv << "checkpoint,epoch,success";
  for (const auto& c : cols) csv << ',' << c;
  csv << '\n';
  std::ostringstream episodes;
  for (const auto& r : rows) {
    csv << r.name << ',' << r.epoch << ',' << fmt(r.success);
    for (double v : metric_values(r, n)) csv << ',' << fmt(v);
    csv << '\n';
    for (const auto& e : r.episodes) {
      nlohmann::json j;
      j["checkpoint"] = r.name;
      j["seed"] = e.seed;
      j["success"] = e.success;
      j["steps_taken"] = e.steps_taken;
      j["final_distance"] = e.final_distance;
      j["planning_calls"] = e.planning_calls;
      episodes << j.dump() << '\n';
    }
  }
  write_text(dir / "metrics.csv", csv.str());
  write_text(dir / "episodes.jsonl", episodes.str());

  std::ostringstream sp;
  sp << "metric,spearman\n";
  std::vector<double> success;
  for (const auto& r : rows) success.push_back(r.success);
  for (std::size_t c = 0; c < cols.size(); ++c) {
    sp << cols[c] << ',';
    if (rows.size() >= 2) {
      std::vector<double> xs;
      for (const auto& r : rows) xs.push_back(metric_values(r, n)[c]);
      if (const auto rho = spearman(xs, success)) sp << fmt(*rho);
    }
    sp << '\n';
  }
  write_text(dir / "spearman.csv", sp.str());
  std::cout << "evaluated " << rows.size() << " checkpoints into " << dir.string() << '\n';
}

void cmd_sweep(const CommandOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (opts.seed) cfg.training.seed = *opts.seed;
  const SweepAxis axis = sweep_axis_from_string(opts.axis);
  OutputLock lock(cfg.io.out_dir);
  const fs::path dir = cfg.io.out_dir;
  std::ostringstream csv;

  if (axis == SweepAxis::planner) {
    if (cfg.io.checkpoint.empty()) throw ConfigError("io.checkpoint is empty; pass --checkpoint");
    const auto paths = glob_checkpoints(cfg.io.checkpoint);
    if (paths.empty()) throw std::runtime_error("no checkpoint matches " + cfg.io.checkpoint);
    const Checkpoint ck = load_checked_checkpoint(cfg, paths.back());
    csv << "planner,distance,success\n";
    for (PlannerKind k : {PlannerKind::cem, PlannerKind::cma_diag, PlannerKind::gd, PlannerKind::adam})
      for (Distance d : {Distance::L1, Distance::L2}) {
        PlanProblem pr = cfg.planner.problem;
        pr.distance = d;
        const double s = run_success(cfg, ck, planner_for(k, cfg.planner.optimizer), pr, opts.threads);
        csv << to_string(k) << ',' << to_string(d) << ',' << fmt(s) << '\n';
        std::cerr << to_string(k) << '-' << to_string(d) << " success " << s << '\n';
      }
    write_text(dir / "sweep.csv", csv.str());
    return;
  }

  const LoadedDataset ds = load_matching_dataset(cfg);
  std::vector<std::pair<std::string, RunConfig>> variants;
  auto add = [&](const std::string& label, RunConfig v) {
    v.model.context = std::max(v.model.context, v.training.W);
    v.planner.problem.Wp = std::min(v.planner.problem.Wp, v.training.W);
    v.validate();
    variants.emplace_back(label, std::move(v));
  };
  switch (axis) {
    case SweepAxis::rollout_steps:
      for (int k : {1, 2, 3, 6}) {
        RunConfig v = cfg;
        v.training.rollout_steps = k;
        if (k > v.training.W) {
          v.training.W = k + 1;
          v.training.batch_size = std::max(1, v.training.batch_size / 2);
        }
        add(std::to_string(k), v);
      }
      break;
    case SweepAxis::proprio:
      for (bool p : {false, true}) {
        RunConfig v = cfg;
        v.model.proprio = p;
        v.env.proprio = true;
        add(p ? "true" : "false", v);
      }
      break;
    case SweepAxis::W:
      for (int w : {1, 2, 3, 5, 7}) {
        RunConfig v = cfg;
        v.training.W = w;
        v.training.rollout_steps = std::min(v.training.rollout_steps, w);
        add(std::to_string(w), v);
      }
      break;
    case SweepAxis::conditioning:
      for (Conditioning c : {Conditioning::feature_concat, Conditioning::layer_modulation}) {
        RunConfig v = cfg;
        v.model.conditioning = c;
        add(to_string(c), v);
      }
      break;
    case SweepAxis::depth:
      for (int d : {3, 6, 12}) {
        RunConfig v = cfg;
        v.model.depth = d;
        add(std::to_string(d), v);
      }
      break;
    case SweepAxis::width:
      for (int w : {32, 64, 128}) {
        RunConfig v = cfg;
        v.model.width = w;
        add(std::to_string(w), v);
      }
      break;
    case SweepAxis::planner:
      break;
  }

  csv << "axis,value,success_mean,success_std,val_loss,val_unroll_l2_last\n";
  for (const auto& [label, v] : variants) {
    const TrainedRun run = train_into(v, ds, dir / (opts.axis + "_" + label), opts.threads);
    std::vector<double> series;
    const auto n_ck = run.checkpoints.size();
    const auto first = n_ck > static_cast<std::size_t>(v.eval.trailing_n) ? n_ck - v.eval.trailing_n : std::size_t{1};
    for (std::size_t i = std::min(first, n_ck - 1); i < n_ck; ++i)
      series.push_back(run_success(v, run.checkpoints[i], v.planner.optimizer, v.planner.problem, opts.threads));
    const TrailingStat t = trailing_average(series, v.eval.trailing_n);
    const EpochMetrics& last = run.epochs.back();
    csv << opts.axis << ',' << label << ',' << fmt(t.mean) << ',' << fmt(t.std) << ',' << fmt(last.val_loss) << ','
        << fmt(last.val_unroll.l2.empty() ? 0.0 : last.val_unroll.l2.back()) << '\n';
    std::cerr << opts.axis << '=' << label << " success " << t.mean << '\n';
  }
  write_text(dir / "sweep.csv", csv.str());
}

int run_command(const std::string& name, const CommandOptions& opts) {
  try {
    if (name == "generate") {
      cmd_generate(opts);
    } else if (name == "train") {
      cmd_train(opts);
    } else if (name == "plan") {
      cmd_plan(opts);
    } else if (name == "eval") {
      cmd_eval(opts);
    } else if (name == "sweep") {
      cmd_sweep(opts);
    } else {
      throw ConfigError("unknown command '" + name + "'");
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}

}  // namespace wmplan
