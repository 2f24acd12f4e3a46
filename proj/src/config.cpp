#include "wmplan/config.hpp"

#include <fstream>
#include <set>

namespace wmplan {

using nlohmann::json;

namespace {

// Reads the keys of one object, remembering which ones were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config key '" + path_ + "' must be an object");
  }

  template <class T>
  void read(const char* key, T& field) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      field = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name(key) + "' has the wrong type");
    }
  }

  template <class T, class Parse>
  void read_enum(const char* key, T& field, Parse parse) {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    try {
      field = parse(s);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config key '" + name(key) + "': " + e.what());
    }
  }

  void read_optional(const char* key, std::optional<double>& field) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) {
      field.reset();
      return;
    }
    if (!it->is_number()) throw ConfigError("config key '" + name(key) + "' has the wrong type");
    field = it->get<double>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("unknown config key '" + name(it.key()) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec vec_from(const json& j, Eigen::Index n, const char* key) {
  const auto xs = j.at(key).get<std::vector<double>>();
  if (static_cast<Eigen::Index>(xs.size()) != n) throw InvariantViolation(std::string("norm_stats.") + key + " size");
  return Eigen::Map<const Vec>(xs.data(), n);
}

template <class Fn>
void as_config_error(Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

json env_to_json(const EnvConfig& e) {
  return {{"kind", to_string(e.kind)},
          {"arena_half_extent", e.arena_half_extent},
          {"wall_x", e.wall_x},
          {"wall_half_thickness", e.wall_half_thickness},
          {"door_center_y", e.door_center_y},
          {"door_half_width", e.door_half_width},
          {"dt", e.dt},
          {"damping", e.damping},
          {"mass", e.mass},
          {"max_force", e.max_force},
          {"success_radius", e.success_radius},
          {"grid", e.grid},
          {"agent_radius", e.agent_radius},
          {"goal_max_distance", e.goal_max_distance},
          {"proprio", e.proprio}};
}

EnvConfig env_from_json(const json& j, const std::string& path) {
  EnvConfig e;
  Section s(j, path);
  s.read_enum("kind", e.kind, env_kind_from_string);
  s.read("arena_half_extent", e.arena_half_extent);
  s.read("wall_x", e.wall_x);
  s.read("wall_half_thickness", e.wall_half_thickness);
  s.read("door_center_y", e.door_center_y);
  s.read("door_half_width", e.door_half_width);
  s.read("dt", e.dt);
  s.read("damping", e.damping);
  s.read("mass", e.mass);
  s.read("max_force", e.max_force);
  s.read("success_radius", e.success_radius);
  s.read("grid", e.grid);
  s.read("agent_radius", e.agent_radius);
  s.read("goal_max_distance", e.goal_max_distance);
  s.read("proprio", e.proprio);
  s.finish();
  return e;
}

json model_to_json(const ModelConfig& m) {
  return {{"grid", m.grid},
          {"vis_dim", m.vis_dim},
          {"prop_dim", m.prop_dim},
          {"action_embed_dim", m.action_embed_dim},
          {"width", m.width},
          {"depth", m.depth},
          {"context", m.context},
          {"proprio", m.proprio},
          {"conditioning", to_string(m.conditioning)},
          {"rff_bandwidth", m.rff_bandwidth},
          {"rff_scale", m.rff_scale},
          {"encoder_seed", m.encoder_seed},
          {"init_seed", m.init_seed}};
}

ModelConfig model_from_json(const json& j, const std::string& path) {
  ModelConfig m;
  Section s(j, path);
  s.read("grid", m.grid);
  s.read("vis_dim", m.vis_dim);
  s.read("prop_dim", m.prop_dim);
  s.read("action_embed_dim", m.action_embed_dim);
  s.read("width", m.width);
  s.read("depth", m.depth);
  s.read("context", m.context);
  s.read("proprio", m.proprio);
  s.read_enum("conditioning", m.conditioning, conditioning_from_string);
  s.read("rff_bandwidth", m.rff_bandwidth);
  s.read("rff_scale", m.rff_scale);
  s.read("encoder_seed", m.encoder_seed);
  s.read("init_seed", m.init_seed);
  s.finish();
  return m;
}

json norm_stats_to_json(const NormStats& s) {
  return {{"action_mean", vec_json(s.action_mean)},
          {"action_std", vec_json(s.action_std)},
          {"proprio_mean", vec_json(s.proprio_mean)},
          {"proprio_std", vec_json(s.proprio_std)}};
}

NormStats norm_stats_from_json(const json& j) {
  NormStats s;
  s.action_mean = vec_from(j, kActionDim, "action_mean");
  s.action_std = vec_from(j, kActionDim, "action_std");
  s.proprio_mean = vec_from(j, kProprioDim, "proprio_mean");
  s.proprio_std = vec_from(j, kProprioDim, "proprio_std");
  return s;
}

json to_json(const RunConfig& c) {
  json j;
  j["env"] = env_to_json(c.env);
  j["dataset"] = {{"policy", to_string(c.dataset.policy)},
                  {"n_traj", c.dataset.n_traj},
                  {"traj_len", c.dataset.traj_len},
                  {"frameskip", c.dataset.frameskip},
                  {"train_frac", c.dataset.train_frac},
                  {"seed", c.dataset.seed}};
  j["model"] = model_to_json(c.model);
  const TrainConfig& t = c.training;
  j["training"] = {{"W", t.W},
                   {"rollout_steps", t.rollout_steps},
                   {"strategy", to_string(t.strategy)},
                   {"scheduled_sampling_p", t.scheduled_sampling_p},
                   {"lr", t.lr},
                   {"weight_decay_start", t.weight_decay_start},
                   {"weight_decay_final", t.weight_decay_final},
                   {"adam_beta1", t.adam_beta1},
                   {"adam_beta2", t.adam_beta2},
                   {"adam_eps", t.adam_eps},
                   {"grad_clip", t.grad_clip},
                   {"batch_size", t.batch_size},
                   {"epochs", t.epochs},
                   {"seed", t.seed},
                   {"chunk_size", t.chunk_size},
                   {"eval_interval", t.eval_interval},
                   {"eval_horizon", t.eval_horizon},
                   {"eval_batch", t.eval_batch}};
  const PlannerConfig& p = c.planner.optimizer;
  const PlanProblem& pr = c.planner.problem;
  j["planner"] = {{"kind", to_string(p.kind)},
                  {"N", p.N},
                  {"J", p.J},
                  {"K", p.K},
                  {"mu0", p.mu0},
                  {"sigma0", p.sigma0},
                  {"lr", p.lr},
                  {"sigma_noise", p.sigma_noise},
                  {"beta1", p.beta1},
                  {"beta2", p.beta2},
                  {"eps", p.eps},
                  {"random_init", p.random_init},
                  {"action_clip", p.action_clip ? json(*p.action_clip) : json(nullptr)},
                  {"elitist", p.elitist},
                  {"sigma_floor", p.sigma_floor},
                  {"seed", p.seed},
                  {"H", pr.H},
                  {"alpha", pr.alpha},
                  {"Wp", pr.Wp},
                  {"distance", to_string(pr.distance)},
                  {"m", c.planner.m},
                  {"M", c.planner.M}};
  j["eval"] = {{"episodes", c.eval.episodes},
               {"trailing_n", c.eval.trailing_n},
               {"seed_base", c.eval.seed_base},
               {"horizons", c.eval.horizons}};
  j["io"] = {{"out_dir", c.io.out_dir}, {"dataset", c.io.dataset}, {"checkpoint", c.io.checkpoint}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  if (const json* e = root.child("env")) c.env = env_from_json(*e, "env");
  if (const json* d = root.child("dataset")) {
    Section s(*d, "dataset");
    s.read_enum("policy", c.dataset.policy, policy_from_string);
    s.read("n_traj", c.dataset.n_traj);
    s.read("traj_len", c.dataset.traj_len);
    s.read("frameskip", c.dataset.frameskip);
    s.read("train_frac", c.dataset.train_frac);
    s.read("seed", c.dataset.seed);
    s.finish();
  }
  if (const json* m = root.child("model")) c.model = model_from_json(*m, "model");
  if (const json* t = root.child("training")) {
    TrainConfig& tc = c.training;
    Section s(*t, "training");
    s.read("W", tc.W);
    s.read("rollout_steps", tc.rollout_steps);
    s.read_enum("strategy", tc.strategy, strategy_from_string);
    s.read("scheduled_sampling_p", tc.scheduled_sampling_p);
    s.read("lr", tc.lr);
    s.read("weight_decay_start", tc.weight_decay_start);
    s.read("weight_decay_final", tc.weight_decay_final);
    s.read("adam_beta1", tc.adam_beta1);
    s.read("adam_beta2", tc.adam_beta2);
    s.read("adam_eps", tc.adam_eps);
    s.read("grad_clip", tc.grad_clip);
    s.read("batch_size", tc.batch_size);
    s.read("epochs", tc.epochs);
    s.read("seed", tc.seed);
    s.read("chunk_size", tc.chunk_size);
    s.read("eval_interval", tc.eval_interval);
    s.read("eval_horizon", tc.eval_horizon);
    s.read("eval_batch", tc.eval_batch);
    s.finish();
  }
  if (const json* p = root.child("planner")) {
    PlannerConfig& pc = c.planner.optimizer;
    PlanProblem& pr = c.planner.problem;
    Section s(*p, "planner");
    s.read_enum("kind", pc.kind, planner_kind_from_string);
    s.read("N", pc.N);
    s.read("J", pc.J);
    s.read("K", pc.K);
    s.read("mu0", pc.mu0);
    s.read("sigma0", pc.sigma0);
    s.read("lr", pc.lr);
    s.read("sigma_noise", pc.sigma_noise);
    s.read("beta1", pc.beta1);
    s.read("beta2", pc.beta2);
    s.read("eps", pc.eps);
    s.read("random_init", pc.random_init);
    s.read_optional("action_clip", pc.action_clip);
    s.read("elitist", pc.elitist);
    s.read("sigma_floor", pc.sigma_floor);
    s.read("seed", pc.seed);
    s.read("H", pr.H);
    s.read("alpha", pr.alpha);
    s.read("Wp", pr.Wp);
    s.read_enum("distance", pr.distance, distance_from_string);
    s.read("m", c.planner.m);
    s.read("M", c.planner.M);
    s.finish();
  }
  if (const json* e = root.child("eval")) {
    Section s(*e, "eval");
    s.read("episodes", c.eval.episodes);
    s.read("trailing_n", c.eval.trailing_n);
    s.read("seed_base", c.eval.seed_base);
    s.read("horizons", c.eval.horizons);
    s.finish();
  }
  if (const json* io = root.child("io")) {
    Section s(*io, "io");
    s.read("out_dir", c.io.out_dir);
    s.read("dataset", c.io.dataset);
    s.read("checkpoint", c.io.checkpoint);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  as_config_error([&] {
    env.validate();
    model.validate();
    training.validate();
    planner.optimizer.validate();
    planner.problem.validate();
    mpc().validate(planner.problem.H);
  });
  if (dataset.n_traj < 1) throw ConfigError("dataset.n_traj must be >= 1");
  if (dataset.traj_len < 1) throw ConfigError("dataset.traj_len must be >= 1");
  if (dataset.frameskip < 1) throw ConfigError("dataset.frameskip must be >= 1");
  if (!(dataset.train_frac > 0.0 && dataset.train_frac < 1.0)) throw ConfigError("dataset.train_frac must lie in (0, 1)");
  if (eval.episodes < 1) throw ConfigError("eval.episodes must be >= 1");
  if (eval.trailing_n < 1) throw ConfigError("eval.trailing_n must be >= 1");
  if (eval.horizons < 1) throw ConfigError("eval.horizons must be >= 1");
  if (model.grid != env.grid) throw ConfigError("model.grid must equal env.grid");
  if (model.proprio && !env.proprio) throw ConfigError("model.proprio requires env.proprio");
  if (training.W > model.context) throw ConfigError("training.W must not exceed model.context");
  if (planner.problem.Wp > training.W) throw ConfigError("planner.Wp must not exceed training.W");
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << '\n';
}

}  // namespace wmplan
