#include "wmplan/planning.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "wmplan/parallel.hpp"

namespace wmplan {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double finite_or_inf(double c) { return std::isfinite(c) ? c : kInf; }

// Indices sorted by (cost, index).
std::vector<int> rank_order(const Vec& costs) {
  std::vector<int> idx(static_cast<std::size_t>(costs.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return costs[a] < costs[b]; });
  return idx;
}

void clip_steps(Eigen::Ref<Vec> x, int A, double bound) {
  for (Eigen::Index h = 0; h + A <= x.size(); h += A) {
    auto seg = x.segment(h, A);
    const double n = seg.norm();
    if (n > bound) seg *= bound / n;
  }
}

Mat as_steps(const Vec& x, int H, int A) {
  Mat out(H, A);
  for (int h = 0; h < H; ++h)
    for (int a = 0; a < A; ++a) out(h, a) = x[h * A + a];
  return out;
}

double reevaluate(const PlanObjective& obj, const Vec& x) {
  Mat col = x;
  return obj.evaluate(col, 1)[0];
}

}  // namespace

std::string to_string(PlannerKind k) {
  switch (k) {
    case PlannerKind::cem:
      return "cem";
    case PlannerKind::cma_diag:
      return "cma_diag";
    case PlannerKind::gd:
      return "gd";
    case PlannerKind::adam:
      return "adam";
  }
  return "?";
}

PlannerKind planner_kind_from_string(const std::string& s) {
  if (s == "cem") return PlannerKind::cem;
  if (s == "cma_diag") return PlannerKind::cma_diag;
  if (s == "gd") return PlannerKind::gd;
  if (s == "adam") return PlannerKind::adam;
  throw std::invalid_argument("unknown planner '" + s + "'");
}

std::string to_string(Distance d) { return d == Distance::L1 ? "L1" : "L2"; }

Distance distance_from_string(const std::string& s) {
  if (s == "L1") return Distance::L1;
  if (s == "L2") return Distance::L2;
  throw std::invalid_argument("unknown distance '" + s + "'");
}

void PlannerConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("planner." + what); };
  if (N < 1) fail("N must be >= 1");
  if (J < 1) fail("J must be >= 1");
  if (K < 1) fail("K must be >= 1");
  if (K > N) fail("K must not exceed N");
  if (!(sigma0 > 0)) fail("sigma0 must be > 0");
  if (!(lr > 0)) fail("lr must be > 0");
  if (sigma_noise < 0) fail("sigma_noise must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) fail("betas must lie in [0, 1)");
  if (!(eps > 0)) fail("eps must be > 0");
  if (action_clip && !(*action_clip > 0)) fail("action_clip must be > 0");
  if (!(sigma_floor > 0)) fail("sigma_floor must be > 0");
  if (threads < 1) fail("threads must be >= 1");
}

PlannerConfig planner_for(PlannerKind kind, const PlannerConfig& base) {
  PlannerConfig c = base;
  c.kind = kind;
  if (kind == PlannerKind::gd || kind == PlannerKind::adam) {
    c.N = 1;
    c.K = 1;
    c.J = 500;
    c.lr = 1.0;
    c.sigma0 = 1.0;
    c.sigma_noise = 0.003;
  }
  return c;
}

void PlanProblem::validate() const {
  if (H < 1) throw std::invalid_argument("planner.H must be >= 1");
  if (Wp < 1) throw std::invalid_argument("planner.Wp must be >= 1");
  if (!(alpha >= 0)) throw std::invalid_argument("planner.alpha must be >= 0");
}

double PlanObjective::value_and_gradient(const Vec& x, Vec& grad) const {
  const double h = 1e-6;
  Mat pts(x.size(), 2 * x.size() + 1);
  pts.col(0) = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    pts.col(1 + 2 * i) = x;
    pts(i, 1 + 2 * i) += h;
    pts.col(2 + 2 * i) = x;
    pts(i, 2 + 2 * i) -= h;
  }
  const Vec c = evaluate(pts, 1);
  grad.resize(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) grad[i] = (c[1 + 2 * i] - c[2 + 2 * i]) / (2 * h);
  return c[0];
}

// ---------------------------------------------------------------- unrolling

Unrolled unroll(const WorldModel& model, const NormStats& stats, const Observation& init, const Mat& actions, int Wp,
                int trained_context, bool allow_wide_window) {
  const ModelConfig& mc = model.config();
  if (Wp < 1) throw std::invalid_argument("unroll: Wp must be >= 1");
  if (Wp > mc.context) throw std::invalid_argument("unroll: Wp exceeds the model's context capacity");
  if (Wp > trained_context && !allow_wide_window)
    throw std::invalid_argument("unroll: Wp must not exceed the trained context W");
  if (actions.rows() > 0 && actions.cols() != kActionDim) throw std::invalid_argument("unroll: actions must be k x 2");
  const int S = mc.context;
  Unrolled out;
  out.steps.push_back(model.encode_state(init, stats));
  const Mat emb = model.encode_action(actions.transpose());
  for (Eigen::Index i = 0; i < actions.rows(); ++i) {
    const int last = static_cast<int>(i);
    const int first = std::max(0, last + 1 - Wp);
    ContextBatch ctx = ContextBatch::empty(S, 1, mc.vis_dim, mc.prop_dim, mc.action_embed_dim, mc.proprio);
    std::vector<int> window;
    for (int f = first; f <= last; ++f) {
      const int slot = S - (last + 1 - f);
      ctx.vis[slot] = out.steps[f].vis;
      if (mc.proprio) ctx.prop[slot] = out.steps[f].prop;
      ctx.act[slot] = emb.col(f);
      ctx.mask(slot, 0) = 1.0;
      window.push_back(f);
    }
    out.windows.push_back(std::move(window));
    out.steps.push_back(model.predict(ctx));
  }
  return out;
}

WorldModelObjective::WorldModelObjective(const WorldModel& model, const NormStats& stats, const Observation& init,
                                         const Observation& goal, const PlanProblem& problem, int trained_context)
    : model_(model), problem_(problem) {
  problem_.validate();
  if (problem_.Wp > model.config().context)
    throw std::invalid_argument("planner.Wp exceeds the model's context capacity");
  if (problem_.Wp > trained_context && !problem_.allow_wide_window)
    throw std::invalid_argument("planner.Wp must not exceed the trained context W (" +
                                std::to_string(trained_context) + ")");
  start_ = model.encode_state(init, stats);
  goal_ = model.encode_state(goal, stats);
}

Vec WorldModelObjective::evaluate_chunk(const Mat& x, Mat* grad) const {
  const ModelConfig& mc = model_.config();
  const int S = mc.context;
  const int H = problem_.H;
  const int A = kActionDim;
  const int D = mc.vis_dim;
  const int P = mc.prop_dim;
  const bool proprio = mc.proprio;
  const Eigen::Index n = x.cols();
  if (x.rows() != H * A) throw std::invalid_argument("plan candidates must have H*A rows");

  std::vector<Mat> act_in(static_cast<std::size_t>(H));
  std::vector<Mat> emb(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) {
    act_in[h] = x.middleRows(static_cast<Eigen::Index>(h) * A, A);
    emb[h] = model_.encode_action(act_in[h]);
  }
  std::vector<LatentBatch> lat(static_cast<std::size_t>(H + 1));
  lat[0].vis = start_.vis.replicate(1, n);
  lat[0].prop = proprio ? Mat(start_.prop.replicate(1, n)) : Mat(0, n);
  std::vector<PredictorTape> tapes(grad ? static_cast<std::size_t>(H) : 0);
  for (int i = 0; i < H; ++i) {
    const int first = std::max(0, i + 1 - problem_.Wp);
    ContextBatch ctx = ContextBatch::empty(S, n, D, P, mc.action_embed_dim, proprio);
    for (int f = first; f <= i; ++f) {
      const int slot = S - (i + 1 - f);
      ctx.vis[slot] = lat[f].vis;
      if (proprio) ctx.prop[slot] = lat[f].prop;
      ctx.act[slot] = emb[f];
      ctx.mask.row(slot).setOnes();
    }
    lat[i + 1] = model_.predict(ctx, grad ? &tapes[i] : nullptr);
  }

  const Mat dv = lat[H].vis.colwise() - goal_.vis.col(0);
  const double alpha = proprio ? problem_.alpha : 0.0;
  Mat dp;
  if (proprio) dp = lat[H].prop.colwise() - goal_.prop.col(0);
  Vec cost(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double c = 0.0;
    if (problem_.distance == Distance::L2) {
      c = dv.col(j).squaredNorm() / D;
      if (alpha != 0.0) c += alpha * dp.col(j).squaredNorm() / P;
    } else {
      c = dv.col(j).cwiseAbs().sum() / D;
      if (alpha != 0.0) c += alpha * dp.col(j).cwiseAbs().sum() / P;
    }
    cost[j] = finite_or_inf(c);
  }
  if (!grad) return cost;

  std::vector<Mat> d_vis(static_cast<std::size_t>(H + 1));
  std::vector<Mat> d_prop(static_cast<std::size_t>(H + 1));
  std::vector<Mat> d_emb(static_cast<std::size_t>(H));
  for (int f = 0; f <= H; ++f) {
    d_vis[f] = Mat::Zero(D, n);
    d_prop[f] = Mat::Zero(proprio ? P : 0, n);
  }
  for (int h = 0; h < H; ++h) d_emb[h] = Mat::Zero(mc.action_embed_dim, n);
  if (problem_.distance == Distance::L2) {
    d_vis[H] = (2.0 / D) * dv;
    if (proprio && alpha != 0.0) d_prop[H] = (2.0 * alpha / P) * dp;
  } else {
    d_vis[H] = dv.array().sign().matrix() / D;
    if (proprio && alpha != 0.0) d_prop[H] = (alpha / P) * dp.array().sign().matrix();
  }
  for (int i = H - 1; i >= 0; --i) {
    const ContextGrad cg = model_.backward(tapes[i], d_vis[i + 1], d_prop[i + 1], nullptr);
    const int first = std::max(0, i + 1 - problem_.Wp);
    for (int f = first; f <= i; ++f) {
      const int slot = S - (i + 1 - f);
      d_vis[f] += cg.vis[slot];
      if (proprio) d_prop[f] += cg.prop[slot];
      d_emb[f] += cg.act[slot];
    }
  }
  grad->resize(H * A, n);
  for (int h = 0; h < H; ++h)
    grad->middleRows(static_cast<Eigen::Index>(h) * A, A) = model_.backward_action(act_in[h], d_emb[h], nullptr);
  return cost;
}

Vec WorldModelObjective::evaluate(const Mat& candidates, int threads) const {
  const Eigen::Index n = candidates.cols();
  Vec out(n);
  const auto chunks = static_cast<std::size_t>((n + kCandidateChunk - 1) / kCandidateChunk);
  parallel_for(chunks, threads, [&](std::size_t c) {
    const auto lo = static_cast<Eigen::Index>(c) * kCandidateChunk;
    const auto cnt = std::min<Eigen::Index>(kCandidateChunk, n - lo);
    out.segment(lo, cnt) = evaluate_chunk(candidates.middleCols(lo, cnt), nullptr);
  });
  return out;
}

double WorldModelObjective::value_and_gradient(const Vec& x, Vec& grad) const {
  Mat g;
  const Vec c = evaluate_chunk(Mat(x), &g);
  grad = g.col(0);
  return c[0];
}

// ---------------------------------------------------------------- optimizers

PlanResult cem_plan(const PlanObjective& obj, const PlannerConfig& cfg) {
  cfg.validate();
  const int n = obj.dim();
  const int A = obj.action_dim();
  Vec mu = Vec::Constant(n, cfg.mu0);
  Vec sigma = Vec::Constant(n, cfg.sigma0);
  PlanResult res;
  double best = kInf;
  for (int it = 0; it < cfg.J; ++it) {
    Mat cand(n, cfg.N);
    for (int i = 0; i < cfg.N; ++i) {
      Rng rng = Rng::stream(cfg.seed, {kCemStreamKey, static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(i)});
      for (int d = 0; d < n; ++d) cand(d, i) = mu[d] + sigma[d] * rng.normal();
      if (cfg.action_clip) clip_steps(cand.col(i), A, *cfg.action_clip);
    }
    Vec costs = obj.evaluate(cand, cfg.threads);
    for (Eigen::Index i = 0; i < costs.size(); ++i) costs[i] = finite_or_inf(costs[i]);
    res.evaluations += static_cast<std::size_t>(cfg.N);
    const auto order = rank_order(costs);
    best = std::min(best, costs[order[0]]);
    if (!std::isfinite(costs[order[0]])) {
      res.degenerate = true;
      res.cost_trace.push_back({best, kInf, 0.0});
      continue;
    }
    // Elites with a non-finite cost are dropped from the refit.
    int k = 0;
    while (k < cfg.K && std::isfinite(costs[order[static_cast<std::size_t>(k)]])) ++k;
    Mat elites(n, k);
    Vec ec(k);
    for (int e = 0; e < k; ++e) {
      elites.col(e) = cand.col(order[static_cast<std::size_t>(e)]);
      ec[e] = costs[order[static_cast<std::size_t>(e)]];
    }
    mu = elites.rowwise().mean();
    if (k > 1) {
      const Mat centered = elites.colwise() - mu;
      sigma = (centered.array().square().rowwise().sum() / (k - 1)).sqrt().max(cfg.sigma_floor);
    } else {
      sigma.setConstant(cfg.sigma_floor);
    }
    const double emean = ec.mean();
    const double estd = k > 1 ? std::sqrt((ec.array() - emean).square().sum() / (k - 1)) : 0.0;
    res.cost_trace.push_back({best, emean, estd});
  }
  res.best_actions = as_steps(mu, obj.horizon(), A);
  res.best_cost = reevaluate(obj, mu);
  return res;
}

PlanResult cma_diag_plan(const PlanObjective& obj, const PlannerConfig& cfg) {
  cfg.validate();
  const int n = obj.dim();
  const int A = obj.action_dim();
  const int lambda = cfg.N;
  const int mu_count = std::max(1, lambda / 2);
  Vec w(mu_count);
  for (int i = 0; i < mu_count; ++i) w[i] = std::log(mu_count + 0.5) - std::log(i + 1.0);
  w /= w.sum();
  const double mueff = 1.0 / w.squaredNorm();
  const double dn = n;
  const double cs = (mueff + 2.0) / (dn + mueff + 5.0);
  const double ds = 1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (dn + 1.0)) - 1.0) + cs;
  const double cc = (4.0 + mueff / dn) / (dn + 4.0 + 2.0 * mueff / dn);
  double c1 = 2.0 / ((dn + 1.3) * (dn + 1.3) + mueff);
  double cmu = std::min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((dn + 2.0) * (dn + 2.0) + mueff));
  // Separable variant: the diagonal learns faster.
  c1 *= (dn + 2.0) / 3.0;
  cmu = std::min(1.0 - c1, cmu * (dn + 2.0) / 3.0);
  const double chi_n = std::sqrt(dn) * (1.0 - 1.0 / (4.0 * dn) + 1.0 / (21.0 * dn * dn));

  Vec m = Vec::Constant(n, cfg.mu0);
  double sigma = cfg.sigma0 * (cfg.elitist ? kElitistScale : 1.0);
  Vec C = Vec::Ones(n);
  Vec ps = Vec::Zero(n);
  Vec pc = Vec::Zero(n);
  Vec best_x = m;
  double best = kInf;
  PlanResult res;

  for (int g = 0; g < cfg.J; ++g) {
    Mat cand(n, lambda);
    const Vec sd = C.cwiseSqrt();
    for (int i = 0; i < lambda; ++i) {
      Rng rng = Rng::stream(cfg.seed, {kCmaStreamKey, static_cast<std::uint64_t>(g), static_cast<std::uint64_t>(i)});
      for (int d = 0; d < n; ++d) cand(d, i) = m[d] + sigma * sd[d] * rng.normal();
      if (cfg.action_clip) clip_steps(cand.col(i), A, *cfg.action_clip);
    }
    if (cfg.elitist && g > 0 && std::isfinite(best)) cand.col(lambda - 1) = best_x;
    Vec costs = obj.evaluate(cand, cfg.threads);
    for (Eigen::Index i = 0; i < costs.size(); ++i) costs[i] = finite_or_inf(costs[i]);
    res.evaluations += static_cast<std::size_t>(lambda);
    const auto order = rank_order(costs);
    if (costs[order[0]] < best) {
      best = costs[order[0]];
      best_x = cand.col(order[0]);
    }
    double sum = 0.0;
    double sq = 0.0;
    int finite = 0;
    for (Eigen::Index i = 0; i < costs.size(); ++i)
      if (std::isfinite(costs[i])) {
        sum += costs[i];
        sq += costs[i] * costs[i];
        ++finite;
      }
    if (finite == 0 || !std::isfinite(costs[order[static_cast<std::size_t>(mu_count - 1)]])) {
      if (finite == 0) res.degenerate = true;
      res.cost_trace.push_back({best, finite ? sum / finite : kInf, 0.0});
      continue;
    }
    const double mean_c = sum / finite;
    res.cost_trace.push_back({best, mean_c, std::sqrt(std::max(0.0, sq / finite - mean_c * mean_c))});

    Vec y_w = Vec::Zero(n);
    Vec y2_w = Vec::Zero(n);
    for (int i = 0; i < mu_count; ++i) {
      const Vec y = (cand.col(order[static_cast<std::size_t>(i)]) - m) / sigma;
      y_w += w[i] * y;
      y2_w += w[i] * y.cwiseAbs2();
    }
    m += sigma * y_w;
    const Vec z_w = y_w.cwiseQuotient(sd);
    ps = (1.0 - cs) * ps + std::sqrt(cs * (2.0 - cs) * mueff) * z_w;
    const double ps_norm = ps.norm();
    const double hsig_lhs = ps_norm / std::sqrt(1.0 - std::pow(1.0 - cs, 2.0 * (g + 1)));
    const double hsig = hsig_lhs < (1.4 + 2.0 / (dn + 1.0)) * chi_n ? 1.0 : 0.0;
    pc = (1.0 - cc) * pc + hsig * std::sqrt(cc * (2.0 - cc) * mueff) * y_w;
    C = (1.0 - c1 - cmu) * C + c1 * (pc.cwiseAbs2() + (1.0 - hsig) * cc * (2.0 - cc) * C) + cmu * y2_w;
    sigma *= std::exp((cs / ds) * (ps_norm / chi_n - 1.0));
  }
  res.best_actions = as_steps(best_x, obj.horizon(), A);
  res.best_cost = reevaluate(obj, best_x);
  return res;
}

PlanResult gradient_plan(const PlanObjective& obj, const PlannerConfig& cfg) {
  cfg.validate();
  const int n = obj.dim();
  const bool adam = cfg.kind == PlannerKind::adam;
  Rng rng = Rng::stream(cfg.seed, {kGradStreamKey});
  Vec x = Vec::Zero(n);
  if (cfg.random_init)
    for (int d = 0; d < n; ++d) x[d] = cfg.mu0 + cfg.sigma0 * rng.normal();
  const bool bounded = obj.lower.size() == n && obj.upper.size() == n;
  if (bounded) x = x.cwiseMax(obj.lower).cwiseMin(obj.upper);
  Vec m = Vec::Zero(n);
  Vec v = Vec::Zero(n);
  Vec g(n);
  PlanResult res;
  double best = kInf;
  for (int it = 0; it < cfg.J; ++it) {
    const double c = finite_or_inf(obj.value_and_gradient(x, g));
    ++res.evaluations;
    best = std::min(best, c);
    res.cost_trace.push_back({best, c, 0.0});
    if (!g.allFinite()) {
      g.setZero();
      ++res.nonfinite_gradients;
    }
    if (adam) {
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
      const double bc1 = 1.0 - std::pow(cfg.beta1, it + 1.0);
      const double bc2 = 1.0 - std::pow(cfg.beta2, it + 1.0);
      x.array() -= cfg.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.eps);
    } else {
      x -= cfg.lr * g;
    }
    if (cfg.sigma_noise > 0)
      for (int d = 0; d < n; ++d) x[d] += cfg.sigma_noise * rng.normal();
    if (bounded) x = x.cwiseMax(obj.lower).cwiseMin(obj.upper);
  }
  res.best_actions = as_steps(x, obj.horizon(), obj.action_dim());
  res.best_cost = reevaluate(obj, x);
  return res;
}

PlanResult plan(const PlanObjective& obj, const PlannerConfig& cfg) {
  switch (cfg.kind) {
    case PlannerKind::cem:
      return cem_plan(obj, cfg);
    case PlannerKind::cma_diag:
      return cma_diag_plan(obj, cfg);
    case PlannerKind::gd:
    case PlannerKind::adam:
      return gradient_plan(obj, cfg);
  }
  throw std::logic_error("unhandled planner kind");
}

std::string trace_csv(const PlanResult& r) {
  std::ostringstream os;
  os << std::setprecision(17) << "iteration,best_cost,mean,std\n";
  for (std::size_t i = 0; i < r.cost_trace.size(); ++i)
    os << i << ',' << r.cost_trace[i].best << ',' << r.cost_trace[i].mean << ',' << r.cost_trace[i].std << '\n';
  return os.str();
}

// ---------------------------------------------------------------- MPC

WorldModelController::WorldModelController(const WorldModel& model, const NormStats& stats, const EnvConfig& env,
                                           const PlanProblem& problem, const PlannerConfig& planner,
                                           int trained_context)
    : model_(model), stats_(stats), env_(env), problem_(problem), planner_(planner),
      trained_context_(trained_context) {
  problem_.validate();
  planner_.validate();
  if (problem_.Wp > trained_context_ && !problem_.allow_wide_window)
    throw std::invalid_argument("planner.Wp must not exceed the trained context W");
}

Mat WorldModelController::act(const EnvState&, const Observation& obs, const Observation& goal, std::uint64_t seed,
                              double* cost) const {
  WorldModelObjective obj(model_, stats_, obs, goal, problem_, trained_context_);
  const int H = problem_.H;
  obj.lower.resize(H * kActionDim);
  obj.upper.resize(H * kActionDim);
  for (int h = 0; h < H; ++h)
    for (int a = 0; a < kActionDim; ++a) {
      obj.lower[h * kActionDim + a] = (-env_.max_force - stats_.action_mean[a]) / stats_.action_std[a];
      obj.upper[h * kActionDim + a] = (env_.max_force - stats_.action_mean[a]) / stats_.action_std[a];
    }
  PlannerConfig cfg = planner_;
  cfg.seed = splitmix64(planner_.seed ^ splitmix64(seed));
  const PlanResult r = plan(obj, cfg);
  if (cost) *cost = r.best_cost;
  if (log_) log_->push_back(r);
  Mat raw(H, kActionDim);
  for (int h = 0; h < H; ++h) raw.row(h) = stats_.denormalize_action(r.best_actions.row(h).transpose()).transpose();
  return raw;
}

void MpcConfig::validate(int H) const {
  if (m < 1) throw std::invalid_argument("mpc.m must be >= 1");
  if (m > H) throw std::invalid_argument("mpc.m must not exceed the planning horizon");
  if (M < 1) throw std::invalid_argument("mpc.M must be >= 1");
  if (frameskip < 1) throw std::invalid_argument("mpc.frameskip must be >= 1");
}

EpisodeResult run_episode(const EnvConfig& env, const EnvState& init, const Observation& goal_obs,
                          const Controller& controller, const MpcConfig& mpc, std::uint64_t seed) {
  EpisodeResult r;
  r.seed = seed;
  EnvState state = init;
  r.success = is_success(state, env);
  while (!r.success && r.steps_taken < mpc.M) {
    double cost = 0.0;
    const Observation obs = render(state, env);
    const Mat actions =
        controller.act(state, obs, goal_obs, splitmix64(seed + 0x9e3779b97f4a7c15ULL * (r.planning_calls + 1)), &cost);
    ++r.planning_calls;
    const int execute = std::min<int>(mpc.m, static_cast<int>(actions.rows()));
    if (execute < 1) throw std::invalid_argument("controller returned no actions");
    for (int i = 0; i < execute && !r.success && r.steps_taken < mpc.M; ++i) {
      const Action a = clip_action(Action{actions.row(i).transpose()}, env);
      for (int f = 0; f < mpc.frameskip && r.steps_taken < mpc.M; ++f) {
        state = step(state, a, env);
        ++r.steps_taken;
        r.trace.push_back({r.steps_taken, state.pos, a.force, cost});
        if (is_success(state, env)) {
          r.success = true;
          break;
        }
      }
    }
  }
  r.final_distance = (state.pos - state.goal_pos).norm();
  return r;
}

EpisodeResult mpc_episode(const EnvConfig& env, std::uint64_t seed, const Controller& controller,
                          const MpcConfig& mpc) {
  const Episode ep = sample_episode(seed, env);
  return run_episode(env, ep.init, ep.goal_obs, controller, mpc, seed);
}

std::string episode_jsonl(const EpisodeResult& r) {
  std::ostringstream os;
  for (const auto& s : r.trace) {
    nlohmann::json j;
    j["seed"] = r.seed;
    j["step"] = s.step;
    j["pos"] = {s.pos.x(), s.pos.y()};
    j["action"] = {s.action.x(), s.action.y()};
    j["cost"] = s.cost;
    os << j.dump() << '\n';
  }
  return os.str();
}

}  // namespace wmplan
