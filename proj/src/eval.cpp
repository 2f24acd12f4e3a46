#include "wmplan/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "wmplan/parallel.hpp"

namespace wmplan {

namespace {

constexpr double kProbeRidge = 1e-6;
constexpr int kRefinements = 8;

RolloutSpec unroll_spec(std::size_t batch, int prefix_W, int horizons, int Wp) {
  RolloutSpec spec;
  spec.window = Wp;
  spec.rule = ContextRule::chain;
  for (int h = 1; h <= horizons; ++h) {
    std::vector<LossTerm> terms;
    std::vector<int> pre;
    for (int p = 1; p <= prefix_W; ++p)
      for (std::size_t b = 0; b < batch; ++b) {
        terms.push_back({b, p + h - 1, h});
        pre.push_back(p);
      }
    spec.levels.push_back(std::move(terms));
    spec.prefixes.push_back(std::move(pre));
  }
  return spec;
}

void check_unroll_args(const std::vector<SliceRecord>& slices, int prefix_W, int horizons, int Wp) {
  if (prefix_W < 1 || horizons < 1 || Wp < 1) throw std::invalid_argument("unroll_error: counts must be >= 1");
  if (slices.empty()) throw std::invalid_argument("unroll_error: no slices");
  for (const auto& s : slices)
    if (s.length < static_cast<std::size_t>(prefix_W + horizons))
      throw std::invalid_argument("unroll_error: slices too short for the requested horizons");
}

}  // namespace

SuccessSummary success_rate(const EnvConfig& env, const Controller& controller, const MpcConfig& mpc, int episodes,
                            std::uint64_t seed_base, int threads) {
  if (episodes < 1) throw std::invalid_argument("success_rate: episodes must be >= 1");
  SuccessSummary s;
  s.episodes.resize(static_cast<std::size_t>(episodes));
  parallel_for(s.episodes.size(), threads,
               [&](std::size_t i) { s.episodes[i] = mpc_episode(env, seed_base + i, controller, mpc); });
  int wins = 0;
  for (const auto& e : s.episodes) wins += e.success ? 1 : 0;
  s.rate = static_cast<double>(wins) / episodes;
  return s;
}

TrailingStat trailing_average(const std::vector<double>& series, int n) {
  if (series.empty()) throw std::invalid_argument("trailing_average: empty series");
  if (n < 1) throw std::invalid_argument("trailing_average: n must be >= 1");
  const auto take = std::min(series.size(), static_cast<std::size_t>(n));
  const auto first = series.end() - static_cast<std::ptrdiff_t>(take);
  TrailingStat t;
  t.mean = std::accumulate(first, series.end(), 0.0) / static_cast<double>(take);
  double ss = 0.0;
  for (auto it = first; it != series.end(); ++it) ss += (*it - t.mean) * (*it - t.mean);
  t.std = std::sqrt(ss / static_cast<double>(take));
  return t;
}

UnrollErrors unroll_error(const WorldModel& model, const EmbeddedData& data, const std::vector<SliceRecord>& slices,
                          int prefix_W, int horizons, int Wp) {
  check_unroll_args(slices, prefix_W, horizons, Wp);
  const RolloutSpec spec = unroll_spec(slices.size(), prefix_W, horizons, Wp);
  const auto stats = run_rollout(model, data, slices, spec, {}, nullptr, nullptr);
  UnrollErrors e;
  for (const auto& s : stats) {
    const auto n = static_cast<double>(s.count);
    e.l2.push_back(s.sq / n);
    e.l1.push_back(s.abs / n);
    e.vis_l2.push_back(s.vis_sq / n);
    e.vis_l1.push_back(s.vis_abs / n);
  }
  return e;
}

Eigen::Vector4d StateProbe::decode(const Vec& z) const {
  const auto D = weights.cols() - 1;
  return weights.leftCols(D) * z + weights.col(D);
}

Mat ridge_solve(const Mat& X, const Mat& Y, double lambda) {
  Mat A = X.transpose() * X;
  A.diagonal().array() += lambda;
  const Eigen::LDLT<Mat> ldlt(A);
  Mat w = ldlt.solve(X.transpose() * Y);
  // Iterated Tikhonov: each pass removes most of the shrinkage bias that a
  // single regularized solve leaves on well-determined directions.
  for (int i = 0; i < kRefinements; ++i) w += ldlt.solve(X.transpose() * (Y - X * w));
  return w;
}

StateProbe fit_state_probe(const Mat& features, const Mat& targets) {
  if (features.cols() != targets.cols()) throw std::invalid_argument("fit_state_probe: sample counts differ");
  if (targets.rows() != 4) throw std::invalid_argument("fit_state_probe: targets must have 4 rows");
  const Eigen::Index n = features.cols();
  const Eigen::Index D = features.rows();
  Mat X(n, D + 1);
  X.leftCols(D) = features.transpose();
  X.col(D).setOnes();
  const Mat Y = targets.transpose();
  StateProbe probe;
  const Eigen::ColPivHouseholderQR<Mat> qr(X);
  Mat w;
  if (qr.rank() == D + 1 && n >= D + 1) {
    w = qr.solve(Y);
  } else {
    w = ridge_solve(X, Y, kProbeRidge);
    probe.used_ridge = true;
  }
  probe.weights = w.transpose();
  return probe;
}

StateProbe fit_state_probe(const EmbeddedData& data, const Dataset& raw, const std::vector<std::size_t>& trajectories) {
  Eigen::Index total = 0;
  for (auto i : trajectories) total += data.vis.at(i).cols();
  if (total == 0) throw std::invalid_argument("fit_state_probe: no observations");
  const Eigen::Index D = data.vis[trajectories.front()].rows();
  Mat F(D, total);
  Mat T(4, total);
  Eigen::Index c = 0;
  for (auto i : trajectories) {
    const auto& tr = raw.trajectories[i];
    for (Eigen::Index k = 0; k < data.vis[i].cols(); ++k, ++c) {
      F.col(c) = data.vis[i].col(k);
      for (int r = 0; r < 4; ++r) T(r, c) = tr.proprio[static_cast<std::size_t>(k * 4 + r)];
    }
  }
  return fit_state_probe(F, T);
}

ProbeErrors probe_error(const WorldModel& model, const EmbeddedData& data, const Dataset& raw,
                        const std::vector<SliceRecord>& slices, const StateProbe& probe, int prefix_W, int horizons,
                        int Wp) {
  check_unroll_args(slices, prefix_W, horizons, Wp);
  const RolloutSpec spec = unroll_spec(slices.size(), prefix_W, horizons, Wp);
  const auto stats = run_rollout(model, data, slices, spec, {}, nullptr, nullptr);
  ProbeErrors out;
  for (std::size_t h = 0; h < stats.size(); ++h) {
    double pos = 0.0;
    double vel = 0.0;
    const auto& terms = spec.levels[h];
    for (std::size_t j = 0; j < terms.size(); ++j) {
      const auto& rec = slices[terms[j].slice];
      const auto k = rec.offset + static_cast<std::size_t>(terms[j].target);
      const auto& pr = raw.trajectories[rec.trajectory].proprio;
      const Eigen::Vector4d truth(pr[k * 4], pr[k * 4 + 1], pr[k * 4 + 2], pr[k * 4 + 3]);
      const Eigen::Vector4d est = probe.decode(stats[h].predicted_vis.col(static_cast<Eigen::Index>(j)));
      pos += (est.head<2>() - truth.head<2>()).norm();
      vel += (est.tail<2>() - truth.tail<2>()).norm();
    }
    out.pos.push_back(pos / static_cast<double>(terms.size()));
    out.vel.push_back(vel / static_cast<double>(terms.size()));
  }
  return out;
}

double action_score(double error) { return error < 0.1 ? 800.0 * (0.1 - error) : 0.0; }

ActionScore action_error_and_score(const Mat& planned, const Mat& groundtruth) {
  if (planned.rows() != groundtruth.rows() || planned.cols() != groundtruth.cols())
    throw std::invalid_argument("action_error_and_score: shape mismatch");
  if (planned.size() == 0) throw std::invalid_argument("action_error_and_score: empty plan");
  ActionScore s;
  s.error = (planned - groundtruth).cwiseAbs().mean();
  s.score = action_score(s.error);
  return s;
}

std::vector<double> average_ranks(const std::vector<double>& xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("spearman: series lengths differ");
  if (xs.size() < 2) throw std::invalid_argument("spearman: need at least two points");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  const auto n = static_cast<double>(rx.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace wmplan
