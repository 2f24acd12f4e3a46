#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>

#include "test_support.hpp"

using namespace wmplan;
using namespace wmplan::testing;

namespace {

struct Fixture {
  LoadedDataset ds = small_dataset(12, 12);
  WorldModel model{tiny_model(Conditioning::layer_modulation, true, 3)};
  EmbeddedData emb;
  std::vector<SliceRecord> slices;

  explicit Fixture(int slice_W = 3, std::size_t n = 6) {
    perturb_parameters(model, 21, 0.2);
    emb = embed_dataset(model, ds.data, ds.stats);
    const auto all = slice(ds.data, ds.split.train, slice_W).slices;
    for (std::size_t i = 0; i < n; ++i) slices.push_back(all[i * all.size() / n]);
  }
};

struct Latent {
  Vec vis;
  Vec prop;
};

/**
 * One predictor call at a time. `live` supplies the called predictor and the
 * encoders of ground-truth inputs; fed-back predictions come from `frozen`.
 */
class HandRollout {
 public:
  HandRollout(const WorldModel& live, const WorldModel& frozen, const EmbeddedData& emb, const SliceRecord& rec, int W)
      : live_(live), frozen_(frozen), emb_(emb), rec_(rec), W_(W) {}

  Latent ground_truth(const WorldModel& m, int tau) const {
    const auto col = static_cast<Eigen::Index>(rec_.offset) + tau;
    Latent z;
    z.vis = emb_.vis[rec_.trajectory].col(col);
    if (m.config().proprio) z.prop = m.encode_prop(emb_.prop[rec_.trajectory].col(col));
    return z;
  }

  /// Chain rule: frames before `prefix` are ground truth, later ones are fed back.
  Latent chain(const WorldModel& m, int t, int prefix) const {
    std::vector<std::pair<int, Latent>> frames;
    for (int u = std::max(0, t - W_); u < t; ++u)
      frames.emplace_back(u, u < prefix ? ground_truth(m, u) : chain(frozen_, u, prefix));
    return call(m, frames, t);
  }

  /// Equal-order rule: every context frame is an order k-1 prediction.
  Latent equal(const WorldModel& m, int t, int k) const {
    std::vector<std::pair<int, Latent>> frames;
    for (int u = std::max(t - W_, k - 1); u < t; ++u)
      frames.emplace_back(u, k == 1 ? ground_truth(m, u) : equal(frozen_, u, k - 1));
    return call(m, frames, t);
  }

  double term_loss(const Latent& pred, int t) const {
    const Latent target = ground_truth(frozen_, t);
    double l = (pred.vis - target.vis).squaredNorm() / static_cast<double>(pred.vis.size());
    if (pred.prop.size() > 0) l += (pred.prop - target.prop).squaredNorm() / static_cast<double>(pred.prop.size());
    return l;
  }

  const WorldModel& live() const { return live_; }

 private:
  Latent call(const WorldModel& m, const std::vector<std::pair<int, Latent>>& frames, int t) const {
    const auto& c = m.config();
    ContextBatch ctx = ContextBatch::empty(c.context, 1, c.vis_dim, c.prop_dim, c.action_embed_dim, c.proprio);
    for (const auto& [u, z] : frames) {
      const int slot = c.context - (t - u);
      ctx.vis[slot].col(0) = z.vis;
      if (c.proprio) ctx.prop[slot].col(0) = z.prop;
      ctx.act[slot] =
          m.encode_action(emb_.act[rec_.trajectory].col(static_cast<Eigen::Index>(rec_.offset) + u));
      ctx.mask(slot, 0) = 1.0;
    }
    const LatentBatch out = m.predict(ctx);
    Latent z;
    z.vis = out.vis.col(0);
    if (c.proprio) z.prop = out.prop.col(0);
    return z;
  }

  const WorldModel& live_;
  const WorldModel& frozen_;
  const EmbeddedData& emb_;
  const SliceRecord& rec_;
  int W_;
};

/// Per-level losses of `terms` computed one call at a time.
std::vector<double> hand_losses(const WorldModel& live, const WorldModel& frozen, const Fixture& f, int W,
                                const std::vector<LossTerm>& terms, bool equal_order,
                                const std::vector<int>& prefixes, const std::vector<double>& norm) {
  std::vector<double> out(norm.size(), 0.0);
  for (const auto& term : terms) {
    const HandRollout h(live, frozen, f.emb, f.slices[term.slice], W);
    const int prefix = term.order == 1 ? term.target
                       : prefixes.empty() ? term.target - term.order + 1
                                          : prefixes[term.slice];
    const Latent p = equal_order ? h.equal(live, term.target, term.order) : h.chain(live, term.target, prefix);
    out[static_cast<std::size_t>(term.order - 1)] += h.term_loss(p, term.target);
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k] /= norm[k];
  return out;
}

double sum(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

TEST_CASE("one-step multistep loss is bit-identical to teacher forcing") {
  Fixture f;
  Rng rng(1);
  for (Strategy s : {Strategy::last_gradient_only, Strategy::all_gradients, Strategy::equal_order}) {
    Vec g1 = Vec::Zero(f.model.parameter_count());
    Vec g2 = Vec::Zero(f.model.parameter_count());
    const LossReport tf = teacher_forcing_loss(f.model, f.emb, f.slices, 3, &g1);
    const LossReport ms = multistep_loss(f.model, f.emb, f.slices, 3, 1, s, 0.0, rng, &g2);
    CHECK(tf.total == ms.total);
    CHECK(tf.losses == ms.losses);
    CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("horizon-1 unroll error is bit-identical to the teacher-forcing loss") {
  Fixture f(3 + 5 - 1);
  const UnrollErrors u = unroll_error(f.model, f.emb, f.slices, 3, 5, 3);
  const LossReport tf = teacher_forcing_loss(f.model, f.emb, f.slices, 3);
  CHECK(u.l2[0] == tf.total);
  REQUIRE(u.l2.size() == 5);
}

TEST_CASE("batched teacher forcing equals the mean of per-context evaluations") {
  Fixture f;
  const LossReport tf = teacher_forcing_loss(f.model, f.emb, f.slices, 3);
  const auto terms = teacher_forcing_terms(f.slices.size(), 3);
  const auto hand = hand_losses(f.model, f.model, f, 3, terms, false, {}, {3.0 * f.slices.size()});
  CHECK(std::abs(tf.total - hand[0]) <= 1e-6 * std::abs(hand[0]));
  CHECK(std::abs(tf.total - hand[0]) <= 1e-12 * std::abs(hand[0]));
}

TEST_CASE("term sets and normalizers follow each strategy") {
  const std::size_t B = 4;
  CHECK(enumerate_terms(Strategy::all_gradients, B, 3, 1).size() == 3 * B);
  CHECK(enumerate_terms(Strategy::all_gradients, B, 3, 3).size() == (3 + 2 + 1) * B);
  CHECK(enumerate_terms(Strategy::equal_order, B, 5, 2).size() == (5 + 4) * B);
  const auto lgo = enumerate_terms(Strategy::last_gradient_only, B, 3, 2, {1, 2, 1, 2});
  CHECK(lgo.size() == 3 * B + B);
  CHECK(lgo.back() == LossTerm{3, 3, 2});
  CHECK_THROWS(enumerate_terms(Strategy::all_gradients, B, 2, 3));
  CHECK_THROWS(enumerate_terms(Strategy::last_gradient_only, B, 3, 2, {1}));
}

TEST_CASE("multistep losses match a hand unroll for every strategy") {
  Fixture f;
  const double B = static_cast<double>(f.slices.size());
  SUBCASE("all gradients") {
    Rng rng(3);
    const LossReport r = multistep_loss(f.model, f.emb, f.slices, 3, 3, Strategy::all_gradients, 0.0, rng);
    const auto terms = enumerate_terms(Strategy::all_gradients, f.slices.size(), 3, 3);
    const auto hand = hand_losses(f.model, f.model, f, 3, terms, false, {}, {3 * B, 2 * B, B});
    for (int k = 0; k < 3; ++k) CHECK(r.losses[k] == doctest::Approx(hand[k]).epsilon(1e-12));
  }
  SUBCASE("equal order") {
    Rng rng(3);
    const LossReport r = multistep_loss(f.model, f.emb, f.slices, 3, 2, Strategy::equal_order, 0.0, rng);
    const auto terms = enumerate_terms(Strategy::equal_order, f.slices.size(), 3, 2);
    const auto hand = hand_losses(f.model, f.model, f, 3, terms, true, {}, {3 * B, 2 * B});
    for (int k = 0; k < 2; ++k) CHECK(r.losses[k] == doctest::Approx(hand[k]).epsilon(1e-12));
    // At order 2 the context holds predictions only, so it differs from the chain rule.
    const auto chain = hand_losses(f.model, f.model, f, 3, terms, false, {}, {3 * B, 2 * B});
    CHECK(chain[1] != doctest::Approx(hand[1]).epsilon(1e-9));
  }
  SUBCASE("last gradient only") {
    Rng rng(3);
    const LossReport r = multistep_loss(f.model, f.emb, f.slices, 3, 2, Strategy::last_gradient_only, 0.0, rng);
    REQUIRE(r.prefixes.size() == f.slices.size());
    for (int p : r.prefixes) CHECK((p >= 1 && p <= 2));
    const auto terms = enumerate_terms(Strategy::last_gradient_only, f.slices.size(), 3, 2, r.prefixes);
    const auto hand = hand_losses(f.model, f.model, f, 3, terms, false, r.prefixes, {3 * B, B});
    for (int k = 0; k < 2; ++k) CHECK(r.losses[k] == doctest::Approx(hand[k]).epsilon(1e-12));
  }
}

TEST_CASE("the rollout gradient treats fed-back predictions as constants") {
  Fixture f;
  const double B = static_cast<double>(f.slices.size());
  const auto terms = enumerate_terms(Strategy::all_gradients, f.slices.size(), 3, 2);
  const std::vector<double> norm = {3 * B, 2 * B};
  Rng rng(0);
  Vec g = Vec::Zero(f.model.parameter_count());
  multistep_loss(f.model, f.emb, f.slices, 3, 2, Strategy::all_gradients, 0.0, rng, &g);

  WorldModel live = f.model;
  const Vec truncated = central_difference(
      [&](const Vec& th) {
        live.parameters() = th;
        return sum(hand_losses(live, f.model, f, 3, terms, false, {}, norm));
      },
      f.model.parameters());
  CHECK(relative_error(g, truncated) < 1e-4);

  // Backpropagating through the fed-back predictions as well gives a different gradient.
  const Vec full = central_difference(
      [&](const Vec& th) {
        live.parameters() = th;
        return sum(hand_losses(live, live, f, 3, terms, false, {}, norm));
      },
      f.model.parameters());
  CHECK(relative_error(full, truncated) > 1e-3);
}

TEST_CASE("teacher-forcing gradient matches finite differences without proprio") {
  Fixture f;
  WorldModel m(tiny_model(Conditioning::feature_concat, false, 3));
  perturb_parameters(m, 5, 0.2);
  const EmbeddedData emb = embed_dataset(m, f.ds.data, f.ds.stats);
  Vec g = Vec::Zero(m.parameter_count());
  teacher_forcing_loss(m, emb, f.slices, 3, &g);
  WorldModel probe = m;
  const Vec fd = central_difference(
      [&](const Vec& th) {
        probe.parameters() = th;
        return teacher_forcing_loss(probe, emb, f.slices, 3).total;
      },
      m.parameters());
  CHECK(relative_error(g, fd) < 1e-4);
}

TEST_CASE("scheduled sampling only consumes randomness when active") {
  Fixture f;
  Rng a(9), b(9);
  const LossReport r0 = multistep_loss(f.model, f.emb, f.slices, 3, 2, Strategy::all_gradients, 0.0, a);
  CHECK(a.next_u64() == b.next_u64());
  Rng c(9);
  const LossReport r1 = multistep_loss(f.model, f.emb, f.slices, 3, 2, Strategy::all_gradients, 1.0, c);
  // With every prediction replaced, the order-2 terms see ground truth only.
  const double Bd = static_cast<double>(f.slices.size());
  std::vector<LossTerm> gt_terms;
  for (const auto& t : enumerate_terms(Strategy::all_gradients, f.slices.size(), 3, 2))
    if (t.order == 2) gt_terms.push_back({t.slice, t.target, 1});
  const auto hand = hand_losses(f.model, f.model, f, 3, gt_terms, false, {}, {2 * Bd});
  CHECK(r1.losses[1] == doctest::Approx(hand[0]).epsilon(1e-12));
  CHECK(r0.losses[1] != doctest::Approx(r1.losses[1]).epsilon(1e-9));
}

TEST_CASE("AdamW, clipping and the weight-decay schedule follow their formulas") {
  TrainConfig cfg;
  CHECK(weight_decay_at(cfg, 0, 100) == doctest::Approx(1e-7));
  CHECK(weight_decay_at(cfg, 99, 100) == doctest::Approx(1e-6));
  CHECK(weight_decay_at(cfg, 0, 100) < weight_decay_at(cfg, 50, 100));

  Vec g = (Vec(2) << 3.0, 4.0).finished();
  CHECK(clip_global_norm(g, 1.0) == doctest::Approx(5.0));
  CHECK(g.norm() == doctest::Approx(1.0));
  Vec small = (Vec(1) << 0.5).finished();
  clip_global_norm(small, 1.0);
  CHECK(small[0] == 0.5);

  Vec theta = (Vec(2) << 1.0, -2.0).finished();
  const Vec grad = (Vec(2) << 0.1, -0.3).finished();
  AdamState st;
  double m0 = 0, v0 = 0, th = 1.0;
  for (int t = 1; t <= 3; ++t) {
    adamw_update(theta, grad, st, 0.01, 0.1, 0.9, 0.995, 1e-8);
    th *= 1 - 0.01 * 0.1;
    m0 = 0.9 * m0 + 0.1 * 0.1;
    v0 = 0.995 * v0 + 0.005 * 0.01;
    th -= 0.01 * (m0 / (1 - std::pow(0.9, t))) / (std::sqrt(v0 / (1 - std::pow(0.995, t))) + 1e-8);
  }
  CHECK(theta[0] == doctest::Approx(th).epsilon(1e-14));
}

TEST_CASE("training steps do not depend on the thread count") {
  Fixture f(3, 70);
  TrainConfig cfg;
  cfg.rollout_steps = 2;
  cfg.seed = 4;
  WorldModel a = f.model, b = f.model;
  AdamState sa, sb;
  for (std::size_t s = 0; s < 3; ++s) {
    const LossReport ra = train_step(a, sa, f.emb, f.slices, cfg, s, 3, 1);
    const LossReport rb = train_step(b, sb, f.emb, f.slices, cfg, s, 3, 3);
    CHECK(ra.total == rb.total);
    CHECK(ra.prefixes == rb.prefixes);
  }
  CHECK((a.parameters() - b.parameters()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("a non-finite loss aborts the step") {
  Fixture f;
  TrainConfig cfg;
  WorldModel m = f.model;
  m.parameters()[m.block("out_vis_b").offset] = std::numeric_limits<double>::quiet_NaN();
  AdamState st;
  CHECK_THROWS_AS(train_step(m, st, f.emb, f.slices, cfg, 0, 1), InvariantViolation);
}

TEST_CASE("training records every epoch, keeps the encoder frozen and lowers the loss") {
  const LoadedDataset ds = small_dataset(30, 16);
  WorldModel m(tiny_model(Conditioning::feature_concat, true, 3));
  const auto enc = m.visual().hash();
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.eval_interval = 5;
  cfg.lr = 3e-3;
  int calls = 0;
  const Vec initial = m.parameters();
  const TrainOutput out = train(m, ds, cfg, 1, [&](const EpochMetrics& e, const Checkpoint& c) {
    CHECK(e.epoch == calls);
    CHECK(c.epoch == calls);
    ++calls;
  });
  CHECK(calls == 5);
  REQUIRE(out.checkpoints.size() == 5);
  CHECK((out.checkpoints[0].parameters - initial).norm() == 0.0);
  CHECK(m.visual().hash() == enc);
  CHECK(out.epochs.back().val_loss < out.epochs.front().val_loss);
  CHECK(out.epochs.back().val_unroll.l2.size() == 5);
  // Last partial batch is dropped: floor(n_slices / 32) steps per epoch.
  const std::size_t per_epoch = ds.split.train.size() * (16 - 3) / 32;
  CHECK(out.epochs.back().step == 4 * per_epoch);
  CHECK(out.interval_metrics.size() == 4 * per_epoch / 5);

  WorldModel again(tiny_model(Conditioning::feature_concat, true, 3));
  const TrainOutput out2 = train(again, ds, cfg, 2);
  CHECK((again.parameters() - m.parameters()).cwiseAbs().maxCoeff() == 0.0);
  CHECK(metrics_csv_row(out2.epochs.back()) == metrics_csv_row(out.epochs.back()));
}
