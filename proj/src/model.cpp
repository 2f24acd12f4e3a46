#include "wmplan/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "wmplan/config.hpp"

namespace wmplan {

namespace {

constexpr double kNormEps = 1e-5;

/// @brief tanh(x) = 1 - 2 / (1 + e^{2x}); vectorizes through Eigen's packet exp, saturates to ±1.
template <typename Derived>
Mat fast_tanh(const Eigen::ArrayBase<Derived>& x) {
  return (1.0 - 2.0 / (1.0 + (2.0 * x).exp())).matrix();
}
constexpr char kCheckpointMagic[8] = {'W', 'M', 'C', 'K', 'P', 'T', '0', '1'};

Mat masked(const Mat& x, const Eigen::RowVectorXd& m) { return x.array().rowwise() * m.array(); }

void add_rowsum(Eigen::Map<Mat> bias, const Mat& d) { bias.col(0) += d.rowwise().sum(); }

}  // namespace

std::string to_string(Conditioning c) {
  return c == Conditioning::feature_concat ? "feature_concat" : "layer_modulation";
}

Conditioning conditioning_from_string(const std::string& s) {
  if (s == "feature_concat") return Conditioning::feature_concat;
  if (s == "layer_modulation") return Conditioning::layer_modulation;
  throw std::invalid_argument("unknown conditioning '" + s + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const char* what) { throw std::invalid_argument(std::string("model.") + what); };
  if (grid < 2) fail("grid must be >= 2");
  if (vis_dim < 1) fail("vis_dim must be >= 1");
  if (prop_dim < 1) fail("prop_dim must be >= 1");
  if (action_embed_dim < 1) fail("action_embed_dim must be >= 1");
  if (width < 2) fail("width must be >= 2");
  if (depth < 1) fail("depth must be >= 1");
  if (context < 1) fail("context must be >= 1");
  if (!(rff_bandwidth > 0)) fail("rff_bandwidth must be > 0");
  if (!(rff_scale > 0)) fail("rff_scale must be > 0");
}

// ---------------------------------------------------------------- encoder

VisualEncoder::VisualEncoder(int grid, int dim, double bandwidth, double scale, std::uint64_t seed)
    : grid_(grid), scale_(scale), proj_(dim, grid * grid), phase_(dim) {
  Rng rng = Rng::stream(seed, {0x52464646ULL});
  for (Eigen::Index j = 0; j < proj_.cols(); ++j)
    for (Eigen::Index i = 0; i < proj_.rows(); ++i) proj_(i, j) = rng.normal() / bandwidth;
  for (Eigen::Index i = 0; i < phase_.size(); ++i) phase_[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
}

Vec VisualEncoder::encode(std::span<const float> raster) const {
  if (static_cast<Eigen::Index>(raster.size()) != proj_.cols())
    throw std::invalid_argument("encode_vis: raster has " + std::to_string(raster.size()) + " pixels, expected " +
                                std::to_string(proj_.cols()));
  Vec x(proj_.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = raster[static_cast<std::size_t>(i)];
  Vec z = proj_ * x + phase_;
  return scale_ * z.array().cos().matrix();
}

Mat VisualEncoder::encode_batch(const Mat& rasters) const {
  if (rasters.rows() != proj_.cols()) throw std::invalid_argument("encode_batch: raster size mismatch");
  Mat z = proj_ * rasters;
  z.colwise() += phase_;
  return scale_ * z.array().cos().matrix();
}

std::uint64_t VisualEncoder::hash() const {
  std::uint64_t h = fnv1a64(proj_.data(), sizeof(double) * static_cast<std::size_t>(proj_.size()));
  h = fnv1a64(phase_.data(), sizeof(double) * static_cast<std::size_t>(phase_.size()), h);
  return fnv1a64(&scale_, sizeof(scale_), h);
}

double mean_neighbor_similarity(const VisualEncoder& enc, const EnvConfig& env, double separation, int samples,
                                std::uint64_t seed) {
  Rng rng = Rng::stream(seed, {0x43414cULL});
  const double L = env.arena_half_extent;
  double total = 0.0;
  int count = 0;
  while (count < samples) {
    EnvState a;
    a.pos = Vec2(rng.uniform(-L, L), rng.uniform(-L, L));
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    EnvState b = a;
    b.pos = a.pos + separation * Vec2(std::cos(theta), std::sin(theta));
    if (!is_free(a.pos, env) || !is_free(b.pos, env)) continue;
    const Vec za = enc.encode(render(a, env).raster);
    const Vec zb = enc.encode(render(b, env).raster);
    total += za.dot(zb) / (za.norm() * zb.norm());
    ++count;
  }
  return total / samples;
}

double calibrate_bandwidth(const EnvConfig& env, int dim, std::uint64_t seed, double separation, double target) {
  double lo = std::log(0.05);
  double hi = std::log(200.0);
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    VisualEncoder enc(env.grid, dim, std::exp(mid), 1.0, seed);
    // Wider kernels give more similar neighbors.
    if (mean_neighbor_similarity(enc, env, separation, 200, seed) < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return std::exp(0.5 * (lo + hi));
}

// ---------------------------------------------------------------- context

ContextBatch ContextBatch::empty(int slots, Eigen::Index batch, int vis_dim, int prop_dim, int act_dim,
                                 bool proprio) {
  ContextBatch c;
  c.vis.assign(static_cast<std::size_t>(slots), Mat::Zero(vis_dim, batch));
  if (proprio) c.prop.assign(static_cast<std::size_t>(slots), Mat::Zero(prop_dim, batch));
  c.act.assign(static_cast<std::size_t>(slots), Mat::Zero(act_dim, batch));
  c.mask = Mat::Zero(slots, batch);
  return c;
}

// ---------------------------------------------------------------- model

WorldModel::WorldModel(const ModelConfig& cfg)
    : cfg_(cfg), visual_(cfg.grid, cfg.vis_dim, cfg.rff_bandwidth, cfg.rff_scale, cfg.encoder_seed) {
  cfg_.validate();
  const int D = cfg_.vis_dim;
  const int P = cfg_.prop_dim;
  const int Ae = cfg_.action_embed_dim;
  const int Wd = cfg_.width;
  auto idx = [this] { return static_cast<int>(blocks_.size()) - 1; };

  add_block("act_w", Ae, kActionDim);
  act_w_ = idx();
  add_block("act_b", Ae, 1);
  act_b_ = idx();
  if (cfg_.proprio) {
    add_block("prop_w", P, kProprioDim);
    prop_w_ = idx();
    add_block("prop_b", P, 1);
    prop_b_ = idx();
  }
  for (int l = 0; l < cfg_.depth; ++l) {
    const int in = l == 0 ? input_dim() : Wd;
    add_block("layer" + std::to_string(l) + "_w", Wd, in);
    layer_w_.push_back(idx());
    add_block("layer" + std::to_string(l) + "_b", Wd, 1);
    layer_b_.push_back(idx());
    if (cfg_.conditioning == Conditioning::layer_modulation) {
      add_block("mod" + std::to_string(l) + "_gamma_w", Wd, cond_dim());
      gam_w_.push_back(idx());
      add_block("mod" + std::to_string(l) + "_gamma_b", Wd, 1);
      gam_b_.push_back(idx());
      add_block("mod" + std::to_string(l) + "_beta_w", Wd, cond_dim());
      bet_w_.push_back(idx());
      add_block("mod" + std::to_string(l) + "_beta_b", Wd, 1);
      bet_b_.push_back(idx());
    }
  }
  add_block("out_vis_w", D, Wd);
  out_vis_w_ = idx();
  add_block("out_vis_b", D, 1);
  out_vis_b_ = idx();
  if (cfg_.proprio) {
    add_block("out_prop_w", P, Wd);
    out_prop_w_ = idx();
    add_block("out_prop_b", P, 1);
    out_prop_b_ = idx();
  }
  Eigen::Index total = 0;
  for (auto& b : blocks_) {
    b.offset = total;
    total += b.size();
  }
  theta_ = Vec::Zero(total);
  initialize();
}

ParamBlock& WorldModel::add_block(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  blocks_.push_back(ParamBlock{name, 0, rows, cols});
  return blocks_.back();
}

void WorldModel::initialize() {
  Rng rng = Rng::stream(cfg_.init_seed, {0x494e4954ULL});
  // Weight and bias of an affine map share the fan-in of the weight.
  Eigen::Index fan_in = 1;
  for (const auto& b : blocks_) {
    const bool is_mod = b.name.rfind("mod", 0) == 0;
    if (b.cols > 1 || b.name.ends_with("_w")) fan_in = b.cols;
    if (is_mod) continue;  // modulation heads start at gamma = 1, beta = 0
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < b.size(); ++i) theta_[b.offset + i] = rng.uniform(-bound, bound);
  }
}

const ParamBlock& WorldModel::block(const std::string& name) const {
  for (const auto& b : blocks_)
    if (b.name == name) return b;
  throw std::out_of_range("no parameter block '" + name + "'");
}

Eigen::Map<const Mat> WorldModel::view(const ParamBlock& b) const {
  return Eigen::Map<const Mat>(theta_.data() + b.offset, b.rows, b.cols);
}

Eigen::Map<Mat> WorldModel::view(const ParamBlock& b, Vec& storage) const {
  return Eigen::Map<Mat>(storage.data() + b.offset, b.rows, b.cols);
}

int WorldModel::input_dim() const {
  int per_slot = cfg_.vis_dim + 1;
  if (cfg_.proprio) per_slot += cfg_.prop_dim;
  if (cfg_.conditioning == Conditioning::feature_concat) per_slot += cfg_.action_embed_dim;
  return cfg_.context * per_slot;
}

int WorldModel::cond_dim() const { return cfg_.context * cfg_.action_embed_dim; }

Vec WorldModel::encode_vis(const Observation& obs) const {
  if (obs.grid != cfg_.grid) throw std::invalid_argument("encode_vis: observation grid does not match the model");
  return visual_.encode(obs.raster);
}

Mat WorldModel::encode_prop(const Mat& proprio) const {
  if (!cfg_.proprio) return Mat(0, proprio.cols());
  if (proprio.rows() != kProprioDim) throw std::invalid_argument("encode_prop: expected 4 rows");
  Mat out = view(blocks_[prop_w_]) * proprio;
  out.colwise() += view(blocks_[prop_b_]).col(0);
  return out;
}

Mat WorldModel::encode_action(const Mat& actions) const {
  if (actions.rows() != kActionDim) throw std::invalid_argument("encode_action: expected 2 rows");
  Mat out = view(blocks_[act_w_]) * actions;
  out.colwise() += view(blocks_[act_b_]).col(0);
  return out;
}

LatentBatch WorldModel::encode_state(const Observation& obs, const NormStats& stats) const {
  LatentBatch z;
  z.vis = encode_vis(obs);
  if (cfg_.proprio) {
    if (!obs.proprio) throw std::invalid_argument("encode_state: observation lacks proprio");
    const Vec p = stats.normalize_proprio(Vec(*obs.proprio));
    z.prop = encode_prop(p);
  } else {
    z.prop = Mat(0, 1);
  }
  return z;
}

LatentBatch WorldModel::predict(const ContextBatch& ctx, PredictorTape* tape) const {
  const int S = cfg_.context;
  const int D = cfg_.vis_dim;
  const int P = cfg_.prop_dim;
  const int Ae = cfg_.action_embed_dim;
  const Eigen::Index B = ctx.batch();
  if (ctx.slots() != S || static_cast<int>(ctx.vis.size()) != S || static_cast<int>(ctx.act.size()) != S)
    throw std::invalid_argument("predict: context has wrong slot count");
  if (cfg_.proprio && static_cast<int>(ctx.prop.size()) != S)
    throw std::invalid_argument("predict: context lacks proprio slots");
  if ((ctx.mask.row(S - 1).array() != 1.0).any())
    throw std::invalid_argument("predict: valid_len = 0 (last context slot empty)");
  for (int s = 0; s < S; ++s) {
    if (ctx.vis[s].rows() != D || ctx.vis[s].cols() != B || ctx.act[s].rows() != Ae || ctx.act[s].cols() != B)
      throw std::invalid_argument("predict: context dimension mismatch");
    if (cfg_.proprio && (ctx.prop[s].rows() != P || ctx.prop[s].cols() != B))
      throw std::invalid_argument("predict: proprio dimension mismatch");
  }
  const bool concat = cfg_.conditioning == Conditioning::feature_concat;

  Mat X(input_dim(), B);
  Eigen::Index r = 0;
  for (int s = 0; s < S; ++s) {
    const Eigen::RowVectorXd m = ctx.mask.row(s);
    X.middleRows(r, D) = masked(ctx.vis[s], m);
    r += D;
    if (cfg_.proprio) {
      X.middleRows(r, P) = masked(ctx.prop[s], m);
      r += P;
    }
    if (concat) {
      X.middleRows(r, Ae) = masked(ctx.act[s], m);
      r += Ae;
    }
    X.row(r) = m;
    r += 1;
  }
  Mat C;
  if (!concat) {
    C.resize(cond_dim(), B);
    for (int s = 0; s < S; ++s) C.middleRows(static_cast<Eigen::Index>(s) * Ae, Ae) = masked(ctx.act[s], ctx.mask.row(s));
  }
  if (tape) {
    *tape = PredictorTape{};
    tape->input = X;
    tape->cond = C;
    tape->mask = ctx.mask;
  }

  Mat h = X;
  for (int l = 0; l < cfg_.depth; ++l) {
    Mat a = view(blocks_[layer_w_[l]]) * h;
    a.colwise() += view(blocks_[layer_b_[l]]).col(0);
    const Eigen::RowVectorXd mu = a.colwise().mean();
    a.rowwise() -= mu;
    const Eigen::RowVectorXd var = a.array().square().colwise().mean();
    const Eigen::RowVectorXd inv = (var.array() + kNormEps).rsqrt();
    Mat n = a.array().rowwise() * inv.array();
    Mat g;
    Mat pre;
    if (concat) {
      pre = n;
    } else {
      g = view(blocks_[gam_w_[l]]) * C;
      g.colwise() += view(blocks_[gam_b_[l]]).col(0);
      g.array() += 1.0;
      Mat beta = view(blocks_[bet_w_[l]]) * C;
      beta.colwise() += view(blocks_[bet_b_[l]]).col(0);
      pre = g.cwiseProduct(n) + beta;
    }
    h = fast_tanh(pre.array());
    if (tape) {
      tape->normed.push_back(std::move(n));
      tape->inv_std.push_back(inv);
      tape->gamma.push_back(std::move(g));
      tape->hidden.push_back(h);
    }
  }

  LatentBatch out;
  out.vis = view(blocks_[out_vis_w_]) * h;
  out.vis.colwise() += view(blocks_[out_vis_b_]).col(0);
  out.vis += ctx.vis[S - 1];
  if (cfg_.proprio) {
    out.prop = view(blocks_[out_prop_w_]) * h;
    out.prop.colwise() += view(blocks_[out_prop_b_]).col(0);
    out.prop += ctx.prop[S - 1];
  } else {
    out.prop = Mat(0, B);
  }
  if (tape) tape->recorded = true;
  return out;
}

ContextGrad WorldModel::backward(const PredictorTape& tape, const Mat& d_vis, const Mat& d_prop, Vec* grad) const {
  if (!tape.recorded) throw std::logic_error("backward: no forward pass was recorded on this tape");
  const int S = cfg_.context;
  const int D = cfg_.vis_dim;
  const int P = cfg_.prop_dim;
  const int Ae = cfg_.action_embed_dim;
  const Eigen::Index B = tape.input.cols();
  const bool concat = cfg_.conditioning == Conditioning::feature_concat;
  if (grad && grad->size() != theta_.size()) throw std::invalid_argument("backward: gradient buffer size mismatch");

  const Mat& h_last = tape.hidden.back();
  Mat dh = view(blocks_[out_vis_w_]).transpose() * d_vis;
  if (grad) {
    view(blocks_[out_vis_w_], *grad).noalias() += d_vis * h_last.transpose();
    add_rowsum(view(blocks_[out_vis_b_], *grad), d_vis);
  }
  if (cfg_.proprio) {
    dh.noalias() += view(blocks_[out_prop_w_]).transpose() * d_prop;
    if (grad) {
      view(blocks_[out_prop_w_], *grad).noalias() += d_prop * h_last.transpose();
      add_rowsum(view(blocks_[out_prop_b_], *grad), d_prop);
    }
  }

  Mat dC;
  if (!concat) dC = Mat::Zero(cond_dim(), B);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const Mat& h = tape.hidden[static_cast<std::size_t>(l)];
    const Mat& n = tape.normed[static_cast<std::size_t>(l)];
    Mat dm = dh.array() * (1.0 - h.array().square());
    Mat dn;
    if (concat) {
      dn = std::move(dm);
    } else {
      const Mat dg = dm.cwiseProduct(n);
      if (grad) {
        view(blocks_[gam_w_[l]], *grad).noalias() += dg * tape.cond.transpose();
        add_rowsum(view(blocks_[gam_b_[l]], *grad), dg);
        view(blocks_[bet_w_[l]], *grad).noalias() += dm * tape.cond.transpose();
        add_rowsum(view(blocks_[bet_b_[l]], *grad), dm);
      }
      dC.noalias() += view(blocks_[gam_w_[l]]).transpose() * dg;
      dC.noalias() += view(blocks_[bet_w_[l]]).transpose() * dm;
      dn = dm.cwiseProduct(tape.gamma[static_cast<std::size_t>(l)]);
    }
    const Eigen::RowVectorXd mean_dn = dn.colwise().mean();
    const Eigen::RowVectorXd mean_dnn = dn.cwiseProduct(n).colwise().mean();
    Mat da = n.array().rowwise() * mean_dnn.array();
    da = (dn - da).rowwise() - mean_dn;
    da = da.array().rowwise() * tape.inv_std[static_cast<std::size_t>(l)].array();
    const Mat& h_prev = l == 0 ? tape.input : tape.hidden[static_cast<std::size_t>(l - 1)];
    if (grad) {
      view(blocks_[layer_w_[l]], *grad).noalias() += da * h_prev.transpose();
      add_rowsum(view(blocks_[layer_b_[l]], *grad), da);
    }
    dh = view(blocks_[layer_w_[l]]).transpose() * da;
  }

  ContextGrad cg;
  cg.vis.resize(static_cast<std::size_t>(S));
  cg.act.resize(static_cast<std::size_t>(S));
  if (cfg_.proprio) cg.prop.resize(static_cast<std::size_t>(S));
  Eigen::Index r = 0;
  for (int s = 0; s < S; ++s) {
    const Eigen::RowVectorXd m = tape.mask.row(s);
    cg.vis[s] = masked(dh.middleRows(r, D), m);
    r += D;
    if (cfg_.proprio) {
      cg.prop[s] = masked(dh.middleRows(r, P), m);
      r += P;
    }
    if (concat) {
      cg.act[s] = masked(dh.middleRows(r, Ae), m);
      r += Ae;
    } else {
      cg.act[s] = masked(dC.middleRows(static_cast<Eigen::Index>(s) * Ae, Ae), m);
    }
    r += 1;  // mask channel
  }
  cg.vis[S - 1] += d_vis;
  if (cfg_.proprio) cg.prop[S - 1] += d_prop;
  return cg;
}

Mat WorldModel::backward_action(const Mat& actions, const Mat& d_embed, Vec* grad) const {
  if (grad) {
    view(blocks_[act_w_], *grad).noalias() += d_embed * actions.transpose();
    add_rowsum(view(blocks_[act_b_], *grad), d_embed);
  }
  return view(blocks_[act_w_]).transpose() * d_embed;
}

void WorldModel::backward_prop(const Mat& proprio, const Mat& d_embed, Vec* grad) const {
  if (!cfg_.proprio || !grad) return;
  view(blocks_[prop_w_], *grad).noalias() += d_embed * proprio.transpose();
  add_rowsum(view(blocks_[prop_b_], *grad), d_embed);
}

// ---------------------------------------------------------------- checkpoints

Checkpoint make_checkpoint(const WorldModel& model, const NormStats& stats, int trained_context, int epoch,
                           std::size_t step) {
  Checkpoint c;
  c.model = model.config();
  c.stats = stats;
  c.trained_context = trained_context;
  c.epoch = epoch;
  c.step = step;
  c.parameters = model.parameters();
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json h;
  h["format"] = "wmplan-checkpoint";
  h["version"] = 1;
  h["model"] = model_to_json(ckpt.model);
  h["norm_stats"] = norm_stats_to_json(ckpt.stats);
  h["trained_context"] = ckpt.trained_context;
  h["epoch"] = ckpt.epoch;
  h["step"] = ckpt.step;
  h["param_count"] = ckpt.parameters.size();
  const std::string header = h.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((len >> (8 * i)) & 0xff));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<char> payload(static_cast<std::size_t>(ckpt.parameters.size()) * 4);
  for (Eigen::Index i = 0; i < ckpt.parameters.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(ckpt.parameters[i]));
    for (int b = 0; b < 4; ++b) payload[static_cast<std::size_t>(4 * i + b)] = static_cast<char>((u >> (8 * b)) & 0xff);
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing checkpoint: " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw InvariantViolation("not a checkpoint: " + path.string());
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(in.get())) << (8 * i);
  std::string header(len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(len));
  if (!in) throw InvariantViolation("truncated checkpoint header: " + path.string());
  const auto h = nlohmann::json::parse(header);
  Checkpoint c;
  c.model = model_from_json(h.at("model"), "model");
  c.stats = norm_stats_from_json(h.at("norm_stats"));
  c.trained_context = h.at("trained_context").get<int>();
  c.epoch = h.at("epoch").get<int>();
  c.step = h.at("step").get<std::size_t>();
  const auto n = h.at("param_count").get<Eigen::Index>();
  std::vector<unsigned char> payload(static_cast<std::size_t>(n) * 4);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!in) throw InvariantViolation("truncated checkpoint payload: " + path.string());
  c.parameters.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::uint32_t u = 0;
    for (int b = 0; b < 4; ++b) u |= std::uint32_t{payload[static_cast<std::size_t>(4 * i + b)]} << (8 * b);
    c.parameters[i] = std::bit_cast<float>(u);
  }
  return c;
}

WorldModel model_from_checkpoint(const Checkpoint& ckpt) {
  WorldModel m(ckpt.model);
  if (m.parameter_count() != ckpt.parameters.size())
    throw InvariantViolation("checkpoint parameter count does not match its model config");
  m.parameters() = ckpt.parameters;
  return m;
}

}  // namespace wmplan
