#include "wmplan/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "wmplan/config.hpp"
#include "wmplan/parallel.hpp"

namespace wmplan {

namespace {

constexpr int kFormatVersion = 1;

Action random_action(Rng& rng, const EnvConfig& env) {
  Action a;
  a.force = Vec2(rng.uniform(-env.max_force, env.max_force), rng.uniform(-env.max_force, env.max_force));
  return a;
}

Vec2 draw_free_point(Rng& rng, const EnvConfig& env) {
  const double L = env.arena_half_extent;
  for (;;) {
    Vec2 p(rng.uniform(-L, L), rng.uniform(-L, L));
    if (is_free(p, env)) return p;
  }
}

// Proportional-derivative steering toward a waypoint, saturated to the force bound.
Action steer(const Vec2& pos, const Vec2& vel, const Vec2& waypoint, const EnvConfig& env) {
  Action a;
  a.force = 2.0 * (waypoint - pos) - 1.0 * vel;
  return clip_action(a, env);
}

Trajectory rollout(const EnvConfig& env, Policy policy, std::size_t traj_len, std::uint64_t seed,
                   std::size_t index, int frameskip) {
  Rng rng = Rng::stream(seed, {0x54524aULL, index});
  Trajectory tr;
  tr.grid = env.grid;
  tr.seed = splitmix64(seed ^ splitmix64(index));
  EnvState s;
  s.pos = draw_free_point(rng, env);
  s.goal_pos = s.pos;
  Vec2 target = draw_free_point(rng, env);

  auto record = [&](const EnvState& st) {
    Observation o = render(st, env);
    tr.rasters.insert(tr.rasters.end(), o.raster.begin(), o.raster.end());
    tr.proprio.push_back(static_cast<float>(st.pos.x()));
    tr.proprio.push_back(static_cast<float>(st.pos.y()));
    tr.proprio.push_back(static_cast<float>(st.vel.x()));
    tr.proprio.push_back(static_cast<float>(st.vel.y()));
  };
  // The simulator runs on the float32-rounded state so that stored data is self-consistent.
  auto round_state = [](EnvState st) {
    for (int i = 0; i < 2; ++i) {
      st.pos[i] = static_cast<float>(st.pos[i]);
      st.vel[i] = static_cast<float>(st.vel[i]);
    }
    return st;
  };
  s = round_state(s);
  record(s);
  for (std::size_t t = 0; t < traj_len; ++t) {
    Action a;
    if (policy == Policy::random || rng.uniform() < 0.5) {
      a = random_action(rng, env);
    } else {
      if ((s.pos - target).norm() < 0.15) target = draw_free_point(rng, env);
      Vec2 waypoint = target;
      if (env.kind == EnvKind::wall && room_of(s.pos, env) != room_of(target, env)) {
        const Vec2 door = door_center(env);
        // Line up with the door before pushing through it.
        waypoint = std::abs(s.pos.y() - door.y()) > 0.5 * env.door_half_width
                       ? Vec2(door.x() - 0.25 * room_of(target, env), door.y())
                       : Vec2(door.x() + 0.25 * room_of(target, env), door.y());
      }
      a = steer(s.pos, s.vel, waypoint, env);
    }
    a.force = a.force.cast<float>().cast<double>();
    tr.actions.push_back(static_cast<float>(a.force.x()));
    tr.actions.push_back(static_cast<float>(a.force.y()));
    s = round_state(frameskip_step(s, a, frameskip, env));
    record(s);
  }
  return tr;
}

void write_f32(std::ofstream& out, std::span<const float> values) {
  std::vector<unsigned char> buf(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(values[i]);
    buf[4 * i + 0] = static_cast<unsigned char>(u & 0xff);
    buf[4 * i + 1] = static_cast<unsigned char>((u >> 8) & 0xff);
    buf[4 * i + 2] = static_cast<unsigned char>((u >> 16) & 0xff);
    buf[4 * i + 3] = static_cast<unsigned char>((u >> 24) & 0xff);
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void read_f32(std::ifstream& in, std::vector<float>& dst, std::size_t count) {
  std::vector<unsigned char> buf(count * 4);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw InvariantViolation("dataset payload truncated");
  dst.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t u = std::uint32_t{buf[4 * i]} | (std::uint32_t{buf[4 * i + 1]} << 8) |
                            (std::uint32_t{buf[4 * i + 2]} << 16) | (std::uint32_t{buf[4 * i + 3]} << 24);
    dst[i] = std::bit_cast<float>(u);
  }
}

}  // namespace

std::string to_string(Policy p) { return p == Policy::random ? "random" : "scripted_door"; }

Policy policy_from_string(const std::string& s) {
  if (s == "random") return Policy::random;
  if (s == "scripted_door") return Policy::scripted_door;
  throw std::invalid_argument("unknown policy '" + s + "'");
}

Observation Trajectory::observation(std::size_t i) const {
  Observation o;
  o.grid = grid;
  const std::size_t g2 = static_cast<std::size_t>(grid) * grid;
  o.raster.assign(rasters.begin() + static_cast<std::ptrdiff_t>(i * g2),
                  rasters.begin() + static_cast<std::ptrdiff_t>((i + 1) * g2));
  o.proprio = Eigen::Vector4d(proprio[4 * i], proprio[4 * i + 1], proprio[4 * i + 2], proprio[4 * i + 3]);
  return o;
}

Action Trajectory::action(std::size_t i) const {
  Action a;
  a.force = Vec2(actions[2 * i], actions[2 * i + 1]);
  return a;
}

Vec NormStats::normalize_action(const Vec& a) const {
  return (a - action_mean).cwiseQuotient(action_std);
}

Vec NormStats::denormalize_action(const Vec& a) const {
  return a.cwiseProduct(action_std) + action_mean;
}

Vec NormStats::normalize_proprio(const Vec& p) const {
  return (p - proprio_mean).cwiseQuotient(proprio_std);
}

Dataset generate(const EnvConfig& env, Policy policy, std::size_t n_traj, std::size_t traj_len,
                 std::uint64_t seed, int frameskip, int threads) {
  env.validate();
  if (n_traj < 1 || traj_len < 1) throw std::invalid_argument("generate: n_traj and traj_len must be >= 1");
  if (frameskip < 1) throw std::invalid_argument("generate: frameskip must be >= 1");
  Dataset data;
  data.env = env;
  data.policy = policy;
  data.frameskip = frameskip;
  data.seed = seed;
  data.trajectories.resize(n_traj);
  parallel_for(n_traj, threads, [&](std::size_t i) {
    data.trajectories[i] = rollout(env, policy, traj_len, seed, i, frameskip);
  });
  return data;
}

NormStats compute_norm_stats(const Dataset& data, std::span<const std::size_t> trajectories) {
  NormStats st;
  std::size_t na = 0;
  std::size_t np = 0;
  Vec asum = Vec::Zero(kActionDim);
  Vec psum = Vec::Zero(kProprioDim);
  for (auto ti : trajectories) {
    const auto& tr = data.trajectories.at(ti);
    for (std::size_t i = 0; i < tr.num_actions(); ++i) {
      for (int d = 0; d < kActionDim; ++d) asum[d] += tr.actions[kActionDim * i + d];
      ++na;
    }
    for (std::size_t i = 0; i < tr.num_observations(); ++i) {
      for (int d = 0; d < kProprioDim; ++d) psum[d] += tr.proprio[kProprioDim * i + d];
      ++np;
    }
  }
  if (na == 0) throw std::invalid_argument("compute_norm_stats: no actions in the selected trajectories");
  st.action_mean = asum / static_cast<double>(na);
  st.proprio_mean = psum / static_cast<double>(np);
  Vec avar = Vec::Zero(kActionDim);
  Vec pvar = Vec::Zero(kProprioDim);
  for (auto ti : trajectories) {
    const auto& tr = data.trajectories[ti];
    for (std::size_t i = 0; i < tr.num_actions(); ++i)
      for (int d = 0; d < kActionDim; ++d) avar[d] += std::pow(tr.actions[kActionDim * i + d] - st.action_mean[d], 2);
    for (std::size_t i = 0; i < tr.num_observations(); ++i)
      for (int d = 0; d < kProprioDim; ++d)
        pvar[d] += std::pow(tr.proprio[kProprioDim * i + d] - st.proprio_mean[d], 2);
  }
  st.action_std = (avar / static_cast<double>(na)).cwiseSqrt().cwiseMax(kStdFloor);
  st.proprio_std = (pvar / static_cast<double>(np)).cwiseSqrt().cwiseMax(kStdFloor);
  return st;
}

NormStats compute_norm_stats(const Dataset& data) {
  const auto idx = all_indices(data.trajectories.size());
  return compute_norm_stats(data, idx);
}

SliceSet slice(const Dataset& data, std::span<const std::size_t> trajectories, int W) {
  if (W < 1) throw std::invalid_argument("slice: W must be >= 1");
  const std::size_t len = static_cast<std::size_t>(W) + 1;
  SliceSet out;
  for (auto ti : trajectories) {
    const auto& tr = data.trajectories.at(ti);
    if (tr.num_actions() < len) {
      ++out.skipped_trajectories;
      continue;
    }
    for (std::size_t o = 0; o + len <= tr.num_actions(); ++o) out.slices.push_back({ti, o, len});
  }
  return out;
}

SliceSet slice(const Dataset& data, int W) {
  const auto idx = all_indices(data.trajectories.size());
  return slice(data, idx, W);
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

Split split(std::size_t n, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("split: train_frac must be in (0, 1)");
  auto idx = all_indices(n);
  Rng rng = Rng::stream(seed, {0x53504c54ULL});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(n)));
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

std::string env_hash(const EnvConfig& env) {
  const std::string s = env_to_json(env).dump();
  return hex64(fnv1a64(s.data(), s.size()));
}

void save_dataset(const Dataset& data, const std::filesystem::path& stem, const Split& sp,
                  const NormStats& stats, int slice_W) {
  using nlohmann::json;
  const auto bin_path = std::filesystem::path(stem.string() + ".bin");
  const auto manifest_path = std::filesystem::path(stem.string() + ".manifest.json");
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());

  std::size_t n_obs = 0;
  std::size_t n_act = 0;
  std::vector<std::size_t> lengths;
  std::vector<std::string> seeds;
  for (const auto& tr : data.trajectories) {
    n_obs += tr.num_observations();
    n_act += tr.num_actions();
    lengths.push_back(tr.num_actions());
    seeds.push_back(hex64(tr.seed));
  }
  const std::size_t g2 = static_cast<std::size_t>(data.env.grid) * data.env.grid;
  const std::size_t raster_bytes = n_obs * g2 * 4;
  const std::size_t proprio_bytes = n_obs * kProprioDim * 4;
  const std::size_t action_bytes = n_act * kActionDim * 4;

  std::ofstream out(bin_path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + bin_path.string());
  for (const auto& tr : data.trajectories) write_f32(out, tr.rasters);
  for (const auto& tr : data.trajectories) write_f32(out, tr.proprio);
  for (const auto& tr : data.trajectories) write_f32(out, tr.actions);
  out.close();

  const SliceSet sl = slice(data, sp.train, slice_W);
  const SliceSet slv = slice(data, sp.val, slice_W);
  json m;
  m["version"] = kFormatVersion;
  m["env"] = env_to_json(data.env);
  m["env_hash"] = env_hash(data.env);
  m["policy"] = to_string(data.policy);
  m["seed"] = data.seed;
  m["frameskip"] = data.frameskip;
  m["counts"] = {{"trajectories", data.trajectories.size()},
                 {"observations", n_obs},
                 {"actions", n_act},
                 {"train", sp.train.size()},
                 {"val", sp.val.size()}};
  m["dims"] = {{"grid", data.env.grid}, {"proprio", kProprioDim}, {"action", kActionDim}};
  m["lengths"] = lengths;
  m["trajectory_seeds"] = seeds;
  m["split"] = {{"train", sp.train}, {"val", sp.val}};
  m["norm_stats"] = norm_stats_to_json(stats);
  m["skip_counts"] = {{"W", slice_W},
                      {"train_slices", sl.slices.size()},
                      {"val_slices", slv.slices.size()},
                      {"skipped_trajectories", sl.skipped_trajectories + slv.skipped_trajectories}};
  m["payload"] = {{"file", bin_path.filename().string()},
                  {"endianness", "little"},
                  {"dtype", "float32"},
                  {"rasters", {{"offset", 0}, {"bytes", raster_bytes}}},
                  {"proprio", {{"offset", raster_bytes}, {"bytes", proprio_bytes}}},
                  {"actions", {{"offset", raster_bytes + proprio_bytes}, {"bytes", action_bytes}}},
                  {"total_bytes", raster_bytes + proprio_bytes + action_bytes}};
  std::ofstream mf(manifest_path, std::ios::trunc);
  if (!mf) throw std::runtime_error("cannot write " + manifest_path.string());
  mf << m.dump(2) << "\n";
}

LoadedDataset load_dataset(const std::filesystem::path& stem) {
  using nlohmann::json;
  const auto manifest_path = std::filesystem::path(stem.string() + ".manifest.json");
  std::ifstream mf(manifest_path);
  if (!mf) throw std::runtime_error("missing dataset manifest: " + manifest_path.string());
  json m;
  try {
    m = json::parse(mf);
  } catch (const json::exception& e) {
    throw InvariantViolation("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }
  if (m.at("version").get<int>() != kFormatVersion) throw InvariantViolation("unsupported dataset version");

  LoadedDataset ld;
  ld.data.env = env_from_json(m.at("env"), "env");
  ld.env_hash = m.at("env_hash").get<std::string>();
  if (ld.env_hash != env_hash(ld.data.env)) throw InvariantViolation("dataset env hash mismatch");
  ld.data.policy = policy_from_string(m.at("policy").get<std::string>());
  ld.data.seed = m.at("seed").get<std::uint64_t>();
  ld.data.frameskip = m.at("frameskip").get<int>();
  const auto lengths = m.at("lengths").get<std::vector<std::size_t>>();
  const auto seeds = m.at("trajectory_seeds").get<std::vector<std::string>>();
  const int grid = m.at("dims").at("grid").get<int>();
  const std::size_t g2 = static_cast<std::size_t>(grid) * grid;

  std::size_t n_obs = 0;
  std::size_t n_act = 0;
  for (auto l : lengths) {
    n_act += l;
    n_obs += l + 1;
  }
  const auto& payload = m.at("payload");
  if (payload.at("rasters").at("bytes").get<std::size_t>() != n_obs * g2 * 4 ||
      payload.at("proprio").at("bytes").get<std::size_t>() != n_obs * kProprioDim * 4 ||
      payload.at("actions").at("bytes").get<std::size_t>() != n_act * kActionDim * 4 ||
      payload.at("proprio").at("offset").get<std::size_t>() != n_obs * g2 * 4 ||
      payload.at("actions").at("offset").get<std::size_t>() != n_obs * (g2 + kProprioDim) * 4) {
    throw InvariantViolation("dataset manifest offsets inconsistent with payload sizes");
  }
  const auto bin_path = manifest_path.parent_path() / payload.at("file").get<std::string>();
  if (std::filesystem::file_size(bin_path) != payload.at("total_bytes").get<std::size_t>())
    throw InvariantViolation("dataset payload size mismatch: " + bin_path.string());
  std::ifstream in(bin_path, std::ios::binary);
  if (!in) throw std::runtime_error("missing dataset payload: " + bin_path.string());

  auto& trs = ld.data.trajectories;
  trs.resize(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    trs[i].grid = grid;
    trs[i].seed = std::stoull(seeds.at(i), nullptr, 16);
    read_f32(in, trs[i].rasters, (lengths[i] + 1) * g2);
  }
  for (std::size_t i = 0; i < lengths.size(); ++i) read_f32(in, trs[i].proprio, (lengths[i] + 1) * kProprioDim);
  for (std::size_t i = 0; i < lengths.size(); ++i) read_f32(in, trs[i].actions, lengths[i] * kActionDim);

  ld.split.train = m.at("split").at("train").get<std::vector<std::size_t>>();
  ld.split.val = m.at("split").at("val").get<std::vector<std::size_t>>();
  ld.stats = norm_stats_from_json(m.at("norm_stats"));
  return ld;
}

}  // namespace wmplan
