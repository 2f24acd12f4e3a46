#include "wmplan/env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace wmplan {

namespace {

// Axis-aligned solid box; its open interior is what the agent may not enter.
struct Box {
  Vec2 lo;
  Vec2 hi;
};

std::array<Box, 2> wall_boxes(const EnvConfig& env) {
  const double L = env.arena_half_extent;
  const double x0 = env.wall_x - env.wall_half_thickness;
  const double x1 = env.wall_x + env.wall_half_thickness;
  const double d0 = env.door_center_y - env.door_half_width;
  const double d1 = env.door_center_y + env.door_half_width;
  return {Box{Vec2(x0, -L), Vec2(x1, d0)}, Box{Vec2(x0, d1), Vec2(x1, L)}};
}

struct Hit {
  double t = 0.0;
  int axis = -1;
  double face = 0.0;
};

// Earliest entry of the segment p -> q into the open interior of `box`.
std::optional<Hit> sweep(const Vec2& p, const Vec2& q, const Box& box) {
  const Vec2 d = q - p;
  double t_enter = -std::numeric_limits<double>::infinity();
  double t_exit = std::numeric_limits<double>::infinity();
  int axis = -1;
  double face = 0.0;
  for (int a = 0; a < 2; ++a) {
    if (d[a] == 0.0) {
      if (p[a] <= box.lo[a] || p[a] >= box.hi[a]) return std::nullopt;
      continue;
    }
    double t1 = (box.lo[a] - p[a]) / d[a];
    double t2 = (box.hi[a] - p[a]) / d[a];
    double f1 = box.lo[a];
    if (t1 > t2) {
      std::swap(t1, t2);
      f1 = box.hi[a];
    }
    if (t1 > t_enter) {
      t_enter = t1;
      axis = a;
      face = f1;
    }
    t_exit = std::min(t_exit, t2);
  }
  if (axis < 0) return std::nullopt;  // cannot happen for a moving point outside the box
  if (!(t_enter < t_exit) || t_enter >= 1.0 || t_exit <= 0.0) return std::nullopt;
  return Hit{std::max(t_enter, 0.0), axis, face};
}

// Moves p toward q, stopping at wall faces and sliding along them.
void move_with_walls(Vec2& pos, Vec2& vel, Vec2 target, const EnvConfig& env) {
  const auto boxes = wall_boxes(env);
  // A start inside a box (e.g. a state rounded to float on a face) is pushed to the nearest face.
  for (const auto& box : boxes) {
    if (!(pos.x() > box.lo.x() && pos.x() < box.hi.x() && pos.y() > box.lo.y() && pos.y() < box.hi.y())) continue;
    int axis = 0;
    double face = box.lo.x(), gap = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 2; ++a) {
      for (double f : {box.lo[a], box.hi[a]}) {
        if (std::abs(pos[a] - f) < gap) gap = std::abs(pos[a] - f), axis = a, face = f;
      }
    }
    pos[axis] = face;
  }
  for (int iter = 0; iter < 4; ++iter) {
    std::optional<Hit> best;
    for (const auto& box : boxes) {
      auto h = sweep(pos, target, box);
      if (h && (!best || h->t < best->t)) best = h;
    }
    if (!best) {
      pos = target;
      return;
    }
    Vec2 contact = pos + best->t * (target - pos);
    contact[best->axis] = best->face;
    target[best->axis] = best->face;
    vel[best->axis] = 0.0;
    pos = contact;
  }
  // Degenerate corner sequences: stay at the last contact point.
}

float coverage(double dist, double radius, double pixel) {
  const double c = (radius - dist) / pixel + 0.5;
  return static_cast<float>(std::clamp(c, 0.0, 1.0));
}

}  // namespace

std::string to_string(EnvKind kind) {
  return kind == EnvKind::wall ? "wall" : "pointmass";
}

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "wall") return EnvKind::wall;
  if (s == "pointmass") return EnvKind::pointmass;
  throw std::invalid_argument("unknown env kind '" + s + "'");
}

void EnvConfig::validate() const {
  auto fail = [](const char* what) { throw std::invalid_argument(std::string("env.") + what); };
  if (!(arena_half_extent > 0)) fail("arena_half_extent must be > 0");
  if (!(door_half_width > 0)) fail("door_half_width must be > 0");
  if (!(success_radius > 0)) fail("success_radius must be > 0");
  if (!(dt > 0)) fail("dt must be > 0");
  if (!(damping >= 0 && damping < 1)) fail("damping must be in [0, 1)");
  if (!(mass > 0)) fail("mass must be > 0");
  if (!(max_force > 0)) fail("max_force must be > 0");
  if (!(std::abs(wall_x) < arena_half_extent)) fail("wall_x must satisfy |wall_x| < arena_half_extent");
  if (!(wall_half_thickness >= 0)) fail("wall_half_thickness must be >= 0");
  if (grid < 2) fail("grid must be >= 2");
  if (!(agent_radius > 0)) fail("agent_radius must be > 0");
  if (!(goal_max_distance > 2 * success_radius)) fail("goal_max_distance must exceed 2*success_radius");
}

Action clip_action(const Action& a, const EnvConfig& env) {
  Action out;
  for (int i = 0; i < 2; ++i) out.force[i] = std::clamp(a.force[i], -env.max_force, env.max_force);
  return out;
}

EnvState step(const EnvState& state, const Action& action, const EnvConfig& env) {
  const Action a = clip_action(action, env);
  EnvState next = state;
  next.vel = env.damping * state.vel + (env.dt / env.mass) * a.force;
  Vec2 target = state.pos + env.dt * next.vel;
  if (env.kind == EnvKind::wall) {
    move_with_walls(next.pos, next.vel, target, env);
  } else {
    next.pos = target;
  }
  const double L = env.arena_half_extent;
  for (int i = 0; i < 2; ++i) {
    if (next.pos[i] < -L || next.pos[i] > L) {
      next.pos[i] = std::clamp(next.pos[i], -L, L);
      next.vel[i] = 0.0;
    }
  }
  return next;
}

EnvState frameskip_step(const EnvState& state, const Action& action, int f, const EnvConfig& env) {
  if (f < 1) throw std::invalid_argument("frameskip_step: f must be >= 1");
  EnvState s = state;
  for (int i = 0; i < f; ++i) s = step(s, action, env);
  return s;
}

bool inside_wall(const Vec2& p, const EnvConfig& env) {
  if (env.kind != EnvKind::wall) return false;
  for (const auto& b : wall_boxes(env)) {
    if (p.x() > b.lo.x() && p.x() < b.hi.x() && p.y() > b.lo.y() && p.y() < b.hi.y()) return true;
  }
  return false;
}

bool is_free(const Vec2& p, const EnvConfig& env) {
  const double L = env.arena_half_extent;
  if (std::abs(p.x()) > L || std::abs(p.y()) > L) return false;
  return !inside_wall(p, env);
}

int room_of(const Vec2& p, const EnvConfig& env) {
  if (env.kind != EnvKind::wall) return 0;
  return p.x() < env.wall_x ? -1 : 1;
}

Vec2 door_center(const EnvConfig& env) { return Vec2(env.wall_x, env.door_center_y); }

double path_distance(const Vec2& a, const Vec2& b, const EnvConfig& env) {
  if (env.kind != EnvKind::wall) return (a - b).norm();
  for (const auto& box : wall_boxes(env)) {
    if (sweep(a, b, box)) {
      const Vec2 door = door_center(env);
      return (a - door).norm() + (door - b).norm();
    }
  }
  return (a - b).norm();
}

bool is_success(const EnvState& state, const EnvConfig& env) {
  return (state.pos - state.goal_pos).norm() <= env.success_radius;
}

Episode sample_episode(std::uint64_t seed, const EnvConfig& env) {
  Rng rng = Rng::stream(seed, {0x45504953ULL});
  const double L = env.arena_half_extent;
  auto draw_free = [&]() {
    for (;;) {
      Vec2 p(rng.uniform(-L, L), rng.uniform(-L, L));
      if (!is_free(p, env)) continue;
      // Points inside the door corridor are free but sit in neither room.
      if (env.kind == EnvKind::wall && std::abs(p.x() - env.wall_x) <= env.wall_half_thickness) continue;
      return p;
    }
  };
  Episode ep;
  for (;;) {
    const Vec2 start = draw_free();
    const Vec2 goal = draw_free();
    const double d = path_distance(start, goal, env);
    if (d <= 2 * env.success_radius || d > env.goal_max_distance) continue;
    ep.init.pos = start;
    ep.init.vel = Vec2::Zero();
    ep.init.goal_pos = goal;
    break;
  }
  EnvState goal_state;
  goal_state.pos = ep.init.goal_pos;
  goal_state.goal_pos = ep.init.goal_pos;
  ep.goal_obs = render(goal_state, env);
  return ep;
}

Observation render(const EnvState& state, const EnvConfig& env) {
  const int G = env.grid;
  const double L = env.arena_half_extent;
  const double pixel = 2.0 * L / G;
  Observation obs;
  obs.grid = G;
  obs.raster.assign(static_cast<std::size_t>(G) * G, 0.0f);
  const double wall_half = std::max(env.wall_half_thickness, 0.5 * pixel);
  constexpr float kWallIntensity = 0.5f;
  for (int r = 0; r < G; ++r) {
    const double y = L - (r + 0.5) * pixel;
    for (int c = 0; c < G; ++c) {
      const double x = -L + (c + 0.5) * pixel;
      float v = coverage(std::hypot(x - state.pos.x(), y - state.pos.y()), env.agent_radius, pixel);
      if (env.kind == EnvKind::wall && std::abs(x - env.wall_x) <= wall_half &&
          std::abs(y - env.door_center_y) >= env.door_half_width) {
        v = std::max(v, kWallIntensity);
      }
      obs.raster[static_cast<std::size_t>(r) * G + c] = v;
    }
  }
  if (env.proprio) obs.proprio = Eigen::Vector4d(state.pos.x(), state.pos.y(), state.vel.x(), state.vel.y());
  return obs;
}

}  // namespace wmplan
