#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wmplan/common.hpp"

namespace wmplan {

enum class EnvKind { wall, pointmass };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& s);

/**
 * @brief Geometry and dynamics of the two 2D navigation tasks.
 *
 * The arena is the square [-L, L]^2. In the wall task a vertical wall of
 * half-thickness `wall_half_thickness` sits at `wall_x`, with an opening of
 * half-width `door_half_width` centered on `door_center_y`. The point-mass
 * task uses the same integrator without the interior wall.
 */
struct EnvConfig {
  EnvKind kind = EnvKind::wall;
  double arena_half_extent = 1.0;
  double wall_x = 0.0;
  double wall_half_thickness = 0.02;
  double door_center_y = 0.0;
  double door_half_width = 0.12;
  double dt = 0.1;
  double damping = 0.95;
  double mass = 1.0;
  double max_force = 1.0;
  double success_radius = 0.1;
  int grid = 28;
  /// Radius of the rendered agent disc. Rendering only; the body is a point.
  double agent_radius = 0.3;
  /// Episode sampler rejects goals farther than this (path length around the wall).
  double goal_max_distance = 1.2;
  /// Observations carry the (pos, vel) vector.
  bool proprio = true;

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

struct EnvState {
  Vec2 pos = Vec2::Zero();
  Vec2 vel = Vec2::Zero();
  Vec2 goal_pos = Vec2::Zero();
};

struct Action {
  Vec2 force = Vec2::Zero();
};

struct Observation {
  int grid = 0;
  std::vector<float> raster;          // grid*grid, row-major, row 0 at the top
  std::optional<Eigen::Vector4d> proprio;  // (x, y, vx, vy)
};

struct Episode {
  EnvState init;
  Observation goal_obs;
};

Action clip_action(const Action& a, const EnvConfig& env);

EnvState step(const EnvState& state, const Action& action, const EnvConfig& env);

/// `f` applications of `step` with the same action. f == 0 is rejected.
EnvState frameskip_step(const EnvState& state, const Action& action, int f, const EnvConfig& env);

/// Collision-free start (zero velocity) and goal, rendered as the goal frame.
Episode sample_episode(std::uint64_t seed, const EnvConfig& env);

bool is_success(const EnvState& state, const EnvConfig& env);

Observation render(const EnvState& state, const EnvConfig& env);

/// True when `p` lies strictly inside a solid part of the wall.
bool inside_wall(const Vec2& p, const EnvConfig& env);

/// True when `p` is within the arena and not inside the wall.
bool is_free(const Vec2& p, const EnvConfig& env);

/// Which side of the wall a point is on (-1 left, +1 right, 0 for the point-mass task).
int room_of(const Vec2& p, const EnvConfig& env);

/// Shortest obstacle-avoiding path length, routed through the door center when needed.
double path_distance(const Vec2& a, const Vec2& b, const EnvConfig& env);

Vec2 door_center(const EnvConfig& env);

}  // namespace wmplan
