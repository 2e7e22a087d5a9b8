#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sfqn/params.hpp"
#include "sfqn/tensor.hpp"

namespace sfqn::highway {

enum class Action : int { left = 0, idle = 1, right = 2, faster = 3, slower = 4 };
inline constexpr int kActionCount = 5;

inline const char* to_string(Action a) {
  static constexpr const char* names[] = {"LEFT", "IDLE", "RIGHT", "FASTER", "SLOWER"};
  return names[static_cast<int>(a)];
}

struct HighwayConfig {
  int lanes = 4;
  Real lane_width = 4.0;
  int vehicles = 6;
  int horizon = 80;
  Real dt = 0.25;           // seconds simulated per decision
  Real speed_delta = 2.0;   // FASTER/SLOWER step
  Real v_min = 10.0;
  Real v_max = 30.0;
  Real ego_speed = 20.0;
  int ego_lane = -1;        // -1: drawn from the seed
  Real traffic_speed_min = 16.0;
  Real traffic_speed_max = 24.0;
  Real vehicle_length = 5.0;
  Real vehicle_width = 2.0;
  int lane_change_steps = 2;
  Real reward_speed = 0.4;
  Real reward_crash = 1.0;
  Real spawn_behind = 12.0;
  Real spawn_ahead = 44.0;
  Real spawn_gap = 10.0;    // minimum same-lane centre distance at reset

  // ego-centred raster: rows run along the road (row 0 is farthest ahead)
  std::size_t grid_height = 32;
  std::size_t grid_width = 32;
  Real res_long = 2.0;      // metres per row
  Real res_lat = 1.0;       // metres per column
  std::size_t anchor_row = 24;
  std::size_t anchor_col = 16;

  int lidar_sectors = 32;
  Real lidar_range = 60.0;
  Real v_rel_min = -20.0;
  Real v_rel_max = 20.0;

  void validate() const {
    if (lanes < 1 || vehicles < 0 || horizon < 1 || lane_change_steps < 1 || lidar_sectors < 1)
      throw ConfigError("highway: lanes, horizon, lane_change_steps, lidar_sectors must be positive");
    if (!(dt > 0) || !(v_min < v_max) || !(res_long > 0) || !(res_lat > 0) || !(v_rel_min < v_rel_max))
      throw ConfigError("highway: invalid physical parameters");
    if (anchor_row >= grid_height || anchor_col >= grid_width)
      throw ConfigError("highway: ego anchor outside the grid");
    if (ego_speed < v_min || ego_speed > v_max) throw ConfigError("highway: ego speed outside [v_min, v_max]");
  }
};

struct VehicleState {
  int lane = 0;
  Real x = 0;      // longitudinal position, metres
  Real speed = 0;  // m/s
};

struct EgoState {
  int lane = 0;
  Real x = 0;
  Real speed = 20;
  Real heading = 0;  // radians, positive toward higher lane indices
  Real y = 0;        // lateral position of the centre
  Real target_speed = 20;
  int target_lane = 0;
  int change_progress = 0;  // steps into the current lane change
};

struct Observation {
  DenseArray bev;         // [1, H, W]
  DenseArray lidar_grid;  // [1, H, W]
  Real speed_norm = 0;
  Real heading_norm = 0.5;
};

struct StepResult {
  Observation obs;
  Real reward = 0;
  bool terminal = false;
  bool crashed = false;
  Real speed = 0;
};

struct TrajectoryRow {
  int t;
  int ego_lane;
  Real ego_speed;
  int action;
  Real reward;
  bool crashed;
};

inline void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
  os << "t,ego_lane,ego_speed,action,reward,crashed\n";
  for (const auto& r : rows)
    os << r.t << ',' << r.ego_lane << ',' << r.ego_speed << ',' << to_string(static_cast<Action>(r.action))
       << ',' << r.reward << ',' << (r.crashed ? 1 : 0) << '\n';
}

/// Multi-lane highway with constant-speed traffic and an ego vehicle driven
/// by meta-actions. All randomness is drawn in reset(); step() is
/// deterministic.
class HighwayEnv {
 public:
  static constexpr Real kEgoIntensity = 1.0;
  static constexpr Real kVehicleIntensity = 0.6;
  static constexpr Real kMarkingIntensity = 0.3;

  explicit HighwayEnv(HighwayConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  const HighwayConfig& config() const { return cfg_; }
  const EgoState& ego() const { return ego_; }
  const std::vector<VehicleState>& others() const { return others_; }
  int time() const { return t_; }
  bool terminal() const { return terminal_; }
  const std::vector<TrajectoryRow>& trajectory() const { return trajectory_; }

  Real lane_center(int lane) const { return (lane + 0.5) * cfg_.lane_width; }

  Observation reset(std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> lane_d(0, cfg_.lanes - 1);
    EgoState e;
    e.lane = cfg_.ego_lane >= 0 ? std::min(cfg_.ego_lane, cfg_.lanes - 1) : lane_d(rng);
    e.speed = e.target_speed = cfg_.ego_speed;
    std::vector<VehicleState> vs;
    std::uniform_real_distribution<Real> x_d(-cfg_.spawn_behind, cfg_.spawn_ahead);
    std::uniform_real_distribution<Real> v_d(cfg_.traffic_speed_min, cfg_.traffic_speed_max);
    for (int k = 0; k < cfg_.vehicles; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 10000 && !placed; ++attempt) {
        VehicleState v{lane_d(rng), x_d(rng), v_d(rng)};
        bool ok = !(v.lane == e.lane && std::abs(v.x - e.x) < cfg_.spawn_gap);
        for (const auto& o : vs) ok = ok && !(o.lane == v.lane && std::abs(o.x - v.x) < cfg_.spawn_gap);
        if (ok) {
          vs.push_back(v);
          placed = true;
        }
      }
      if (!placed) throw ConfigError("highway: cannot place traffic; spawn window too small");
    }
    return reset_scenario(e, std::move(vs));
  }

  /// Starts an episode from an explicit world state.
  Observation reset_scenario(EgoState ego, std::vector<VehicleState> others) {
    if (ego.lane < 0 || ego.lane >= cfg_.lanes) throw ConfigError("highway: ego lane out of range");
    for (const auto& o : others)
      if (o.lane < 0 || o.lane >= cfg_.lanes) throw ConfigError("highway: vehicle lane out of range");
    ego.y = lane_center(ego.lane);
    ego.target_lane = ego.lane;
    ego.change_progress = 0;
    ego.heading = 0;
    ego.speed = std::clamp(ego.speed, cfg_.v_min, cfg_.v_max);
    ego.target_speed = ego.speed;
    ego_ = ego;
    ego_vy_ = 0;
    others_ = std::move(others);
    t_ = 0;
    terminal_ = false;
    trajectory_.clear();
    return observe();
  }

  StepResult step(Action action) {
    if (terminal_) throw UsageError("highway: step() called on a terminated episode");
    const int a = static_cast<int>(action);
    if (a < 0 || a >= kActionCount) throw UsageError("highway: invalid action");

    auto& e = ego_;
    const bool changing = e.target_lane != e.lane;
    switch (action) {
      case Action::faster: e.target_speed = std::min(e.target_speed + cfg_.speed_delta, cfg_.v_max); break;
      case Action::slower: e.target_speed = std::max(e.target_speed - cfg_.speed_delta, cfg_.v_min); break;
      case Action::left:
        if (!changing && e.lane > 0) e.target_lane = e.lane - 1;
        break;
      case Action::right:
        if (!changing && e.lane + 1 < cfg_.lanes) e.target_lane = e.lane + 1;
        break;
      case Action::idle: break;
    }

    e.speed = e.target_speed;
    e.x += e.speed * cfg_.dt;
    Real lateral_speed = 0;
    if (e.target_lane != e.lane) {
      const Real from = lane_center(e.lane), to = lane_center(e.target_lane);
      ++e.change_progress;
      const Real y_new = from + (to - from) * static_cast<Real>(e.change_progress) /
                                    static_cast<Real>(cfg_.lane_change_steps);
      lateral_speed = (y_new - e.y) / cfg_.dt;
      e.y = y_new;
      if (e.change_progress >= cfg_.lane_change_steps) {
        e.lane = e.target_lane;
        e.y = lane_center(e.lane);
        e.change_progress = 0;
      }
    }
    e.heading = std::atan2(lateral_speed, e.speed);
    ego_vy_ = lateral_speed;
    for (auto& o : others_) o.x += o.speed * cfg_.dt;

    const bool crashed = collides();
    ++t_;
    terminal_ = crashed || t_ >= cfg_.horizon;

    StepResult r;
    r.crashed = crashed;
    r.terminal = terminal_;
    r.speed = e.speed;
    r.reward = cfg_.reward_speed * (e.speed - cfg_.v_min) / (cfg_.v_max - cfg_.v_min) -
               (crashed ? cfg_.reward_crash : 0.0);
    r.obs = observe();
    trajectory_.push_back({t_, e.lane, e.speed, a, r.reward, crashed});
    return r;
  }

  /// Axis-aligned box overlap between ego and any other vehicle. Touching
  /// bumpers count; vehicles in adjacent lanes never overlap laterally.
  bool collides() const {
    for (const auto& o : others_)
      if (std::abs(o.x - ego_.x) <= cfg_.vehicle_length &&
          std::abs(lane_center(o.lane) - ego_.y) < cfg_.vehicle_width)
        return true;
    return false;
  }

  Observation observe() const {
    Observation o;
    o.bev = render_bev();
    o.lidar_grid = render_lidar_grid();
    o.speed_norm = (ego_.speed - cfg_.v_min) / (cfg_.v_max - cfg_.v_min);
    o.heading_norm = std::clamp(0.5 + ego_.heading / std::numbers::pi, Real{0}, Real{1});
    return o;
  }

  /// Grid cell of a point relative to the ego; false when outside the view.
  bool cell_of(Real dx, Real dy, std::size_t& row, std::size_t& col) const {
    const long r = static_cast<long>(cfg_.anchor_row) - static_cast<long>(std::floor(dx / cfg_.res_long + 0.5));
    const long c = static_cast<long>(cfg_.anchor_col) + static_cast<long>(std::floor(dy / cfg_.res_lat + 0.5));
    if (r < 0 || c < 0 || r >= static_cast<long>(cfg_.grid_height) || c >= static_cast<long>(cfg_.grid_width))
      return false;
    row = static_cast<std::size_t>(r);
    col = static_cast<std::size_t>(c);
    return true;
  }

  /// Ego-centred top view: lane markings 0.3, traffic 0.6, ego 1.0. Each
  /// vehicle is a 3x2 blob around its rounded centre cell.
  DenseArray render_bev() const {
    DenseArray g({1, cfg_.grid_height, cfg_.grid_width});
    const long H = static_cast<long>(cfg_.grid_height), W = static_cast<long>(cfg_.grid_width);
    for (int k = 0; k <= cfg_.lanes; ++k) {
      const long c = static_cast<long>(cfg_.anchor_col) +
                     static_cast<long>(std::floor((k * cfg_.lane_width - ego_.y) / cfg_.res_lat + 0.5));
      if (c < 0 || c >= W) continue;
      for (long r = 0; r < H; ++r) g(0, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = kMarkingIntensity;
    }
    auto blob = [&](Real dx, Real dy, Real value) {
      const long r0 = static_cast<long>(cfg_.anchor_row) - static_cast<long>(std::floor(dx / cfg_.res_long + 0.5));
      const long c0 = static_cast<long>(cfg_.anchor_col) + static_cast<long>(std::floor(dy / cfg_.res_lat + 0.5));
      for (long r = r0 - 1; r <= r0 + 1; ++r)
        for (long c = c0 - 1; c <= c0; ++c)
          if (r >= 0 && r < H && c >= 0 && c < W) g(0, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = value;
    };
    for (const auto& o : others_) blob(o.x - ego_.x, lane_center(o.lane) - ego_.y, kVehicleIntensity);
    blob(0, 0, kEgoIntensity);
    return g;
  }

  /// Angular-sector range sensor folded into the ego grid: the nearest
  /// vehicle per sector is marked at its cell with intensity encoding its
  /// radial velocity relative to the ego. Ego speed and heading occupy the
  /// anchor cell and the cell behind it.
  DenseArray render_lidar_grid() const {
    DenseArray g({1, cfg_.grid_height, cfg_.grid_width});
    const std::size_t S = static_cast<std::size_t>(cfg_.lidar_sectors);
    std::vector<int> nearest(S, -1);
    std::vector<Real> best(S, 0);
    for (std::size_t i = 0; i < others_.size(); ++i) {
      const Real dx = others_[i].x - ego_.x, dy = lane_center(others_[i].lane) - ego_.y;
      const Real d = std::hypot(dx, dy);
      if (d > cfg_.lidar_range || d == 0) continue;
      const std::size_t s = sector_of(dx, dy);
      if (nearest[s] < 0 || d < best[s]) {
        nearest[s] = static_cast<int>(i);
        best[s] = d;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      if (nearest[s] < 0) continue;
      const auto& o = others_[static_cast<std::size_t>(nearest[s])];
      const Real dx = o.x - ego_.x, dy = lane_center(o.lane) - ego_.y;
      const Real radial = ((o.speed - ego_.speed) * dx + (0.0 - ego_vy_) * dy) / best[s];
      std::size_t r, c;
      if (cell_of(dx, dy, r, c))
        g(0, r, c) = std::clamp((radial - cfg_.v_rel_min) / (cfg_.v_rel_max - cfg_.v_rel_min), Real{0}, Real{1});
    }
    g(0, cfg_.anchor_row, cfg_.anchor_col) = (ego_.speed - cfg_.v_min) / (cfg_.v_max - cfg_.v_min);
    if (cfg_.anchor_row + 1 < cfg_.grid_height)
      g(0, cfg_.anchor_row + 1, cfg_.anchor_col) =
          std::clamp(0.5 + ego_.heading / std::numbers::pi, Real{0}, Real{1});
    return g;
  }

  std::size_t sector_of(Real dx, Real dy) const {
    const Real bearing = std::atan2(dy, dx);  // 0 straight ahead
    const auto S = static_cast<Real>(cfg_.lidar_sectors);
    auto s = static_cast<long>(std::floor((bearing + std::numbers::pi) / (2 * std::numbers::pi) * S));
    return static_cast<std::size_t>(((s % cfg_.lidar_sectors) + cfg_.lidar_sectors) % cfg_.lidar_sectors);
  }

 private:
  HighwayConfig cfg_;
  EgoState ego_;
  std::vector<VehicleState> others_;
  Real ego_vy_ = 0;
  int t_ = 0;
  bool terminal_ = true;
  std::vector<TrajectoryRow> trajectory_;
};

}  // namespace sfqn::highway
