#pragma once

// Piecewise-polynomial reference trajectories with a global time-dilation
// factor alpha. Path time s advances as tau / alpha, so larger alpha means a
// slower execution of the same geometric path.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "agile/dynamics.hpp"
#include "agile/geometry.hpp"
#include "json.hpp"

namespace agile {

class OutOfDomain : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class SingularSystem : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PolySegment {
  // Column k multiplies t^k, t in [0, duration] local path time.
  Eigen::Matrix<double, 3, Eigen::Dynamic> coeffs;
  double duration = 1.0;

  int order() const { return static_cast<int>(coeffs.cols()); }
  // d-th derivative with respect to local path time.
  Vec3 derivative(double t, int d) const;
};

struct RefTrajectory {
  std::vector<PolySegment> segments;
  double alpha = 1.0;
  bool cyclic = false;

  double path_duration() const;
  // Execution time of the whole path at the current alpha.
  double period() const { return path_duration() * alpha; }
};

struct RefState {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Vec3 a = Vec3::Zero();
  Vec3 jerk = Vec3::Zero();
  Mat3 R = Mat3::Identity();
  Vec3 omega = Vec3::Zero();

  // Derivatives with respect to alpha; dR is a right-perturbation tangent.
  Vec3 dp = Vec3::Zero();
  Vec3 dv = Vec3::Zero();
  Vec3 da = Vec3::Zero();
  Vec3 dR = Vec3::Zero();
  Vec3 domega = Vec3::Zero();

  State state() const { return {p, v, R}; }
  // (dp, dv, dR) in StateTangent layout.
  StateTangent dstate() const;
};

// Thrust-axis norms below this fall back to the world z axis.
inline constexpr double kFlatnessMinThrust = 0.1;

// Path time s = tau / alpha.
RefState eval(const RefTrajectory& traj, double tau);
// Path time s = s0 + tau / alpha; alpha-derivatives hold s0 fixed.
RefState eval_from(const RefTrajectory& traj, double s0, double tau);

enum class Boundary { kRest, kCyclic };

// Minimum-snap (degree 7) spline through the points. For kCyclic the last
// segment returns to points.front() and seg_durations has one entry per
// point; for kRest it has points.size() - 1 entries.
RefTrajectory fit_waypoints(const std::vector<Vec3>& points, const std::vector<double>& seg_durations,
                            Boundary boundary);

// "line", "fig8", "inspect"
RefTrajectory preset(const std::string& name);
std::vector<std::string> preset_names();

nlohmann::json to_json(const RefTrajectory& traj);
RefTrajectory trajectory_from_json(const nlohmann::json& j);

}  // namespace agile
