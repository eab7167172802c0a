#include "agile/reference.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Dense>
#include <unsupported/Eigen/AutoDiff>

namespace agile {

namespace {

constexpr int kSnapOrder = 8;  // degree 7
constexpr double kDomainSlack = 1e-9;

// k! / (k - d)!
double falling(int k, int d) {
  double f = 1.0;
  for (int i = 0; i < d; ++i) f *= k - i;
  return f;
}

// Row of the d-th derivative basis at t.
Eigen::RowVectorXd basis_row(int n, double t, int d) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(n);
  for (int k = d; k < n; ++k) row(k) = falling(k, d) * std::pow(t, k - d);
  return row;
}

using Dual = Eigen::AutoDiffScalar<Eigen::Matrix<double, 1, 1>>;
using DVec3 = Eigen::Matrix<Dual, 3, 1>;

struct FlatOutput {
  Mat3 R;
  Mat3 R_dot;
  Vec3 omega;
  Vec3 omega_dot;
};

// Zero-yaw flatness map with derivatives along the direction (a_dot, j_dot).
FlatOutput flatness(const Vec3& a, const Vec3& j, const Vec3& a_dot, const Vec3& j_dot, double g) {
  DVec3 f, jd;
  for (int i = 0; i < 3; ++i) {
    f(i) = Dual(a(i) + (i == 2 ? g : 0.0), Eigen::Matrix<double, 1, 1>(a_dot(i)));
    jd(i) = Dual(j(i), Eigen::Matrix<double, 1, 1>(j_dot(i)));
  }
  const Dual thrust = f.norm();
  DVec3 z;
  if (thrust.value() < kFlatnessMinThrust) {
    z << Dual(0.0), Dual(0.0), Dual(1.0);
  } else {
    z = f / thrust;
  }
  const DVec3 xc(Dual(1.0), Dual(0.0), Dual(0.0));
  DVec3 y = z.cross(xc);
  const Dual yn = y.norm();
  y /= yn;
  const DVec3 x = y.cross(z);

  FlatOutput out;
  for (int r = 0; r < 3; ++r) {
    out.R(r, 0) = x(r).value();
    out.R(r, 1) = y(r).value();
    out.R(r, 2) = z(r).value();
    out.R_dot(r, 0) = x(r).derivatives()(0);
    out.R_dot(r, 1) = y(r).derivatives()(0);
    out.R_dot(r, 2) = z(r).derivatives()(0);
  }
  out.omega.setZero();
  out.omega_dot.setZero();
  if (thrust.value() >= kFlatnessMinThrust) {
    const DVec3 h = (jd - z.dot(jd) * z) / thrust;
    const Dual p = -h.dot(y);
    const Dual q = h.dot(x);
    // Fixed heading still needs a body z rate to keep y orthogonal to world x.
    const Dual r = -x.dot(h.cross(xc)) / yn;
    out.omega << p.value(), q.value(), r.value();
    out.omega_dot << p.derivatives()(0), q.derivatives()(0), r.derivatives()(0);
  }
  return out;
}

// Segment index and local time for path time s.
std::pair<std::size_t, double> locate(const RefTrajectory& traj, double s) {
  if (traj.segments.empty()) throw OutOfDomain("empty trajectory");
  const double total = traj.path_duration();
  if (s < -kDomainSlack) throw OutOfDomain("negative path time");
  s = std::max(s, 0.0);
  if (traj.cyclic) {
    s = std::fmod(s, total);
  } else if (s > total + kDomainSlack) {
    throw OutOfDomain("path time " + std::to_string(s) + " beyond horizon " + std::to_string(total));
  }
  for (std::size_t i = 0; i < traj.segments.size(); ++i) {
    const double d = traj.segments[i].duration;
    if (s <= d || i + 1 == traj.segments.size()) return {i, std::min(s, d)};
    s -= d;
  }
  return {traj.segments.size() - 1, traj.segments.back().duration};
}

}  // namespace

Vec3 PolySegment::derivative(double t, int d) const {
  Vec3 out = Vec3::Zero();
  for (int k = order() - 1; k >= d; --k) out = out * t + falling(k, d) * coeffs.col(k);
  return out;
}

double RefTrajectory::path_duration() const {
  double total = 0.0;
  for (const auto& s : segments) total += s.duration;
  return total;
}

StateTangent RefState::dstate() const {
  StateTangent d;
  d << dp, dv, dR;
  return d;
}

RefState eval(const RefTrajectory& traj, double tau) {
  if (tau < 0.0) throw OutOfDomain("negative time");
  return eval_from(traj, 0.0, tau);
}

RefState eval_from(const RefTrajectory& traj, double s0, double tau) {
  const double alpha = traj.alpha;
  if (!(alpha > 0.0)) throw OutOfDomain("alpha must be positive");
  const double s = s0 + tau / alpha;
  const auto [idx, t] = locate(traj, s);
  const PolySegment& seg = traj.segments[idx];

  // Path-time derivatives.
  const Vec3 d1 = seg.derivative(t, 1);
  const Vec3 d2 = seg.derivative(t, 2);
  const Vec3 d3 = seg.derivative(t, 3);
  const Vec3 d4 = seg.derivative(t, 4);
  const double ia = 1.0 / alpha;

  RefState r;
  r.p = seg.derivative(t, 0);
  r.v = d1 * ia;
  r.a = d2 * ia * ia;
  r.jerk = d3 * ia * ia * ia;
  const Vec3 snap = d4 * ia * ia * ia * ia;

  // d/dalpha of X^(k)(s) / alpha^k with ds/dalpha = -tau / alpha^2.
  const double rho = tau * ia;
  r.dp = -rho * r.v;
  r.dv = -rho * r.a - r.v * ia;
  r.da = -rho * r.jerk - 2.0 * r.a * ia;
  const Vec3 dj = -rho * snap - 3.0 * r.jerk * ia;

  const FlatOutput flat = flatness(r.a, r.jerk, r.da, dj, kGravity);
  r.R = flat.R;
  r.omega = flat.omega;
  r.domega = flat.omega_dot;
  const Mat3 m = r.R.transpose() * flat.R_dot;
  r.dR = 0.5 * Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
  return r;
}

RefTrajectory fit_waypoints(const std::vector<Vec3>& points, const std::vector<double>& seg_durations,
                            Boundary boundary) {
  if (points.size() < 2) throw std::invalid_argument("fit_waypoints needs at least two points");
  const bool cyclic = boundary == Boundary::kCyclic;
  const std::size_t m = cyclic ? points.size() : points.size() - 1;
  if (seg_durations.size() != m) throw std::invalid_argument("fit_waypoints: wrong number of durations");
  for (double d : seg_durations)
    if (!(d > 0.0)) throw std::invalid_argument("fit_waypoints: durations must be positive");

  const int n = kSnapOrder;
  const int cols = static_cast<int>(m) * n;
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(cols, cols);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(cols, 3);
  int row = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const int c = static_cast<int>(i) * n;
    a.block(row, c, 1, n) = basis_row(n, 0.0, 0);
    rhs.row(row++) = points[i].transpose();
    a.block(row, c, 1, n) = basis_row(n, seg_durations[i], 0);
    rhs.row(row++) = points[(i + 1) % points.size()].transpose();
  }
  const std::size_t joints = cyclic ? m : m - 1;
  for (std::size_t i = 0; i < joints; ++i) {
    const int c0 = static_cast<int>(i) * n;
    const int c1 = static_cast<int>((i + 1) % m) * n;
    for (int d = 1; d < n - 1; ++d) {
      a.block(row, c0, 1, n) += basis_row(n, seg_durations[i], d);
      a.block(row, c1, 1, n) -= basis_row(n, 0.0, d);
      ++row;
    }
  }
  if (!cyclic) {
    const int last = static_cast<int>(m - 1) * n;
    for (int d = 1; d <= 3; ++d) {
      a.block(row++, 0, 1, n) = basis_row(n, 0.0, d);
      a.block(row++, last, 1, n) = basis_row(n, seg_durations.back(), d);
    }
  }

  Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
  if (lu.rank() < cols) throw SingularSystem("waypoint fit matrix is rank deficient");
  const Eigen::MatrixXd sol = lu.solve(rhs);

  RefTrajectory traj;
  traj.cyclic = cyclic;
  for (std::size_t i = 0; i < m; ++i) {
    PolySegment seg;
    seg.duration = seg_durations[i];
    seg.coeffs = sol.block(static_cast<int>(i) * n, 0, n, 3).transpose();
    traj.segments.push_back(std::move(seg));
  }
  return traj;
}

std::vector<std::string> preset_names() { return {"line", "fig8", "inspect"}; }

RefTrajectory preset(const std::string& name) {
  if (name == "line") {
    return fit_waypoints({Vec3(-4, 0, 1), Vec3(4, 0, 1)}, {4.0, 4.0}, Boundary::kCyclic);
  }
  if (name == "fig8") {
    std::vector<Vec3> pts;
    for (int k = 0; k < 8; ++k) {
      const double th = 2.0 * std::numbers::pi * k / 8.0;
      pts.emplace_back(2.5 * std::sin(th), 1.5 * std::sin(2.0 * th), 1.0);
    }
    return fit_waypoints(pts, std::vector<double>(8, 1.0), Boundary::kCyclic);
  }
  if (name == "inspect") {
    return fit_waypoints({Vec3(0, 0, 1), Vec3(4, 1, 1.5), Vec3(1, 4, 1)}, {4.0, 4.0, 4.0},
                         Boundary::kCyclic);
  }
  throw std::invalid_argument("unknown preset: " + name);
}

nlohmann::json to_json(const RefTrajectory& traj) {
  nlohmann::json segs = nlohmann::json::array();
  for (const auto& s : traj.segments) {
    std::vector<double> c;
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < s.order(); ++k) c.push_back(s.coeffs(r, k));
    segs.push_back({{"N", s.order()}, {"duration", s.duration}, {"coefficients", c}});
  }
  return {{"cyclic", traj.cyclic}, {"alpha", traj.alpha}, {"segments", segs}};
}

RefTrajectory trajectory_from_json(const nlohmann::json& j) {
  RefTrajectory traj;
  traj.cyclic = j.at("cyclic").get<bool>();
  traj.alpha = j.at("alpha").get<double>();
  for (const auto& s : j.at("segments")) {
    const int n = s.at("N").get<int>();
    const auto c = s.at("coefficients").get<std::vector<double>>();
    if (n < 4 || c.size() != static_cast<std::size_t>(3 * n))
      throw std::invalid_argument("trajectory segment has inconsistent coefficient count");
    PolySegment seg;
    seg.duration = s.at("duration").get<double>();
    if (!(seg.duration > 0.0)) throw std::invalid_argument("trajectory segment duration must be positive");
    seg.coeffs.resize(3, n);
    for (int r = 0; r < 3; ++r)
      for (int k = 0; k < n; ++k) seg.coeffs(r, k) = c[r * n + k];
    traj.segments.push_back(std::move(seg));
  }
  if (traj.segments.empty()) throw std::invalid_argument("trajectory has no segments");
  return traj;
}

}  // namespace agile
