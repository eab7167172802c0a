#include "agile/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace agile {

Mat3 hat(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return s;
}

Vec3 vee(const Mat3& s) {
  if ((s + s.transpose()).cwiseAbs().maxCoeff() > geometry::kSkewTolerance) {
    throw NonSkewInput("vee: input matrix is not skew-symmetric");
  }
  return Vec3(s(2, 1), s(0, 2), s(1, 0));
}

Mat3 exp_so3(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 k = hat(w);
  if (theta < geometry::kSmallAngle) {
    return Mat3::Identity() + k + 0.5 * k * k;
  }
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / theta2;
  return Mat3::Identity() + a * k + b * k * k;
}

namespace {

// Axis extraction near the cut locus, where sin(theta) carries no usable
// information about the axis.
Vec3 log_near_pi(const Mat3& r, double theta) {
  const double c = std::cos(theta);
  const Mat3 sym = 0.5 * (r + r.transpose());
  // sym = c I + (1 - c) a a^T
  const Mat3 aat = (sym - c * Mat3::Identity()) / (1.0 - c);
  Eigen::Index j = 0;
  aat.diagonal().maxCoeff(&j);
  Vec3 axis = aat.col(j) / std::sqrt(std::max(aat(j, j), 0.0));
  axis.normalize();

  const Vec3 skew_part(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double s = axis.dot(skew_part);
  if (std::abs(s) > 1e-12) {
    if (s < 0.0) axis = -axis;
  } else {
    Eigen::Index big = 0;
    axis.cwiseAbs().maxCoeff(&big);
    if (axis(big) < 0.0) axis = -axis;
  }
  return theta * axis;
}

}  // namespace

Vec3 log_so3(const Mat3& r) {
  const Vec3 skew_part(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  const double sin_theta = 0.5 * skew_part.norm();
  const double cos_theta = 0.5 * (r.trace() - 1.0);
  const double theta = std::atan2(sin_theta, cos_theta);

  if (theta >= std::numbers::pi - geometry::kCutLocusMargin) {
    return log_near_pi(r, theta);
  }
  if (theta < geometry::kSmallAngle) {
    // theta / sin(theta) ~= 1 + theta^2 / 6
    return 0.5 * (1.0 + theta * theta / 6.0) * skew_part;
  }
  return 0.5 * theta / sin_theta * skew_part;
}

double geodesic_sq(const Mat3& r1, const Mat3& r2) {
  return log_so3(r1.transpose() * r2).squaredNorm();
}

GeodesicGrad geodesic_sq_grad(const Mat3& r1, const Mat3& r2) {
  const Vec3 phi = log_so3(r1.transpose() * r2);
  // J_r(phi) phi = phi, so the inverse-Jacobian factors drop out.
  return {phi.squaredNorm(), -2.0 * phi, 2.0 * phi};
}

Mat3 right_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  const Mat3 k = hat(w);
  if (theta < 1e-4) {
    return Mat3::Identity() - 0.5 * k + (1.0 / 6.0) * k * k;
  }
  const double a = (1.0 - std::cos(theta)) / theta2;
  const double b = (theta - std::sin(theta)) / (theta2 * theta);
  return Mat3::Identity() - a * k + b * k * k;
}

Vec3 tangent_cotangent(const Mat3& r, const Mat3& g) {
  const Mat3 m = r.transpose() * g;
  return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1));
}

Eigen::Matrix<double, 9, 1> vec(const Mat3& r) {
  Eigen::Matrix<double, 9, 1> out;
  out << r.col(0), r.col(1), r.col(2);
  return out;
}

Eigen::Matrix<double, 9, 3> dvec_dtangent(const Mat3& r) {
  Eigen::Matrix<double, 9, 3> d;
  for (int j = 0; j < 3; ++j) {
    d.block<3, 3>(3 * j, 0) = -r * hat(Vec3::Unit(j));
  }
  return d;
}

bool is_rotation(const Mat3& r, double tol) {
  if (!r.allFinite()) return false;
  return (r.transpose() * r - Mat3::Identity()).norm() <= tol &&
         std::abs(r.determinant() - 1.0) <= tol;
}

Mat3 rot_x(double angle) { return exp_so3(angle * Vec3::UnitX()); }
Mat3 rot_y(double angle) { return exp_so3(angle * Vec3::UnitY()); }
Mat3 rot_z(double angle) { return exp_so3(angle * Vec3::UnitZ()); }

}  // namespace agile
