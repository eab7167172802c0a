#pragma once

// SO(3) primitives shared by the dynamics, learning, and scaling modules.
// Rotations are plain 3x3 matrices mapping body-frame vectors to the world
// frame. Tangent perturbations are applied on the right: R * exp(hat(d)).

#include <stdexcept>

#include <Eigen/Dense>

namespace agile {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

namespace geometry {

inline constexpr double kSkewTolerance = 1e-8;
inline constexpr double kSmallAngle = 1e-6;
// log_so3 switches to eigen-axis extraction above pi - kCutLocusMargin.
inline constexpr double kCutLocusMargin = 1e-6;
inline constexpr double kOrthonormalTolerance = 1e-9;

}  // namespace geometry

class NonSkewInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

Mat3 hat(const Vec3& w);

// Throws NonSkewInput when |S + S^T| exceeds geometry::kSkewTolerance.
Vec3 vee(const Mat3& s);

Mat3 exp_so3(const Vec3& w);
Vec3 log_so3(const Mat3& r);

// |Log(R1^T R2)|^2, in rad^2.
double geodesic_sq(const Mat3& r1, const Mat3& r2);

// Tangent-space gradients of geodesic_sq with respect to right perturbations
// of each argument.
struct GeodesicGrad {
  double value;
  Vec3 d_first;
  Vec3 d_second;
};
GeodesicGrad geodesic_sq_grad(const Mat3& r1, const Mat3& r2);

// Right Jacobian: exp(w + dw) ~= exp(w) * exp(hat(J_r(w) dw)).
Mat3 right_jacobian(const Vec3& w);

// Pulls a Euclidean cotangent G (dL/dR entries) back to the right-perturbation
// tangent at R, i.e. returns g with dL = g . d for R -> R exp(hat(d)).
Vec3 tangent_cotangent(const Mat3& r, const Mat3& g);

// Column-stacked 9-vector of R and its derivative with respect to a right
// perturbation (9x3).
Eigen::Matrix<double, 9, 1> vec(const Mat3& r);
Eigen::Matrix<double, 9, 3> dvec_dtangent(const Mat3& r);

bool is_rotation(const Mat3& r, double tol = geometry::kOrthonormalTolerance);

Mat3 rot_x(double angle);
Mat3 rot_y(double angle);
Mat3 rot_z(double angle);

}  // namespace agile
