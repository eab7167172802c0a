#pragma once

// Hybrid quadrotor dynamics: nominal collective-thrust/body-rate model plus a
// learned residual on acceleration and body rate, integrated with a
// Lie-group RK4 scheme.

#include <array>
#include <random>
#include <vector>

#include <Eigen/Core>

#include "agile/geometry.hpp"
#include "agile/net.hpp"

namespace agile {

inline constexpr double kGravity = 9.81;
inline constexpr double kDefaultDt = 0.02;

struct State {
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Mat3 R = Mat3::Identity();

  bool valid() const;
};

struct Command {
  double c = kGravity;  // mass-normalized collective thrust, m/s^2
  Vec3 omega = Vec3::Zero();

  Eigen::Vector4d to_vector() const { return {c, omega.x(), omega.y(), omega.z()}; }
  static Command from_vector(const Eigen::Vector4d& u) { return {u(0), u.tail<3>()}; }
};

struct CommandLimits {
  double c_min = 0.0;
  double c_max = 2.0 * kGravity;
  double omega_max = 6.0;

  bool admits(const Command& u) const;
};

// (dp, dv, dtheta) with R perturbed as R * exp(hat(dtheta)).
using StateTangent = Eigen::Matrix<double, 9, 1>;
using Feature = Eigen::Matrix<double, 19, 1>;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat94 = Eigen::Matrix<double, 9, 4>;

// [p, v, vec(R), c, omega]
Feature make_feature(const Vec3& p, const Vec3& v, const Mat3& r, const Command& u);

// x boxplus d
State retract(const State& x, const StateTangent& d);
// Tangent coordinates of b relative to a: a boxplus result = b.
StateTangent local_coordinates(const State& a, const State& b);

struct ResidualOutput {
  Vec3 accel = Vec3::Zero();
  Vec3 rate = Vec3::Zero();
};

struct HybridModel {
  double g = kGravity;
  // 19 -> 64 -> 64 -> 6, tanh throughout; the output is scaled by the gains.
  Mlp residual;
  bool nominal_only = false;
  // false masks the body-rate head (acceleration-only residual).
  bool rate_residual = true;
  double accel_gain = 5.0;
  double rate_gain = 2.0;
  // RK4 substeps per call to step().
  int substeps = 1;

  // Zero output layer so the model starts exactly nominal.
  static HybridModel make(std::mt19937_64& rng, int hidden = 64);
  static HybridModel nominal();

  bool residual_active() const { return !nominal_only && residual.num_layers() > 0; }

  static const Feature& feature_scale();
};

ResidualOutput eval_residual(const HybridModel& model, const Feature& zeta,
                             ActivationRecord* record = nullptr);

struct Derivative {
  Vec3 p_dot;
  Vec3 v_dot;
  Vec3 omega_eff;
};

Derivative derivative(const HybridModel& model, const State& x, const Command& u);

struct StageRecord {
  Vec3 p, v;
  Mat3 R;
  Vec3 psi;  // R_stage = R_start * exp(psi)
  Feature zeta;
  ActivationRecord net;
};

struct SubstepRecord {
  State start;
  double h = 0.0;
  std::array<StageRecord, 4> stages;
  Vec3 phi;  // R_end = R_start * exp(phi)
};

struct StepRecord {
  Command u;
  std::vector<SubstepRecord> substeps;
};

State step(const HybridModel& model, const State& x, const Command& u, double dt,
           StepRecord* record = nullptr);

struct StepVjp {
  StateTangent dx = StateTangent::Zero();
  Eigen::Vector4d du = Eigen::Vector4d::Zero();
};

// Reverse-mode product through one step. Residual parameter gradients are
// accumulated into dtheta when it is non-null.
StepVjp step_vjp(const HybridModel& model, const StepRecord& record, const StateTangent& cotangent,
                 ParamGradient* dtheta = nullptr);

struct Jacobians {
  Mat9 A;
  Mat94 B;
};

// Assembled row by row from step_vjp with unit cotangents.
Jacobians jacobians(const HybridModel& model, const State& x, const Command& u, double dt);

// Shared Lie-group RK4 core. rates(P, V, R_stage, stage_index) returns the
// velocity derivative and effective body rate at a stage.
template <class Rates>
State lie_rk4(const State& x, double h, Rates&& rates, std::array<StageRecord, 4>* stages = nullptr,
              Vec3* phi_out = nullptr) {
  static constexpr double kA[4] = {0.0, 0.5, 0.5, 1.0};
  static constexpr double kB[4] = {1.0, 2.0, 2.0, 1.0};
  Vec3 kp[4], kv[4], kw[4];
  for (int i = 0; i < 4; ++i) {
    Vec3 p = x.p, v = x.v, psi = Vec3::Zero();
    Mat3 r = x.R;
    if (i > 0) {
      p = x.p + kA[i] * h * kp[i - 1];
      v = x.v + kA[i] * h * kv[i - 1];
      psi = kA[i] * h * kw[i - 1];
      r = x.R * exp_so3(psi);
    }
    auto [v_dot, w] = rates(p, v, r, i);
    kp[i] = v;
    kv[i] = v_dot;
    kw[i] = w;
    if (stages) {
      auto& s = (*stages)[i];
      s.p = p;
      s.v = v;
      s.R = r;
      s.psi = psi;
    }
  }
  Vec3 dp = Vec3::Zero(), dv = Vec3::Zero(), phi = Vec3::Zero();
  for (int i = 0; i < 4; ++i) {
    dp += kB[i] * kp[i];
    dv += kB[i] * kv[i];
    phi += kB[i] * kw[i];
  }
  State out;
  out.p = x.p + (h / 6.0) * dp;
  out.v = x.v + (h / 6.0) * dv;
  phi *= h / 6.0;
  out.R = x.R * exp_so3(phi);
  if (phi_out) *phi_out = phi;
  return out;
}

}  // namespace agile
