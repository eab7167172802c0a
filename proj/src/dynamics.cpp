#include "agile/dynamics.hpp"

#include <cmath>

namespace agile {

namespace {

const Vec3 kE3 = Vec3::UnitZ();

Eigen::Matrix<double, 6, 1> residual_output_scale(const HybridModel& model) {
  Eigen::Matrix<double, 6, 1> s;
  const double rate = model.rate_residual ? model.rate_gain : 0.0;
  s << Vec3::Constant(model.accel_gain), Vec3::Constant(rate);
  return s;
}

// Reverse pass through eval_residual. Returns d/d zeta.
Feature residual_vjp(const HybridModel& model, const ActivationRecord& record, const Vec3& g_accel,
                     const Vec3& g_rate, ParamGradient* dtheta) {
  Eigen::Matrix<double, 6, 1> g_out;
  g_out << g_accel, g_rate;
  g_out.array() *= residual_output_scale(model).array();
  const Eigen::MatrixXd g_in = model.residual.vjp(record, g_out, dtheta);
  return HybridModel::feature_scale().cwiseProduct(Feature(g_in.col(0)));
}

}  // namespace

bool State::valid() const {
  return p.allFinite() && v.allFinite() && is_rotation(R);
}

bool CommandLimits::admits(const Command& u) const {
  return std::isfinite(u.c) && u.omega.allFinite() && u.c >= c_min && u.c <= c_max &&
         u.omega.cwiseAbs().maxCoeff() <= omega_max;
}

Feature make_feature(const Vec3& p, const Vec3& v, const Mat3& r, const Command& u) {
  Feature z;
  z << p, v, vec(r), u.c, u.omega;
  return z;
}

State retract(const State& x, const StateTangent& d) {
  return {x.p + d.segment<3>(0), x.v + d.segment<3>(3), x.R * exp_so3(d.segment<3>(6))};
}

StateTangent local_coordinates(const State& a, const State& b) {
  StateTangent d;
  d << b.p - a.p, b.v - a.v, log_so3(a.R.transpose() * b.R);
  return d;
}

HybridModel HybridModel::make(std::mt19937_64& rng, int hidden) {
  HybridModel m;
  m.residual = Mlp::random({19, hidden, hidden, 6},
                           {Activation::kTanh, Activation::kTanh, Activation::kTanh}, rng, 0.0);
  return m;
}

HybridModel HybridModel::nominal() {
  HybridModel m;
  m.nominal_only = true;
  return m;
}

const Feature& HybridModel::feature_scale() {
  static const Feature scale = [] {
    Feature s;
    s << Vec3::Constant(1.0 / 5.0), Vec3::Constant(1.0 / 10.0), Eigen::Matrix<double, 9, 1>::Ones(),
        1.0 / (2.0 * kGravity), Vec3::Constant(1.0 / 6.0);
    return s;
  }();
  return scale;
}

ResidualOutput eval_residual(const HybridModel& model, const Feature& zeta, ActivationRecord* record) {
  if (!model.residual_active()) return {};
  const Eigen::MatrixXd y = model.residual.forward(HybridModel::feature_scale().cwiseProduct(zeta), record);
  Eigen::Matrix<double, 6, 1> out = y.col(0);
  out.array() *= residual_output_scale(model).array();
  return {out.head<3>(), out.tail<3>()};
}

Derivative derivative(const HybridModel& model, const State& x, const Command& u) {
  const ResidualOutput res = eval_residual(model, make_feature(x.p, x.v, x.R, u));
  return {x.v, u.c * (x.R * kE3) - model.g * kE3 + res.accel, u.omega + res.rate};
}

State step(const HybridModel& model, const State& x, const Command& u, double dt, StepRecord* record) {
  const int n = std::max(1, model.substeps);
  const double h = dt / n;
  if (record) {
    record->u = u;
    record->substeps.assign(n, SubstepRecord{});
  }
  State cur = x;
  for (int s = 0; s < n; ++s) {
    SubstepRecord* sub = record ? &record->substeps[s] : nullptr;
    auto rates = [&](const Vec3& p, const Vec3& v, const Mat3& r, int i) {
      const Feature zeta = make_feature(p, v, r, u);
      ActivationRecord* net_rec = sub ? &sub->stages[i].net : nullptr;
      const ResidualOutput res = eval_residual(model, zeta, net_rec);
      if (sub) sub->stages[i].zeta = zeta;
      return std::pair<Vec3, Vec3>{u.c * (r * kE3) - model.g * kE3 + res.accel, u.omega + res.rate};
    };
    if (sub) {
      sub->start = cur;
      sub->h = h;
      cur = lie_rk4(cur, h, rates, &sub->stages, &sub->phi);
    } else {
      cur = lie_rk4(cur, h, rates);
    }
  }
  return cur;
}

namespace {

struct SubstepVjp {
  Vec3 gp, gv, gth;
};

SubstepVjp substep_vjp(const HybridModel& model, const SubstepRecord& sub, double thrust, const Vec3& gp_out,
                       const Vec3& gv_out, const Vec3& gth_out, double& gc, Vec3& gw, ParamGradient* dtheta) {
  static constexpr double kA[4] = {0.0, 0.5, 0.5, 1.0};
  static constexpr double kB[4] = {1.0, 2.0, 2.0, 1.0};
  const double h = sub.h;
  const bool active = model.residual_active();

  Vec3 g_kp[4], g_kv[4], g_kw[4];
  const Vec3 g_phi = right_jacobian(sub.phi).transpose() * gth_out;
  for (int i = 0; i < 4; ++i) {
    g_kp[i] = (h / 6.0) * kB[i] * gp_out;
    g_kv[i] = (h / 6.0) * kB[i] * gv_out;
    g_kw[i] = (h / 6.0) * kB[i] * g_phi;
  }

  SubstepVjp in{gp_out, gv_out, exp_so3(sub.phi) * gth_out};
  for (int i = 3; i >= 0; --i) {
    const StageRecord& st = sub.stages[i];
    Vec3 g_p = Vec3::Zero();
    Vec3 g_v = g_kp[i];
    Mat3 g_r = thrust * g_kv[i] * kE3.transpose();
    gc += g_kv[i].dot(st.R * kE3);
    gw += g_kw[i];
    if (active) {
      const Feature g_zeta = residual_vjp(model, st.net, g_kv[i], g_kw[i], dtheta);
      g_p += g_zeta.segment<3>(0);
      g_v += g_zeta.segment<3>(3);
      for (int c = 0; c < 3; ++c) g_r.col(c) += g_zeta.segment<3>(6 + 3 * c);
      gc += g_zeta(15);
      gw += g_zeta.segment<3>(16);
    }
    const Vec3 t = tangent_cotangent(st.R, g_r);
    in.gp += g_p;
    in.gv += g_v;
    if (i == 0) {
      in.gth += t;
    } else {
      in.gth += exp_so3(st.psi) * t;
      const Vec3 g_psi = right_jacobian(st.psi).transpose() * t;
      g_kw[i - 1] += kA[i] * h * g_psi;
      g_kp[i - 1] += kA[i] * h * g_p;
      g_kv[i - 1] += kA[i] * h * g_v;
    }
  }
  return in;
}

}  // namespace

StepVjp step_vjp(const HybridModel& model, const StepRecord& record, const StateTangent& cotangent,
                 ParamGradient* dtheta) {
  Vec3 gp = cotangent.segment<3>(0);
  Vec3 gv = cotangent.segment<3>(3);
  Vec3 gth = cotangent.segment<3>(6);
  double gc = 0.0;
  Vec3 gw = Vec3::Zero();
  for (std::size_t s = record.substeps.size(); s-- > 0;) {
    const SubstepVjp r = substep_vjp(model, record.substeps[s], record.u.c, gp, gv, gth, gc, gw, dtheta);
    gp = r.gp;
    gv = r.gv;
    gth = r.gth;
  }
  StepVjp out;
  out.dx << gp, gv, gth;
  out.du << gc, gw;
  return out;
}

Jacobians jacobians(const HybridModel& model, const State& x, const Command& u, double dt) {
  StepRecord rec;
  step(model, x, u, dt, &rec);
  Jacobians j;
  for (int row = 0; row < 9; ++row) {
    const StepVjp r = step_vjp(model, rec, StateTangent::Unit(row));
    j.A.row(row) = r.dx.transpose();
    j.B.row(row) = r.du.transpose();
  }
  return j;
}

}  // namespace agile
