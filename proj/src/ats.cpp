#include "agile/ats.hpp"

#include <algorithm>
#include <cmath>

namespace agile {

namespace {

// d obs / d x for a state tangent, restricted to one 15-entry block.
Eigen::Matrix<double, kStateObsDim, 9> obs_block_jacobian(const Mat3& r) {
  Eigen::Matrix<double, kStateObsDim, 9> j = Eigen::Matrix<double, kStateObsDim, 9>::Zero();
  j.block<6, 6>(0, 0).setIdentity();
  j.block<9, 3>(6, 6) = dvec_dtangent(r);
  return j;
}

}  // namespace

void AtsConfig::validate() const {
  if (!(lambda_speed >= 0.0 && lambda_safe >= 0.0 && kappa > 0.0 && E_th > 0.0 && eta >= 0.0))
    throw std::invalid_argument("ats config: weights must be nonnegative and kappa, E_th positive");
  if (!(grad_clip > 0.0)) throw std::invalid_argument("ats config: grad_clip must be positive");
  if (adaptive_eta && !(eta_grow >= 1.0 && eta_shrink > 0.0 && eta_shrink <= 1.0 && eta_min <= eta_max))
    throw std::invalid_argument("ats config: invalid step-size adaptation");
  if (!(alpha_min > 0.0 && alpha_min < alpha_max)) throw std::invalid_argument("ats config: need 0 < alpha_min < alpha_max");
  if (alpha_init < alpha_min || alpha_init > alpha_max) throw std::invalid_argument("ats config: alpha_init out of range");
  if (H < 1) throw std::invalid_argument("ats config: H must be positive");
}

Barrier softplus_barrier(double z, double kappa) {
  if (!(kappa > 0.0)) throw std::invalid_argument("softplus_barrier: kappa must be positive");
  const double t = kappa * z;
  // log(1 + e^t) = max(t, 0) + log1p(e^-|t|)
  const double value = (std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)))) / kappa;
  const double slope = t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
  return {value, slope};
}

std::vector<SensitivityStep> propagate_sensitivity(const HybridModel& model, const Policy& pol,
                                                   const RefTrajectory& traj, const RealWindow& win,
                                                   const AtsConfig& cfg, double ref_gain) {
  if (win.samples.empty()) throw InconsistentWindow("sensitivity: empty window");
  if (std::abs(win.dt - cfg.dt) > 1e-12) throw InconsistentWindow("sensitivity: window dt differs from config dt");
  if (std::abs(win.alpha - traj.alpha) > 1e-12)
    throw InconsistentWindow("sensitivity: window was recorded at a different alpha");
  const int L = pol.config().history;
  if (win.history0.length() != L) throw InconsistentWindow("sensitivity: history length differs from policy");

  const int n = static_cast<int>(win.samples.size());
  std::vector<SensitivityStep> out(n);
  // d u_j / d alpha for every command so far; the pre-window history is fixed.
  std::vector<Eigen::Vector4d> du(n, Eigen::Vector4d::Zero());
  ActionHistory hist = win.history0;
  StateTangent S = StateTangent::Zero();
  for (int k = 0; k < n; ++k) {
    const WindowSample& w = win.samples[k];
    const RefState ref = eval_from(traj, win.path_time0, k * win.dt);
    const StateTangent dref = ref_gain * ref.dstate();

    SensitivityStep& st = out[k];
    st.S = S;
    st.E = discrepancy(w.x, ref.state(), cfg.weights);
    st.dE = discrepancy_grad(w.x, ref.state(), cfg.weights).dot(dref) +
            discrepancy_grad(ref.state(), w.x, cfg.weights).dot(S);
    if (k + 1 == n) break;

    // d o_k / d alpha
    Eigen::VectorXd dobs = Eigen::VectorXd::Zero(pol.obs_dim());
    dobs.head<kStateObsDim>() = obs_block_jacobian(w.x.R) * S;
    dobs.segment<kStateObsDim>(kStateObsDim) = obs_block_jacobian(ref.R) * dref;
    for (int i = 0; i < L; ++i) {
      const int j = k - L + i;
      if (j >= 0) dobs.segment<4>(2 * kStateObsDim + 4 * i) = du[j];
    }
    const Observation o = build_observation(w.x, ref.state(), hist);
    du[k] = policy_jacobian(pol, o) * dobs;

    const Jacobians jac = jacobians(model, w.x, w.u, win.dt);
    S = jac.A * S + jac.B * du[k];
    hist.push(w.u);
  }
  return out;
}

AtsGradient ats_gradient(const std::vector<SensitivityStep>& sens, const AtsConfig& cfg) {
  AtsGradient g;
  g.speed = cfg.lambda_speed;
  for (const auto& s : sens) g.barrier += cfg.lambda_safe * softplus_barrier(s.E - cfg.E_th, cfg.kappa).slope * s.dE;
  return g;
}

RefTrajectory update_alpha(const RefTrajectory& traj, double grad, const AtsConfig& cfg, AlphaStepState* state) {
  const double g = std::clamp(grad, -cfg.grad_clip, cfg.grad_clip);
  double eta = cfg.eta;
  if (state && cfg.adaptive_eta) {
    if (state->eta <= 0.0) {
      state->eta = cfg.eta;
    } else if (state->last_grad * g < 0.0) {
      state->eta = std::max(cfg.eta_min, state->eta * cfg.eta_shrink);
    } else if (state->last_grad * g > 0.0) {
      state->eta = std::min(cfg.eta_max, state->eta * cfg.eta_grow);
    }
    state->last_grad = g;
    eta = state->eta;
  }
  RefTrajectory out = traj;
  out.alpha = std::clamp(traj.alpha * std::exp(-eta * g), cfg.alpha_min, cfg.alpha_max);
  return out;
}

double window_max_E(const std::vector<SensitivityStep>& sens) {
  double m = 0.0;
  for (const auto& s : sens) m = std::max(m, s.E);
  return m;
}

}  // namespace agile
