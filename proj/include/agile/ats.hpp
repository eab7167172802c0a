#pragma once

// Adaptive temporal scaling: sensitivity of the tracking discrepancy to the
// time-dilation factor along a recorded closed-loop window, a softplus
// safety barrier, and the projected update of alpha.

#include <stdexcept>
#include <vector>

#include "agile/dynamics.hpp"
#include "agile/policy.hpp"
#include "agile/reference.hpp"
#include "agile/residual.hpp"

namespace agile {

class InconsistentWindow : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct AtsConfig {
  double lambda_speed = 1.0;
  double lambda_safe = 50.0;
  // Sharp enough that the barrier slope is ~1e-4 at E = 0 for E_th = 0.09.
  double kappa = 100.0;
  double E_th = 0.09;  // (0.3 m)^2
  // Step on log(alpha): alpha <- clamp(alpha * exp(-eta * clip(grad))).
  double eta = 0.15;
  double grad_clip = 3.0;
  // Sign-adaptive step size: grows while successive gradients agree,
  // shrinks when they disagree.
  bool adaptive_eta = true;
  double eta_grow = 1.2;
  double eta_shrink = 0.5;
  double eta_min = 1e-3;
  double eta_max = 0.3;
  double alpha_min = 0.5;
  double alpha_max = 8.0;
  double alpha_init = 8.0;
  int H = 50;
  double dt = kDefaultDt;
  // Position plus attitude; velocity error is not part of the safety metric.
  DiscrepancyWeights weights{1.0, 0.0, 0.5};

  void validate() const;
};

struct Barrier {
  double value;
  double slope;
};
Barrier softplus_barrier(double z, double kappa);

struct WindowSample {
  State x;    // state estimate
  Command u;  // command applied at that estimate
};

// The last H closed-loop steps flown at a fixed alpha. Sample k was taken
// at reference path time path_time0 + k * dt / alpha.
struct RealWindow {
  std::vector<WindowSample> samples;
  double path_time0 = 0.0;
  double alpha = 1.0;
  double dt = kDefaultDt;
  ActionHistory history0;  // commands before the first sample
};

struct SensitivityStep {
  StateTangent S = StateTangent::Zero();  // d x_hat_k / d alpha
  double E = 0.0;
  double dE = 0.0;
};

// ref_gain scales the injected reference sensitivities (1 in normal use).
std::vector<SensitivityStep> propagate_sensitivity(const HybridModel& model, const Policy& pol,
                                                   const RefTrajectory& traj, const RealWindow& win,
                                                   const AtsConfig& cfg, double ref_gain = 1.0);

struct AtsGradient {
  double speed = 0.0;
  double barrier = 0.0;
  double total() const { return speed + barrier; }
};
AtsGradient ats_gradient(const std::vector<SensitivityStep>& sens, const AtsConfig& cfg);

// Step-size state carried between updates when cfg.adaptive_eta is set.
struct AlphaStepState {
  double eta = 0.0;  // 0 starts from cfg.eta
  double last_grad = 0.0;
};

// Projected step alpha <- clamp(alpha * exp(-eta * clip(grad))). Without a
// state the step size is cfg.eta.
RefTrajectory update_alpha(const RefTrajectory& traj, double grad, const AtsConfig& cfg,
                           AlphaStepState* state = nullptr);

double window_max_E(const std::vector<SensitivityStep>& sens);

}  // namespace agile
