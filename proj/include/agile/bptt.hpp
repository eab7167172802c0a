#pragma once

// Anchored short-horizon differentiable rollouts under the hybrid model and
// the policy-gradient sweep through them.

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "agile/dynamics.hpp"
#include "agile/policy.hpp"
#include "agile/reference.hpp"

namespace agile {

struct RewardWeights {
  double w_p = 1.0;
  double w_v = 0.1;
  double w_R = 0.2;
  double w_du = 0.05;
  double w_omega = 0.01;
};

double reward(const State& x, const Command& u, const Command& u_prev, const State& ref, const RewardWeights& w);

struct RewardVjp {
  StateTangent dx = StateTangent::Zero();
  Eigen::Vector4d du = Eigen::Vector4d::Zero();
  Eigen::Vector4d du_prev = Eigen::Vector4d::Zero();
};
// Gradient of the reward (not its negation).
RewardVjp reward_vjp(const State& x, const Command& u, const Command& u_prev, const State& ref,
                     const RewardWeights& w);

struct BpttConfig {
  int H = 50;
  double gamma = 0.97;
  double lr = 3e-4;
  int n_anchors = 16;
  int anchor_stride = 5;
  double grad_clip = 10.0;
  double dt = kDefaultDt;
  RewardWeights weights;
  // Compute the objective only; the gradient is left at zero.
  bool frozen = false;
};

// Rollout start: a state, the path time of the reference at that state,
// and the commands that led to it.
struct Anchor {
  State x;
  double path_time = 0.0;
  ActionHistory history;
};

// Batched over anchors: index [k][b] for per-sample entries, [k] with one
// column per anchor for matrices.
struct RolloutTape {
  int H = 0;
  int batch = 0;
  std::vector<std::vector<State>> x;         // H + 1 entries
  std::vector<std::vector<RefState>> ref;    // H
  std::vector<Eigen::MatrixXd> u;            // H, 4 x B
  std::vector<ActRecord> act;                // H
  std::vector<std::vector<StepRecord>> rec;  // H
  Eigen::MatrixXd u_prev0;                   // 4 x B, command preceding each anchor
  Eigen::MatrixXd rewards;                   // H x B
  RewardWeights weights;
};

RolloutTape rollout(const Policy& pol, const HybridModel& model, const RefTrajectory& traj,
                    const std::vector<Anchor>& anchors, const BpttConfig& cfg);

struct BpttGradient {
  ParamGradient grad;  // d mean(J) / d phi
  double objective = 0.0;  // mean over anchors of sum_k gamma^k r_k
};

// reward_horizon < 0 uses every reward on the tape.
BpttGradient backward(const Policy& pol, const HybridModel& model, const RolloutTape& tape, double gamma,
                      bool frozen = false, int reward_horizon = -1);

// One ascent step on the anchor-averaged objective. Returns mean J before
// the step.
double update_policy(Policy& pol, Adam& opt, const HybridModel& model, const RefTrajectory& traj,
                     const std::vector<Anchor>& anchors, const BpttConfig& cfg);

// Closed-loop tracking under `model` from the reference start state at
// path time s0. Returns position RMSE in meters.
double tracking_rmse(const Policy& pol, const HybridModel& model, const RefTrajectory& traj, double seconds,
                     double s0 = 0.0, double dt = kDefaultDt);

// Reference-consistent command: thrust magnitude and body rate of the
// flatness map.
Command feedforward_command(const RefState& ref);
// History filled with the feedforward command at the given reference.
ActionHistory feedforward_history(const RefState& ref, int length);

struct PretrainConfig {
  int max_updates = 2000;
  double rmse_target = 0.0;  // 0 disables early stopping
  int eval_every = 100;
  double eval_seconds = 8.0;
  double eval_alpha = 4.0;
  // Trajectory alpha is drawn log-uniformly from this range per update.
  double alpha_min = 4.0;
  double alpha_max = 4.0;
  double pos_spread = 0.5;
  double vel_spread = 1.0;
  double att_spread = 15.0 * 3.14159265358979323846 / 180.0;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  int updates = 0;
  std::vector<double> objective;               // per update
  std::vector<std::pair<int, double>> rmse;    // (update, rmse)
};

using PretrainCallback = std::function<void(int update, double objective)>;

PretrainLog pretrain(Policy& pol, Adam& opt, const HybridModel& model, const RefTrajectory& traj,
                     const BpttConfig& cfg, const PretrainConfig& pcfg, const PretrainCallback& cb = {});

// Command preceding the anchor; hover when the history is empty.
Command previous_command(const ActionHistory& h);

// Anchors sampled uniformly around the reference at random path times. For
// non-cyclic paths the last reserve_seconds (at the current alpha) are left
// free so rollouts stay in the domain.
std::vector<Anchor> sample_anchors(const RefTrajectory& traj, int n, int history, const PretrainConfig& pcfg,
                                   std::mt19937_64& rng, double reserve_seconds = 0.0);

}  // namespace agile
