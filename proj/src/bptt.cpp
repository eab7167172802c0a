#include "agile/bptt.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace agile {

namespace {

Eigen::Vector4d rate_mask() { return {0.0, 1.0, 1.0, 1.0}; }

}  // namespace

double reward(const State& x, const Command& u, const Command& u_prev, const State& ref, const RewardWeights& w) {
  const Eigen::Vector4d du = u.to_vector() - u_prev.to_vector();
  return -w.w_p * (x.p - ref.p).squaredNorm() - w.w_v * (x.v - ref.v).squaredNorm() -
         w.w_R * geodesic_sq(ref.R, x.R) - w.w_du * du.squaredNorm() - w.w_omega * u.omega.squaredNorm();
}

RewardVjp reward_vjp(const State& x, const Command& u, const Command& u_prev, const State& ref,
                     const RewardWeights& w) {
  RewardVjp g;
  g.dx << -2.0 * w.w_p * (x.p - ref.p), -2.0 * w.w_v * (x.v - ref.v),
      -w.w_R * geodesic_sq_grad(ref.R, x.R).d_second;
  const Eigen::Vector4d du = u.to_vector() - u_prev.to_vector();
  g.du = -2.0 * w.w_du * du - 2.0 * w.w_omega * rate_mask().cwiseProduct(u.to_vector());
  g.du_prev = 2.0 * w.w_du * du;
  return g;
}

Command previous_command(const ActionHistory& h) { return h.length() > 0 ? h.latest() : Command{}; }

RolloutTape rollout(const Policy& pol, const HybridModel& model, const RefTrajectory& traj,
                    const std::vector<Anchor>& anchors, const BpttConfig& cfg) {
  if (cfg.H < 1) throw std::invalid_argument("rollout: horizon must be at least one step");
  if (anchors.empty()) throw std::invalid_argument("rollout: no anchors");
  const int B = static_cast<int>(anchors.size());
  const int L = pol.config().history;
  RolloutTape tape;
  tape.H = cfg.H;
  tape.batch = B;
  tape.weights = cfg.weights;
  tape.x.assign(cfg.H + 1, std::vector<State>(B));
  tape.ref.assign(cfg.H, std::vector<RefState>(B));
  tape.u.resize(cfg.H);
  tape.act.resize(cfg.H);
  tape.rec.assign(cfg.H, std::vector<StepRecord>(B));
  tape.rewards.resize(cfg.H, B);
  tape.u_prev0.resize(4, B);

  std::vector<ActionHistory> hist;
  std::vector<Command> prev;
  for (int b = 0; b < B; ++b) {
    if (anchors[b].history.length() != L)
      throw DimensionMismatch("rollout: anchor history length differs from the policy's");
    if (!anchors[b].x.valid()) throw std::invalid_argument("rollout: invalid anchor state");
    tape.x[0][b] = anchors[b].x;
    hist.push_back(anchors[b].history);
    prev.push_back(previous_command(anchors[b].history));
    tape.u_prev0.col(b) = prev.back().to_vector();
  }

  Eigen::MatrixXd obs(pol.obs_dim(), B);
  for (int k = 0; k < cfg.H; ++k) {
    for (int b = 0; b < B; ++b) {
      tape.ref[k][b] = eval_from(traj, anchors[b].path_time, k * cfg.dt);
      obs.col(b) = build_observation(tape.x[k][b], tape.ref[k][b].state(), hist[b]);
    }
    tape.u[k] = pol.act_batch(obs, &tape.act[k]);
    for (int b = 0; b < B; ++b) {
      const Command u = Command::from_vector(tape.u[k].col(b));
      tape.rewards(k, b) = reward(tape.x[k][b], u, prev[b], tape.ref[k][b].state(), cfg.weights);
      tape.x[k + 1][b] = step(model, tape.x[k][b], u, cfg.dt, &tape.rec[k][b]);
      hist[b].push(u);
      prev[b] = u;
    }
  }
  return tape;
}

BpttGradient backward(const Policy& pol, const HybridModel& model, const RolloutTape& tape, double gamma,
                      bool frozen, int reward_horizon) {
  const int H = tape.H;
  const int B = tape.batch;
  const int L = pol.config().history;
  const int kr = reward_horizon < 0 ? H : std::min(H, reward_horizon);
  const double inv_b = 1.0 / B;

  BpttGradient out;
  out.grad = pol.net().zero_gradient();
  double discount = 1.0;
  for (int k = 0; k < kr; ++k, discount *= gamma) out.objective += discount * tape.rewards.row(k).sum() * inv_b;
  if (frozen) return out;

  // Cotangents of states and commands; the anchor and its history are
  // constants, so nothing flows into them.
  std::vector<std::vector<StateTangent>> gx(H, std::vector<StateTangent>(B, StateTangent::Zero()));
  std::vector<Eigen::MatrixXd> gu(H, Eigen::MatrixXd::Zero(4, B));
  for (int k = H - 1; k >= 0; --k) {
    const double w = std::pow(gamma, k) * inv_b;
    for (int b = 0; b < B; ++b) {
      if (k + 1 < H) {
        const StepVjp sv = step_vjp(model, tape.rec[k][b], gx[k + 1][b]);
        gx[k][b] += sv.dx;
        gu[k].col(b) += sv.du;
      }
      if (k < kr) {
        const Command u = Command::from_vector(tape.u[k].col(b));
        const Eigen::Vector4d prev = k > 0 ? Eigen::Vector4d(tape.u[k - 1].col(b)) : Eigen::Vector4d(tape.u_prev0.col(b));
        const RewardVjp rv = reward_vjp(tape.x[k][b], u, Command::from_vector(prev), tape.ref[k][b].state(), tape.weights);
        gx[k][b] += w * rv.dx;
        gu[k].col(b) += w * rv.du;
        if (k > 0) gu[k - 1].col(b) += w * rv.du_prev;
      }
    }
    const Eigen::MatrixXd go = pol.act_vjp(tape.act[k], gu[k], &out.grad);
    if (k == 0) break;
    for (int b = 0; b < B; ++b) {
      gx[k][b].segment<3>(0) += go.block<3, 1>(0, b);
      gx[k][b].segment<3>(3) += go.block<3, 1>(3, b);
      gx[k][b].segment<3>(6) += dvec_dtangent(tape.x[k][b].R).transpose() * go.block<9, 1>(6, b);
      for (int i = 0; i < L; ++i) {
        const int j = k - L + i;
        if (j >= 0) gu[j].col(b) += go.block<4, 1>(2 * kStateObsDim + 4 * i, b);
      }
    }
  }
  return out;
}

double update_policy(Policy& pol, Adam& opt, const HybridModel& model, const RefTrajectory& traj,
                     const std::vector<Anchor>& anchors, const BpttConfig& cfg) {
  const RolloutTape tape = rollout(pol, model, traj, anchors, cfg);
  BpttGradient g = backward(pol, model, tape, cfg.gamma, cfg.frozen);
  if (cfg.frozen || cfg.lr == 0.0) return g.objective;
  g.grad.scale(-1.0);  // the optimizer descends
  clip_grad_norm(g.grad, cfg.grad_clip);
  opt.step(pol.net(), g.grad, cfg.lr);
  return g.objective;
}

Command feedforward_command(const RefState& ref) {
  return {(ref.a + kGravity * Vec3::UnitZ()).norm(), ref.omega};
}

ActionHistory feedforward_history(const RefState& ref, int length) {
  ActionHistory h(length);
  for (int i = 0; i < length; ++i) h.push(feedforward_command(ref));
  return h;
}

double tracking_rmse(const Policy& pol, const HybridModel& model, const RefTrajectory& traj, double seconds,
                     double s0, double dt) {
  const int n = static_cast<int>(std::lround(seconds / dt));
  const RefState start = eval_from(traj, s0, 0.0);
  State x = start.state();
  ActionHistory h = feedforward_history(start, pol.config().history);
  double sum = 0.0;
  for (int k = 0; k < n; ++k) {
    const RefState ref = eval_from(traj, s0, k * dt);
    const Command u = pol.act(build_observation(x, ref.state(), h));
    x = step(model, x, u, dt);
    h.push(u);
    if (!x.valid()) return std::numeric_limits<double>::infinity();
    sum += (x.p - eval_from(traj, s0, (k + 1) * dt).p).squaredNorm();
  }
  return n > 0 ? std::sqrt(sum / n) : 0.0;
}

std::vector<Anchor> sample_anchors(const RefTrajectory& traj, int n, int history, const PretrainConfig& pcfg,
                                   std::mt19937_64& rng, double reserve_seconds) {
  double span = traj.path_duration();
  if (!traj.cyclic) span = std::max(0.0, span - reserve_seconds / traj.alpha);
  std::uniform_real_distribution<double> when(0.0, span);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto box = [&](double r) { return Vec3(r * u(rng), r * u(rng), r * u(rng)); };
  std::vector<Anchor> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    Anchor a;
    a.path_time = when(rng);
    const RefState ref = eval_from(traj, a.path_time, 0.0);
    a.x.p = ref.p + box(pcfg.pos_spread);
    a.x.v = ref.v + box(pcfg.vel_spread);
    a.x.R = ref.R * exp_so3(box(pcfg.att_spread));
    a.history = feedforward_history(ref, history);
    out.push_back(std::move(a));
  }
  return out;
}

PretrainLog pretrain(Policy& pol, Adam& opt, const HybridModel& model, const RefTrajectory& traj,
                     const BpttConfig& cfg, const PretrainConfig& pcfg, const PretrainCallback& cb) {
  if (!model.nominal_only) throw std::invalid_argument("pretrain expects the nominal model");
  std::mt19937_64 rng(pcfg.seed);
  std::uniform_real_distribution<double> log_alpha(std::log(pcfg.alpha_min), std::log(pcfg.alpha_max));
  RefTrajectory eval_traj = traj;
  eval_traj.alpha = pcfg.eval_alpha;
  PretrainLog log;
  for (int it = 0; it < pcfg.max_updates; ++it) {
    RefTrajectory t = traj;
    t.alpha = std::exp(log_alpha(rng));
    const auto anchors = sample_anchors(t, cfg.n_anchors, pol.config().history, pcfg, rng, cfg.H * cfg.dt);
    const double j = update_policy(pol, opt, model, t, anchors, cfg);
    log.objective.push_back(j);
    log.updates = it + 1;
    if (cb) cb(it, j);
    if (pcfg.eval_every > 0 && (it + 1) % pcfg.eval_every == 0) {
      const double rmse = tracking_rmse(pol, model, eval_traj, pcfg.eval_seconds);
      log.rmse.emplace_back(it + 1, rmse);
      if (pcfg.rmse_target > 0.0 && rmse < pcfg.rmse_target) break;
    }
  }
  return log;
}

}  // namespace agile
