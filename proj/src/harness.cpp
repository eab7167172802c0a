#include "agile/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace agile {

namespace {

using nlohmann::json;

template <class T>
void get_if(const json& j, const char* key, T& v) {
  if (j.contains(key)) v = j.at(key).get<T>();
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

json discrepancy_json(const DiscrepancyWeights& w) { return {{"w_p", w.w_p}, {"w_v", w.w_v}, {"w_R", w.w_R}}; }

DiscrepancyWeights discrepancy_from_json(const json& j, DiscrepancyWeights w) {
  get_if(j, "w_p", w.w_p);
  get_if(j, "w_v", w.w_v);
  get_if(j, "w_R", w.w_R);
  return w;
}

json bptt_json(const BpttConfig& c) {
  return {{"H", c.H},
          {"gamma", c.gamma},
          {"lr", c.lr},
          {"n_anchors", c.n_anchors},
          {"anchor_stride", c.anchor_stride},
          {"grad_clip", c.grad_clip},
          {"dt", c.dt},
          {"weights",
           {{"w_p", c.weights.w_p},
            {"w_v", c.weights.w_v},
            {"w_R", c.weights.w_R},
            {"w_du", c.weights.w_du},
            {"w_omega", c.weights.w_omega}}}};
}

BpttConfig bptt_from_json(const json& j, BpttConfig c) {
  get_if(j, "H", c.H);
  get_if(j, "gamma", c.gamma);
  get_if(j, "lr", c.lr);
  get_if(j, "n_anchors", c.n_anchors);
  get_if(j, "anchor_stride", c.anchor_stride);
  get_if(j, "grad_clip", c.grad_clip);
  get_if(j, "dt", c.dt);
  if (j.contains("weights")) {
    const json& w = j["weights"];
    get_if(w, "w_p", c.weights.w_p);
    get_if(w, "w_v", c.weights.w_v);
    get_if(w, "w_R", c.weights.w_R);
    get_if(w, "w_du", c.weights.w_du);
    get_if(w, "w_omega", c.weights.w_omega);
  }
  return c;
}

json ats_json(const AtsConfig& c) {
  return {{"lambda_speed", c.lambda_speed}, {"lambda_safe", c.lambda_safe}, {"kappa", c.kappa},
          {"E_th", c.E_th},                 {"eta", c.eta},                 {"alpha_min", c.alpha_min},
          {"alpha_max", c.alpha_max},       {"alpha_init", c.alpha_init},   {"H", c.H},
          {"grad_clip", c.grad_clip},       {"adaptive_eta", c.adaptive_eta}, {"eta_grow", c.eta_grow},
          {"eta_shrink", c.eta_shrink},     {"eta_min", c.eta_min},         {"eta_max", c.eta_max},
          {"weights", discrepancy_json(c.weights)}};
}

AtsConfig ats_from_json(const json& j, AtsConfig c) {
  get_if(j, "lambda_speed", c.lambda_speed);
  get_if(j, "lambda_safe", c.lambda_safe);
  get_if(j, "kappa", c.kappa);
  get_if(j, "E_th", c.E_th);
  get_if(j, "eta", c.eta);
  get_if(j, "alpha_min", c.alpha_min);
  get_if(j, "alpha_max", c.alpha_max);
  get_if(j, "alpha_init", c.alpha_init);
  get_if(j, "H", c.H);
  get_if(j, "grad_clip", c.grad_clip);
  get_if(j, "adaptive_eta", c.adaptive_eta);
  get_if(j, "eta_grow", c.eta_grow);
  get_if(j, "eta_shrink", c.eta_shrink);
  get_if(j, "eta_min", c.eta_min);
  get_if(j, "eta_max", c.eta_max);
  if (j.contains("weights")) c.weights = discrepancy_from_json(j["weights"], c.weights);
  return c;
}

json residual_json(const ResidualTrainConfig& c) {
  return {{"batch", c.batch},           {"n_batches", c.n_batches}, {"lr", c.lr},
          {"lambda_reg", c.lambda_reg}, {"grad_clip", c.grad_clip}, {"weights", discrepancy_json(c.weights)}};
}

ResidualTrainConfig residual_from_json(const json& j, ResidualTrainConfig c) {
  get_if(j, "batch", c.batch);
  get_if(j, "n_batches", c.n_batches);
  get_if(j, "lr", c.lr);
  get_if(j, "lambda_reg", c.lambda_reg);
  get_if(j, "grad_clip", c.grad_clip);
  if (j.contains("weights")) c.weights = discrepancy_from_json(j["weights"], c.weights);
  return c;
}

json policy_cfg_json(const PolicyConfig& c) {
  return {{"history", c.history},
          {"hidden", c.hidden},
          {"error_frame", c.error_frame},
          {"out_scale", c.out_scale},
          {"limits", {{"c_min", c.limits.c_min}, {"c_max", c.limits.c_max}, {"omega_max", c.limits.omega_max}}}};
}

PolicyConfig policy_cfg_from_json(const json& j, PolicyConfig c) {
  get_if(j, "history", c.history);
  get_if(j, "hidden", c.hidden);
  get_if(j, "error_frame", c.error_frame);
  get_if(j, "out_scale", c.out_scale);
  if (j.contains("limits")) {
    get_if(j["limits"], "c_min", c.limits.c_min);
    get_if(j["limits"], "c_max", c.limits.c_max);
    get_if(j["limits"], "omega_max", c.limits.omega_max);
  }
  return c;
}

json pretrain_json(const PretrainConfig& c) {
  return {{"max_updates", c.max_updates}, {"rmse_target", c.rmse_target}, {"eval_every", c.eval_every},
          {"eval_seconds", c.eval_seconds}, {"eval_alpha", c.eval_alpha},   {"alpha_min", c.alpha_min},
          {"alpha_max", c.alpha_max},     {"pos_spread", c.pos_spread},   {"vel_spread", c.vel_spread},
          {"att_spread", c.att_spread},   {"seed", c.seed}};
}

PretrainConfig pretrain_from_json(const json& j, PretrainConfig c) {
  get_if(j, "max_updates", c.max_updates);
  get_if(j, "rmse_target", c.rmse_target);
  get_if(j, "eval_every", c.eval_every);
  get_if(j, "eval_seconds", c.eval_seconds);
  get_if(j, "eval_alpha", c.eval_alpha);
  get_if(j, "alpha_min", c.alpha_min);
  get_if(j, "alpha_max", c.alpha_max);
  get_if(j, "pos_spread", c.pos_spread);
  get_if(j, "vel_spread", c.vel_spread);
  get_if(j, "att_spread", c.att_spread);
  get_if(j, "seed", c.seed);
  return c;
}

HybridModel variant_model(Variant v, int hidden, std::mt19937_64& rng) {
  if (!trains_residual(v)) return HybridModel::nominal();
  HybridModel m = HybridModel::make(rng, hidden);
  if (v == Variant::kLoft) m.rate_residual = false;
  return m;
}

// Gate at the path start, crossed along the path direction.
struct Gate {
  Vec3 point;
  Vec3 normal;
};

Gate start_gate(const RefTrajectory& traj) {
  RefTrajectory t = traj;
  t.alpha = 1.0;
  const RefState r = eval_from(t, 0.0, 0.0);
  const double n = r.v.norm();
  return {r.p, n > 1e-9 ? Vec3(r.v / n) : Vec3::UnitX()};
}

constexpr double kGateRadius = 1.0;
constexpr double kGateAlignment = 0.7;

json model_json(const HybridModel& m) {
  json j = {{"nominal_only", m.nominal_only},
            {"rate_residual", m.rate_residual},
            {"accel_gain", m.accel_gain},
            {"rate_gain", m.rate_gain}};
  if (m.residual.num_layers() > 0) j["net"] = to_json(m.residual);
  return j;
}

void write_csv_row(std::ostream& out, const std::vector<double>& v) {
  char buf[32];
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.10g", v[i]);
    out << (i ? "," : "") << buf;
  }
  out << '\n';
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kLoft: return "loft";
    case Variant::kAnchorOnly: return "anchor_only";
    case Variant::kResidualOnly: return "residual_only";
    case Variant::kOurs: return "ours";
  }
  return "?";
}

Variant variant_from_string(const std::string& s) {
  for (Variant v : all_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown variant '" + s + "'");
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::kBaseline, Variant::kLoft, Variant::kAnchorOnly,
                                      Variant::kResidualOnly, Variant::kOurs};
  return v;
}

bool trains_residual(Variant v) {
  return v == Variant::kLoft || v == Variant::kResidualOnly || v == Variant::kOurs;
}

bool uses_anchors(Variant v) { return v == Variant::kLoft || v == Variant::kAnchorOnly || v == Variant::kOurs; }

ExperimentConfig::ExperimentConfig() {
  pretrain.alpha_min = ats.alpha_min;
  pretrain.alpha_max = ats.alpha_max;
  pretrain.eval_alpha = 2.0;
}

void ExperimentConfig::validate() const {
  const auto names = preset_names();
  if (std::find(names.begin(), names.end(), preset) == names.end())
    throw ConfigError("unknown preset '" + preset + "'");
  if (n_iterations < 1) throw ConfigError("n_iterations must be at least 1");
  if (!(rollout_seconds > 0.0)) throw ConfigError("rollout_seconds must be positive");
  if (rollout_seconds < ats.H * bptt.dt) throw ConfigError("rollout shorter than the sensitivity window");
  if (warmup_seconds < 0.0) throw ConfigError("warmup_seconds must be nonnegative");
  if (policy_updates < 0 || residual_epochs < 0) throw ConfigError("update counts must be nonnegative");
  if (residual_hidden < 1) throw ConfigError("residual_hidden must be positive");
  if (ats_windows < 0) throw ConfigError("ats_windows must be nonnegative");
  if (!(arena > 0.0)) throw ConfigError("arena must be positive");
  if (bptt.H < 1 || bptt.n_anchors < 1 || bptt.anchor_stride < 1) throw ConfigError("invalid bptt config");
  if (!(bptt.dt > 0.0)) throw ConfigError("dt must be positive");
  if (std::abs(ats.dt - bptt.dt) > 1e-12) throw ConfigError("ats and bptt dt differ");
  try {
    plant.validate();
    ats.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"preset", c.preset},
          {"variant", to_string(c.variant)},
          {"n_iterations", c.n_iterations},
          {"rollout_seconds", c.rollout_seconds},
          {"warmup_seconds", c.warmup_seconds},
          {"policy_updates", c.policy_updates},
          {"residual_epochs", c.residual_epochs},
          {"residual_hidden", c.residual_hidden},
          {"ats_windows", c.ats_windows},
          {"arena", c.arena},
          {"seed", c.seed},
          {"policy_checkpoint", c.policy_checkpoint},
          {"write_checkpoints", c.write_checkpoints},
          {"plant", to_json(c.plant)},
          {"bptt", bptt_json(c.bptt)},
          {"ats", ats_json(c.ats)},
          {"residual", residual_json(c.residual)},
          {"policy", policy_cfg_json(c.policy)},
          {"pretrain", pretrain_json(c.pretrain)}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    get_if(j, "preset", c.preset);
    if (j.contains("variant")) c.variant = variant_from_string(j["variant"].get<std::string>());
    get_if(j, "n_iterations", c.n_iterations);
    get_if(j, "rollout_seconds", c.rollout_seconds);
    get_if(j, "warmup_seconds", c.warmup_seconds);
    get_if(j, "policy_updates", c.policy_updates);
    get_if(j, "residual_epochs", c.residual_epochs);
    get_if(j, "residual_hidden", c.residual_hidden);
    get_if(j, "ats_windows", c.ats_windows);
    get_if(j, "arena", c.arena);
    get_if(j, "seed", c.seed);
    get_if(j, "policy_checkpoint", c.policy_checkpoint);
    get_if(j, "write_checkpoints", c.write_checkpoints);
    if (j.contains("plant")) c.plant = plant_config_from_json(j["plant"]);
    if (j.contains("bptt")) c.bptt = bptt_from_json(j["bptt"], c.bptt);
    if (j.contains("ats")) c.ats = ats_from_json(j["ats"], c.ats);
    c.ats.dt = c.bptt.dt;
    if (j.contains("residual")) c.residual = residual_from_json(j["residual"], c.residual);
    if (j.contains("policy")) c.policy = policy_cfg_from_json(j["policy"], c.policy);
    if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j["pretrain"], c.pretrain);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

void check_observability(const PlantConfig& plant, const RefTrajectory& traj, double alpha, double dt) {
  PlantConfig base = PlantConfig::nominal();
  base.seed = plant.seed;
  struct Probe {
    const char* name;
    bool active;
    PlantConfig cfg;
    bool lagged;  // actuator starts away from the command
  };
  std::vector<Probe> probes;
  auto with = [&](auto&& edit) {
    PlantConfig c = base;
    edit(c);
    return c;
  };
  probes.push_back({"mass_scale", plant.mass_scale != 1.0, with([&](PlantConfig& c) { c.mass_scale = plant.mass_scale; }), false});
  probes.push_back({"thrust_eff", plant.thrust_eff != 1.0, with([&](PlantConfig& c) { c.thrust_eff = plant.thrust_eff; }), false});
  const bool aero = !plant.drag_lin.isZero() || !plant.drag_quad.isZero() || !plant.wind.isZero() ||
                    (!plant.gust_amp.isZero() && plant.gust_freq != 0.0);
  probes.push_back({"drag/wind", aero,
                    with([&](PlantConfig& c) {
                      c.drag_lin = plant.drag_lin;
                      c.drag_quad = plant.drag_quad;
                      c.wind = plant.wind;
                      c.gust_amp = plant.gust_amp;
                      c.gust_freq = plant.gust_freq;
                    }),
                    false});
  probes.push_back({"rate_lag_tau", plant.rate_lag_tau > 0.0,
                    with([&](PlantConfig& c) { c.rate_lag_tau = plant.rate_lag_tau; }), true});

  RefTrajectory t = traj;
  t.alpha = alpha;
  constexpr int kPoints = 16;
  const double floor_p = std::max(plant.noise_p, 1e-12);
  const double floor_v = std::max(plant.noise_v, 1e-12);
  const double floor_r = std::max(plant.noise_att, 1e-12);
  for (const Probe& pr : probes) {
    if (!pr.active) continue;
    bool seen = false;
    for (int i = 0; i < kPoints && !seen; ++i) {
      const RefState ref = eval_from(t, traj.path_duration() * i / kPoints, 0.0);
      const Command u = feedforward_command(ref);
      PlantState ps{ref.state(), pr.lagged ? Vec3::Zero() : ref.omega, 0.0};
      PlantState ps_nom = ps;
      ps_nom.omega_actual = ref.omega;
      const StateTangent d = local_coordinates(plant_step(ps_nom, u, base, dt).x, plant_step(ps, u, pr.cfg, dt).x);
      seen = d.segment<3>(0).norm() > floor_p || d.segment<3>(3).norm() > floor_v || d.segment<3>(6).norm() > floor_r;
    }
    if (!seen)
      throw ConfigError(std::string("plant perturbation '") + pr.name +
                        "' is below the estimator noise floor at the preset's operating speeds");
  }
}

World::World(const ExperimentConfig& cfg, Policy pretrained)
    : cfg_(cfg),
      policy_(std::move(pretrained)),
      policy_opt_(policy_.net()),
      model_([&] {
        std::mt19937_64 r(mix_seed(cfg.seed, 0x6d6f64656cULL));
        return variant_model(cfg.variant, cfg.residual_hidden, r);
      }()),
      trainer_(model_,
               [&] {
                 ResidualTrainConfig rc = cfg.residual;
                 rc.seed = mix_seed(cfg.seed, rc.seed ^ 0x7265736964ULL);
                 return rc;
               }()),
      traj_(preset(cfg.preset)),
      plant_([&] {
        PlantConfig pc = cfg.plant;
        pc.seed = mix_seed(cfg.seed, pc.seed);
        return pc;
      }()),
      rng_(mix_seed(cfg.seed, 0x616e63686f72ULL)),
      history_(policy_.config().history) {
  cfg_.validate();
  traj_.alpha = cfg_.ats.alpha_init;
  check_observability(cfg_.plant, traj_, cfg_.ats.alpha_min, cfg_.bptt.dt);
  reset_to_reference();
}

void World::set_plant_config(const PlantConfig& cfg) {
  PlantConfig pc = cfg;
  pc.seed = plant_.config().seed;
  plant_.set_config(pc);
}

void World::reset_to_reference() {
  const RefState ref = eval_from(traj_, path_time_, 0.0);
  plant_.reset({ref.state(), ref.omega, t_});
  history_ = feedforward_history(ref, policy_.config().history);
  estimate_ = plant_.measure();
}

FlightLog World::fly(double seconds) {
  const double dt = cfg_.bptt.dt;
  const int n = static_cast<int>(std::lround(seconds / dt));
  const Gate gate = start_gate(traj_);
  const double s0 = path_time_;
  FlightLog log;
  // Both gate crossings of a lap must fall in this flight, so the lap is
  // flown at one alpha.
  std::optional<double> last_gate;
  log.steps.reserve(n);
  log.transitions.reserve(n);
  int done = 0;
  for (int k = 0; k < n; ++k) {
    StepLog s;
    s.iter = iter_;
    s.t = t_;
    s.x = estimate_;
    s.x_true = plant_.state().x;
    s.ref = eval_from(traj_, s0, k * dt);
    s.path_time = s0 + k * dt / traj_.alpha;
    s.alpha = traj_.alpha;
    s.history = history_;
    s.u = policy_.act(build_observation(estimate_, s.ref.state(), history_));

    plant_.step(s.u, dt);
    t_ += dt;
    history_.push(s.u);
    const State& xt = plant_.state().x;
    const bool ok = xt.valid() && xt.p.norm() <= cfg_.arena;
    log.steps.push_back(s);
    done = k + 1;
    if (!ok) {
      log.diverged = true;
      break;
    }
    const State next = plant_.measure();
    log.transitions.push_back({estimate_, s.u, next, dt, s.t});
    estimate_ = next;

    const double d0 = gate.normal.dot(s.x_true.p - gate.point);
    const double d1 = gate.normal.dot(xt.p - gate.point);
    const Vec3 vel = (xt.p - s.x_true.p) / dt;
    if (d0 < 0.0 && d1 >= 0.0 && (xt.p - gate.point).norm() < kGateRadius &&
        gate.normal.dot(vel) > kGateAlignment * vel.norm()) {
      const double tc = s.t + dt * (-d0) / (d1 - d0);
      if (last_gate) log.lap_time = tc - *last_gate;
      last_gate = tc;
    }
  }
  path_time_ = s0 + done * dt / traj_.alpha;
  if (traj_.cyclic) path_time_ = std::fmod(path_time_, traj_.path_duration());
  if (log.diverged) reset_to_reference();
  return log;
}

RealWindow make_window(const FlightLog& flight, int H, double dt, int from_end) {
  const int n = static_cast<int>(flight.steps.size()) - from_end;
  if (H < 1 || from_end < 0 || n < H) throw InconsistentWindow("window outside the flight");
  const StepLog& first = flight.steps[n - H];
  RealWindow w;
  w.path_time0 = first.path_time;
  w.alpha = first.alpha;
  w.dt = dt;
  w.history0 = first.history;
  w.samples.reserve(H);
  for (int k = n - H; k < n; ++k) w.samples.push_back({flight.steps[k].x, flight.steps[k].u});
  return w;
}

std::vector<Anchor> flight_anchors(const FlightLog& flight, Variant v, const BpttConfig& cfg, std::mt19937_64& rng) {
  std::vector<int> idx;
  for (int i = 0; i < static_cast<int>(flight.steps.size()); i += cfg.anchor_stride) idx.push_back(i);
  if (idx.empty()) throw std::invalid_argument("flight_anchors: empty flight");
  std::shuffle(idx.begin(), idx.end(), rng);
  std::uniform_int_distribution<std::size_t> pick(0, idx.size() - 1);
  std::vector<Anchor> out;
  out.reserve(cfg.n_anchors);
  for (int b = 0; b < cfg.n_anchors; ++b) {
    const StepLog& s = flight.steps[b < static_cast<int>(idx.size()) ? idx[b] : idx[pick(rng)]];
    Anchor a;
    a.path_time = s.path_time;
    if (uses_anchors(v)) {
      a.x = s.x;
      a.history = s.history;
    } else {
      a.x = s.ref.state();
      a.history = feedforward_history(s.ref, s.history.length());
    }
    out.push_back(std::move(a));
  }
  return out;
}

double peak_speed(const FlightLog& flight, double dt, double smooth_seconds) {
  const int w = std::max(1, static_cast<int>(std::lround(smooth_seconds / dt)));
  const int n = static_cast<int>(flight.steps.size());
  double best = 0.0, sum = 0.0;
  for (int k = 0; k < n; ++k) {
    sum += flight.steps[k].x_true.v.norm();
    if (k >= w) sum -= flight.steps[k - w].x_true.v.norm();
    if (k + 1 >= w) best = std::max(best, sum / w);
  }
  if (n > 0 && n < w) best = sum / n;
  return best;
}

IterationMetrics run_iteration(World& world, FlightLog* flight_out) {
  const ExperimentConfig& cfg = world.config();
  const double dt = cfg.bptt.dt;
  IterationMetrics m;
  m.iter = world.iteration();
  m.alpha = world.trajectory().alpha;
  const Policy flown = world.policy();

  FlightLog flight = world.fly(cfg.rollout_seconds);
  double sq = 0.0;
  for (const auto& s : flight.steps) sq += (s.x_true.p - s.ref.p).squaredNorm();
  m.rmse = flight.steps.empty() ? 0.0 : std::sqrt(sq / flight.steps.size());
  m.peak_speed = peak_speed(flight, dt);
  m.lap_measured = flight.lap_time > 0.0;
  m.lap_time = m.lap_measured ? flight.lap_time : world.trajectory().period();
  m.alpha_next = m.alpha;
  m.diverged = flight.diverged;

  if (!flight.diverged) {
    for (const auto& t : flight.transitions) world.buffer().push(t);
    if (trains_residual(cfg.variant))
      for (int e = 0; e < cfg.residual_epochs; ++e) world.trainer().epoch(world.model(), world.buffer());
    m.residual_loss = residual_loss(world.model(), flight.transitions, cfg.residual.weights, 0.0).data;

    double j = 0.0;
    for (int u = 0; u < cfg.policy_updates; ++u) {
      const auto anchors = flight_anchors(flight, cfg.variant, cfg.bptt, world.rng());
      j += update_policy(world.policy(), world.policy_optimizer(), world.model(), world.trajectory(), anchors,
                         cfg.bptt);
    }
    m.objective = cfg.policy_updates > 0 ? j / cfg.policy_updates : 0.0;

    const int n_fit = static_cast<int>(flight.steps.size()) / cfg.ats.H;
    const int n_win = cfg.ats_windows > 0 ? std::min(cfg.ats_windows, n_fit) : n_fit;
    double grad = 0.0;
    for (int w = 0; w < n_win; ++w) {
      const RealWindow win = make_window(flight, cfg.ats.H, dt, w * cfg.ats.H);
      const auto sens = propagate_sensitivity(world.model(), flown, world.trajectory(), win, cfg.ats);
      grad += ats_gradient(sens, cfg.ats).total();
      m.window_max_E = std::max(m.window_max_E, window_max_E(sens));
    }
    m.ats_grad = grad / n_win;
    world.set_alpha(update_alpha(world.trajectory(), m.ats_grad, cfg.ats, &world.alpha_step()).alpha);
    m.alpha_next = world.trajectory().alpha;
  }
  world.advance_iteration();
  if (flight_out) *flight_out = std::move(flight);
  return m;
}

Policy pretrain_policy(const ExperimentConfig& cfg, const PretrainCallback& cb) {
  std::mt19937_64 rng(cfg.pretrain.seed);
  Policy pol(cfg.policy, rng);
  Adam opt(pol.net());
  pretrain(pol, opt, HybridModel::nominal(), preset(cfg.preset), cfg.bptt, cfg.pretrain, cb);
  return pol;
}

void write_iters_csv(std::ostream& out, const std::vector<IterationMetrics>& its) {
  out << "iter,rmse,peak_speed,lap_time,lap_measured,alpha,alpha_next,window_max_E,ats_grad,residual_loss,"
         "objective,diverged\n";
  for (const auto& m : its)
    write_csv_row(out, {double(m.iter), m.rmse, m.peak_speed, m.lap_time, double(m.lap_measured), m.alpha,
                        m.alpha_next, m.window_max_E, m.ats_grad, m.residual_loss, m.objective,
                        double(m.diverged)});
}

void write_steps_header(std::ostream& out) {
  out << "iter,t,px,py,pz,vx,vy,vz,r00,r01,r02,r10,r11,r12,r20,r21,r22,c,wx,wy,wz,"
         "px_ref,py_ref,pz_ref,vx_ref,vy_ref,vz_ref,path_time,alpha\n";
}

void write_steps_csv(std::ostream& out, const FlightLog& flight) {
  std::vector<double> row;
  for (const auto& s : flight.steps) {
    row.assign({double(s.iter), s.t});
    for (int i = 0; i < 3; ++i) row.push_back(s.x.p(i));
    for (int i = 0; i < 3; ++i) row.push_back(s.x.v(i));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) row.push_back(s.x.R(r, c));
    row.push_back(s.u.c);
    for (int i = 0; i < 3; ++i) row.push_back(s.u.omega(i));
    for (int i = 0; i < 3; ++i) row.push_back(s.ref.p(i));
    for (int i = 0; i < 3; ++i) row.push_back(s.ref.v(i));
    row.push_back(s.path_time);
    row.push_back(s.alpha);
    write_csv_row(out, row);
  }
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, const Policy* pretrained,
                                const IterationCallback& cb) {
  cfg.validate();
  Policy pol;
  if (pretrained) {
    pol = *pretrained;
  } else if (!cfg.policy_checkpoint.empty()) {
    std::ifstream in(cfg.policy_checkpoint);
    if (!in) throw ConfigError("cannot open policy checkpoint " + cfg.policy_checkpoint);
    pol = policy_from_json(json::parse(in));
  } else {
    pol = pretrain_policy(cfg);
  }
  World world(cfg, std::move(pol));

  namespace fs = std::filesystem;
  std::ofstream steps;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    if (cfg.write_checkpoints) fs::create_directories(fs::path(out_dir) / "checkpoints");
    steps.open(fs::path(out_dir) / "steps.csv");
    write_steps_header(steps);
  }

  // Lets the start-up transient settle before anything is recorded.
  if (cfg.warmup_seconds > 0.0) world.fly(cfg.warmup_seconds);

  ExperimentResult res;
  for (int it = 0; it < cfg.n_iterations; ++it) {
    FlightLog flight;
    res.iterations.push_back(run_iteration(world, &flight));
    if (!out_dir.empty()) {
      write_steps_csv(steps, flight);
      if (cfg.write_checkpoints) {
        const fs::path dir = fs::path(out_dir) / "checkpoints";
        std::ofstream(dir / ("policy_iter" + std::to_string(it) + ".json")) << to_json(world.policy()).dump();
        std::ofstream(dir / ("residual_iter" + std::to_string(it) + ".json")) << model_json(world.model()).dump();
      }
    }
    if (cb) cb(res.iterations.back());
  }

  const auto& its = res.iterations;
  std::vector<double> alphas;
  int diverged = 0, unsafe = 0;
  for (const auto& m : its) {
    alphas.push_back(m.alpha);
    diverged += m.diverged;
    unsafe += m.window_max_E > cfg.ats.E_th + 2.0 / cfg.ats.kappa;
  }
  alphas.push_back(its.back().alpha_next);
  const double v0 = its.front().peak_speed, v1 = its.back().peak_speed;
  res.summary = {{"variant", to_string(cfg.variant)},
                 {"preset", cfg.preset},
                 {"seed", cfg.seed},
                 {"iterations", cfg.n_iterations},
                 {"alpha_trace", alphas},
                 {"final_alpha", its.back().alpha_next},
                 {"peak_speed_initial", v0},
                 {"peak_speed_final", v1},
                 {"speedup", v0 > 0.0 ? v1 / v0 : 0.0},
                 {"final_lap_time", its.back().lap_time},
                 {"final_rmse", its.back().rmse},
                 {"final_window_max_E", its.back().window_max_E},
                 {"E_th", cfg.ats.E_th},
                 {"diverged_iterations", diverged},
                 {"unsafe_iterations", unsafe}};
  if (!out_dir.empty()) {
    std::ofstream iters(fs::path(out_dir) / "iters.csv");
    write_iters_csv(iters, its);
    std::ofstream(fs::path(out_dir) / "summary.json") << res.summary.dump(2) << '\n';
  }
  return res;
}

}  // namespace agile
