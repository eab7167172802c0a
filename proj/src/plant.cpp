#include "agile/plant.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace agile {

namespace {

const Vec3 kE3 = Vec3::UnitZ();
constexpr double kStageOffset[4] = {0.0, 0.5, 0.5, 1.0};

Vec3 aero_accel(const Vec3& v, const Mat3& r, const PlantConfig& cfg, double t) {
  const Vec3 vb = r.transpose() * (v - cfg.wind_at(t));
  const Vec3 f = cfg.drag_lin.cwiseProduct(vb) + cfg.drag_quad.cwiseProduct(vb.cwiseAbs().cwiseProduct(vb));
  return -(r * f) / cfg.mass_scale;
}

Vec3 json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

}  // namespace

PlantConfig PlantConfig::nominal() {
  PlantConfig c;
  c.rate_lag_tau = 0.0;
  c.noise_p = 0.0;
  c.noise_v = 0.0;
  c.noise_att = 0.0;
  return c;
}

Vec3 PlantConfig::wind_at(double t) const {
  if (gust_freq == 0.0) return wind;
  return wind + gust_amp * std::sin(2.0 * std::numbers::pi * gust_freq * t);
}

void PlantConfig::validate() const {
  if (!(mass_scale > 0.0)) throw std::invalid_argument("mass_scale must be positive");
  if (!(thrust_eff > 0.0 && thrust_eff <= 1.0)) throw std::invalid_argument("thrust_eff must be in (0, 1]");
  if (!(rate_lag_tau >= 0.0)) throw std::invalid_argument("rate_lag_tau must be nonnegative");
  if (noise_p < 0.0 || noise_v < 0.0 || noise_att < 0.0) throw std::invalid_argument("noise must be nonnegative");
  if ((drag_lin.array() < 0.0).any() || (drag_quad.array() < 0.0).any())
    throw std::invalid_argument("drag coefficients must be nonnegative");
}

Vec3 disturbance_accel(const State& x, const Command& u, const PlantConfig& cfg, double t) {
  const double c_eff = u.c * cfg.thrust_eff / cfg.mass_scale;
  return (c_eff - u.c) * (x.R * kE3) + aero_accel(x.v, x.R, cfg, t);
}

PlantState plant_step(const PlantState& ps, const Command& u, const PlantConfig& cfg, double dt) {
  PlantState next;
  if (cfg.rate_lag_tau > 0.0) {
    next.omega_actual = ps.omega_actual + (dt / cfg.rate_lag_tau) * (u.omega - ps.omega_actual);
  } else {
    next.omega_actual = u.omega;
  }
  const double c_eff = u.c * cfg.thrust_eff / cfg.mass_scale;
  const Vec3 w = next.omega_actual;
  auto rates = [&](const Vec3&, const Vec3& v, const Mat3& r, int i) {
    const Vec3 aero = aero_accel(v, r, cfg, ps.t + kStageOffset[i] * dt);
    return std::pair<Vec3, Vec3>{c_eff * (r * kE3) - kGravity * kE3 + aero, w + Vec3::Zero()};
  };
  next.x = lie_rk4(ps.x, dt, rates);
  next.t = ps.t + dt;
  return next;
}

State measure(const PlantState& ps, const PlantConfig& cfg, std::mt19937_64& rng) {
  State y = ps.x;
  auto noise = [&](double sigma) {
    if (sigma == 0.0) return Vec3::Zero().eval();
    std::normal_distribution<double> n(0.0, sigma);
    return Vec3(n(rng), n(rng), n(rng));
  };
  y.p += noise(cfg.noise_p);
  y.v += noise(cfg.noise_v);
  if (cfg.noise_att > 0.0) y.R = y.R * exp_so3(noise(cfg.noise_att));
  return y;
}

Plant::Plant(PlantConfig cfg, PlantState init) : cfg_(cfg), state_(init), rng_(cfg.seed) { cfg_.validate(); }

nlohmann::json to_json(const PlantConfig& c) {
  auto v = [](const Vec3& x) { return std::vector<double>{x.x(), x.y(), x.z()}; };
  return {{"mass_scale", c.mass_scale}, {"thrust_eff", c.thrust_eff}, {"drag_lin", v(c.drag_lin)},
          {"drag_quad", v(c.drag_quad)}, {"wind", v(c.wind)},           {"gust_amp", v(c.gust_amp)},
          {"gust_freq", c.gust_freq},   {"rate_lag_tau", c.rate_lag_tau}, {"noise_p", c.noise_p},
          {"noise_v", c.noise_v},       {"noise_att", c.noise_att},   {"seed", c.seed}};
}

PlantConfig plant_config_from_json(const nlohmann::json& j) {
  PlantConfig c;
  if (j.contains("mass_scale")) c.mass_scale = j["mass_scale"].get<double>();
  if (j.contains("thrust_eff")) c.thrust_eff = j["thrust_eff"].get<double>();
  if (j.contains("drag_lin")) c.drag_lin = json_vec(j["drag_lin"]);
  if (j.contains("drag_quad")) c.drag_quad = json_vec(j["drag_quad"]);
  if (j.contains("wind")) c.wind = json_vec(j["wind"]);
  if (j.contains("gust_amp")) c.gust_amp = json_vec(j["gust_amp"]);
  if (j.contains("gust_freq")) c.gust_freq = j["gust_freq"].get<double>();
  if (j.contains("rate_lag_tau")) c.rate_lag_tau = j["rate_lag_tau"].get<double>();
  if (j.contains("noise_p")) c.noise_p = j["noise_p"].get<double>();
  if (j.contains("noise_v")) c.noise_v = j["noise_v"].get<double>();
  if (j.contains("noise_att")) c.noise_att = j["noise_att"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  c.validate();
  return c;
}

}  // namespace agile
