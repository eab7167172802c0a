#pragma once

// Ground-truth simulated vehicle: nominal dynamics plus mass/thrust changes,
// body-frame drag in a wind field, first-order body-rate lag, and
// motion-capture style estimator noise.

#include <cstdint>
#include <random>

#include "agile/dynamics.hpp"
#include "json.hpp"

namespace agile {

struct PlantConfig {
  double mass_scale = 1.0;
  double thrust_eff = 1.0;
  Vec3 drag_lin = Vec3::Zero();   // 1/s, body frame
  Vec3 drag_quad = Vec3::Zero();  // 1/m, body frame, off by default
  Vec3 wind = Vec3::Zero();       // m/s
  Vec3 gust_amp = Vec3::Zero();   // m/s, sinusoidal gust on top of wind
  double gust_freq = 0.0;         // Hz
  double rate_lag_tau = 0.05;
  double noise_p = 0.002;
  double noise_v = 0.02;
  double noise_att = 0.2 * 3.14159265358979323846 / 180.0;  // rad
  std::uint64_t seed = 0;

  // Zero lag, zero noise, no disturbances.
  static PlantConfig nominal();

  Vec3 wind_at(double t) const;
  bool noiseless() const { return noise_p == 0.0 && noise_v == 0.0 && noise_att == 0.0; }
  void validate() const;
};

struct PlantState {
  State x;
  Vec3 omega_actual = Vec3::Zero();
  double t = 0.0;
};

PlantState plant_step(const PlantState& ps, const Command& u, const PlantConfig& cfg, double dt);

// Specific force from aerodynamics and mass/thrust changes, excluding the
// nominal c R e3 - g e3 terms; exposed for experiment-setup checks.
Vec3 disturbance_accel(const State& x, const Command& u, const PlantConfig& cfg, double t);

// Noisy state estimate. The generator is owned by the caller so measurement
// sequences are reproducible from cfg.seed.
State measure(const PlantState& ps, const PlantConfig& cfg, std::mt19937_64& rng);

// Plant plus its measurement generator seeded from cfg.seed.
class Plant {
 public:
  explicit Plant(PlantConfig cfg, PlantState init = {});

  void step(const Command& u, double dt) { state_ = plant_step(state_, u, cfg_, dt); }
  State measure() { return agile::measure(state_, cfg_, rng_); }
  void reset(const PlantState& s) { state_ = s; }
  // New physical parameters; the measurement generator keeps its stream.
  void set_config(const PlantConfig& cfg) {
    cfg.validate();
    cfg_ = cfg;
  }

  const PlantState& state() const { return state_; }
  const PlantConfig& config() const { return cfg_; }

 private:
  PlantConfig cfg_;
  PlantState state_;
  std::mt19937_64 rng_;
};

nlohmann::json to_json(const PlantConfig& cfg);
// Missing keys keep their defaults.
PlantConfig plant_config_from_json(const nlohmann::json& j);

}  // namespace agile
