#pragma once

// Experiment orchestration: the fly / calibrate / improve / rescale cycle,
// ablation variants, metrics and log files.

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "agile/ats.hpp"
#include "agile/bptt.hpp"
#include "agile/dynamics.hpp"
#include "agile/plant.hpp"
#include "agile/policy.hpp"
#include "agile/reference.hpp"
#include "agile/residual.hpp"
#include "json.hpp"

namespace agile {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// baseline: nominal model, reference-reset rollouts.
// loft: acceleration-only residual, anchored rollouts.
// anchor_only: nominal model, anchored rollouts.
// residual_only: full residual, reference-reset rollouts.
// ours: full residual, anchored rollouts.
enum class Variant { kBaseline, kLoft, kAnchorOnly, kResidualOnly, kOurs };

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);
const std::vector<Variant>& all_variants();
bool trains_residual(Variant v);
bool uses_anchors(Variant v);

struct ExperimentConfig {
  std::string preset = "fig8";
  PlantConfig plant;
  BpttConfig bptt;
  AtsConfig ats;
  ResidualTrainConfig residual;
  PolicyConfig policy;
  PretrainConfig pretrain;
  Variant variant = Variant::kOurs;
  int n_iterations = 12;
  double rollout_seconds = 8.0;
  double warmup_seconds = 2.0;  // unrecorded flight before the first iteration
  int policy_updates = 20;   // per iteration
  int residual_epochs = 1;   // per iteration
  int residual_hidden = 64;
  // Consecutive H-step windows, ending at the flight's end, whose alpha
  // gradients are averaged; 0 uses every full window.
  int ats_windows = 0;
  double arena = 20.0;       // m, divergence bound on |p|
  std::uint64_t seed = 0;
  std::string policy_checkpoint;  // pretrained policy JSON; empty pretrains
  bool write_checkpoints = true;

  ExperimentConfig();
  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Missing keys keep their defaults; unknown variant or preset names throw
// ConfigError.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// Throws ConfigError if a configured plant perturbation moves a one-step
// prediction by less than the estimator noise at the preset's operating
// speeds.
void check_observability(const PlantConfig& plant, const RefTrajectory& traj, double alpha, double dt);

struct IterationMetrics {
  int iter = 0;
  double rmse = 0.0;        // m, true position vs reference
  double peak_speed = 0.0;  // m/s, max of 0.1 s smoothed |v|
  double lap_time = 0.0;    // s
  bool lap_measured = false;
  double alpha = 0.0;       // alpha flown this iteration
  double alpha_next = 0.0;  // alpha after the update
  double window_max_E = 0.0;  // over the windows used for the alpha update
  double ats_grad = 0.0;      // averaged over windows
  double residual_loss = 0.0;  // one-step data loss on this flight after calibration
  double objective = 0.0;      // mean BPTT objective over the updates
  bool diverged = false;
};

struct StepLog {
  int iter = 0;
  double t = 0.0;
  State x;          // estimate fed to the policy
  State x_true;     // plant state
  Command u;
  RefState ref;
  double path_time = 0.0;
  double alpha = 0.0;
  ActionHistory history;  // commands before this step
};

struct FlightLog {
  std::vector<StepLog> steps;
  std::vector<Transition> transitions;
  bool diverged = false;
  double lap_time = 0.0;  // last lap flown entirely within the flight, 0 if none
};

class World {
 public:
  World(const ExperimentConfig& cfg, Policy pretrained);

  // Flies the plant under the current policy and alpha. Divergence ends
  // the flight early with diverged set; the vehicle is then put back on the
  // reference.
  FlightLog fly(double seconds);

  const ExperimentConfig& config() const { return cfg_; }
  const Policy& policy() const { return policy_; }
  Policy& policy() { return policy_; }
  const HybridModel& model() const { return model_; }
  HybridModel& model() { return model_; }
  ResidualTrainer& trainer() { return trainer_; }
  Adam& policy_optimizer() { return policy_opt_; }
  const RefTrajectory& trajectory() const { return traj_; }
  void set_alpha(double alpha) { traj_.alpha = alpha; }
  AlphaStepState& alpha_step() { return alpha_step_; }
  const Plant& plant() const { return plant_; }
  // Swaps the plant's physical parameters in flight; state is kept.
  void set_plant_config(const PlantConfig& cfg);
  const ReplayBuffer& buffer() const { return buffer_; }
  ReplayBuffer& buffer() { return buffer_; }
  std::mt19937_64& rng() { return rng_; }
  int iteration() const { return iter_; }
  void advance_iteration() { ++iter_; }
  double time() const { return t_; }

 private:
  void reset_to_reference();

  ExperimentConfig cfg_;
  Policy policy_;
  Adam policy_opt_;
  HybridModel model_;
  ResidualTrainer trainer_;
  RefTrajectory traj_;
  Plant plant_;
  ReplayBuffer buffer_;
  std::mt19937_64 rng_;
  State estimate_;
  ActionHistory history_;
  double path_time_ = 0.0;
  double t_ = 0.0;
  int iter_ = 0;
  AlphaStepState alpha_step_;
};

// H steps of a flight ending `from_end` steps before its last step.
RealWindow make_window(const FlightLog& flight, int H, double dt, int from_end = 0);

// Rollout anchors for the variant drawn from a flight.
std::vector<Anchor> flight_anchors(const FlightLog& flight, Variant v, const BpttConfig& cfg, std::mt19937_64& rng);

double peak_speed(const FlightLog& flight, double dt, double smooth_seconds = 0.1);

IterationMetrics run_iteration(World& world, FlightLog* flight_out = nullptr);

Policy pretrain_policy(const ExperimentConfig& cfg, const PretrainCallback& cb = {});

struct ExperimentResult {
  std::vector<IterationMetrics> iterations;
  nlohmann::json summary;
};

using IterationCallback = std::function<void(const IterationMetrics&)>;

// Pretrains (or loads, or takes) a policy, then runs n_iterations. Writes
// steps.csv, iters.csv, summary.json and checkpoints/ under out_dir when it
// is non-empty.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const Policy* pretrained = nullptr, const IterationCallback& cb = {});

void write_iters_csv(std::ostream& out, const std::vector<IterationMetrics>& its);
void write_steps_header(std::ostream& out);
void write_steps_csv(std::ostream& out, const FlightLog& flight);

}  // namespace agile
