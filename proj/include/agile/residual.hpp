#pragma once

// Replay buffer and online training of the residual dynamics network on
// integrated one-step prediction error.

#include <cstdint>
#include <deque>
#include <iosfwd>
#include <random>
#include <stdexcept>
#include <vector>

#include "agile/dynamics.hpp"
#include "agile/net.hpp"

namespace agile {

class EmptyBatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Transition {
  State x;
  Command u;
  State x_next;
  double dt = kDefaultDt;
  double timestamp = 0.0;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 500) : capacity_(capacity) {}

  // Throws std::invalid_argument on a timestamp older than the newest entry
  // or an invalid transition.
  void push(const Transition& t);
  void clear() { window_.clear(); }

  std::size_t size() const { return window_.size(); }
  bool empty() const { return window_.empty(); }
  std::size_t capacity() const { return capacity_; }
  // Oldest first.
  const Transition& operator[](std::size_t i) const { return window_[i]; }
  std::vector<Transition> snapshot() const { return {window_.begin(), window_.end()}; }

 private:
  std::size_t capacity_;
  std::deque<Transition> window_;
};

struct DiscrepancyWeights {
  double w_p = 1.0;
  double w_v = 0.25;
  double w_R = 0.5;
};

double discrepancy(const State& a, const State& b, const DiscrepancyWeights& w);
// Tangent gradient with respect to the second argument.
StateTangent discrepancy_grad(const State& a, const State& b, const DiscrepancyWeights& w);

struct ResidualLoss {
  double data = 0.0;     // mean one-step discrepancy
  double penalty = 0.0;  // lambda_reg * sum of spectral norms
  double total() const { return data + penalty; }
  ParamGradient grad;
};

// Spectral norms use `spectral` when given (warm-started), else a fresh
// estimator with its default iteration count.
ResidualLoss residual_loss(const HybridModel& model, const std::vector<Transition>& batch,
                           const DiscrepancyWeights& w, double lambda_reg,
                           SpectralPenalty* spectral = nullptr);

struct ResidualTrainConfig {
  int batch = 64;
  int n_batches = 20;
  double lr = 1e-3;
  double lambda_reg = 1e-3;
  double grad_clip = 10.0;
  DiscrepancyWeights weights;
  std::uint64_t seed = 0;
};

// Holds optimizer and sampling state across epochs.
class ResidualTrainer {
 public:
  ResidualTrainer(const HybridModel& model, ResidualTrainConfig cfg);

  // n_batches minibatch steps. Returns the mean minibatch loss.
  double epoch(HybridModel& model, const ReplayBuffer& buf);
  const ResidualTrainConfig& config() const { return cfg_; }

 private:
  ResidualTrainConfig cfg_;
  Adam adam_;
  SpectralPenalty spectral_;
  std::mt19937_64 rng_;
};

// One epoch with fresh optimizer state.
HybridModel train_epoch(const HybridModel& model, const ReplayBuffer& buf, const ResidualTrainConfig& cfg);

// Columns: t, p(3), v(3), R(9 row-major), c, omega_cmd(3). Consecutive rows
// form transitions; a row with a NaN command closes a contiguous run.
void write_transitions_csv(std::ostream& out, const std::vector<Transition>& transitions);
std::vector<Transition> read_transitions_csv(std::istream& in);

}  // namespace agile
