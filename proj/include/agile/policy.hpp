#pragma once

// Observation layout and the collective-thrust/body-rate policy network.
// Observations are raw concatenations; the policy owns the fixed input
// normalization and the output squashing onto the actuator limits.

#include <random>
#include <vector>

#include <Eigen/Core>

#include "agile/dynamics.hpp"
#include "agile/net.hpp"
#include "json.hpp"

namespace agile {

using Observation = Eigen::VectorXd;

inline constexpr int kStateObsDim = 15;  // p, v, vec(R)

// Last L commands, oldest first, zero-padded after reset.
class ActionHistory {
 public:
  explicit ActionHistory(int length = 4);

  void push(const Command& u);
  void reset();
  int length() const { return static_cast<int>(buf_.size()); }
  // i = 0 is the oldest entry.
  const Command& operator[](int i) const { return buf_[(head_ + i) % buf_.size()]; }
  // Most recent command, or a zero command for L = 0.
  Command latest() const;
  Eigen::VectorXd to_vector() const;

 private:
  std::vector<Command> buf_;
  std::size_t head_ = 0;
};

// [p, v, vec(R), p_ref, v_ref, vec(R_ref), h]
Observation build_observation(const State& x, const State& x_ref, const ActionHistory& h);

struct PolicyConfig {
  int history = 4;
  int hidden = 256;
  CommandLimits limits;
  // Replace the state part's p, v with errors relative to the reference.
  bool error_frame = false;
  // Scale of the final layer's initial weights.
  double out_scale = 0.01;
};

struct ActRecord {
  Eigen::MatrixXd y;  // raw network outputs before squashing
  ActivationRecord net;
};

class Policy {
 public:
  Policy() = default;
  Policy(const PolicyConfig& cfg, std::mt19937_64& rng);
  // Zero-weight network of the configured architecture.
  explicit Policy(const PolicyConfig& cfg);
  // Arbitrary hidden layout, used for small test policies.
  Policy(const PolicyConfig& cfg, const std::vector<int>& hidden, std::mt19937_64& rng);

  int obs_dim() const { return 2 * kStateObsDim + 4 * cfg_.history; }
  const PolicyConfig& config() const { return cfg_; }
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }

  Command act(const Observation& o, ActRecord* record = nullptr) const;
  // Column batch; returns 4 x B command vectors [c, omega].
  Eigen::MatrixXd act_batch(const Eigen::MatrixXd& obs, ActRecord* record = nullptr) const;
  // Pulls command cotangents (4 x B) back to observation cotangents and
  // accumulates parameter gradients into grad when non-null.
  Eigen::MatrixXd act_vjp(const ActRecord& record, const Eigen::MatrixXd& g_u, ParamGradient* grad) const;
  // d command / d observation (4 x obs_dim).
  Eigen::MatrixXd jacobian(const Observation& o) const;

  // Normalized network input for a column batch of observations.
  Eigen::MatrixXd preprocess(const Eigen::MatrixXd& obs) const;

 private:
  Eigen::MatrixXd preprocess_transpose(const Eigen::MatrixXd& g) const;
  Eigen::VectorXd input_scale() const;

  PolicyConfig cfg_;
  Mlp net_;
};

Eigen::MatrixXd policy_jacobian(const Policy& pol, const Observation& o);

nlohmann::json to_json(const Policy& pol);
Policy policy_from_json(const nlohmann::json& j);

}  // namespace agile
