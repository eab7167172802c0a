#pragma once

// Small dense feed-forward networks with hand-written reverse-mode products.
// Samples are stored column-wise, so a batch is an (in_dim x B) matrix.

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

namespace agile {

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Activation { kIdentity, kTanh };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& s);

// Weight/bias container. Doubles as the gradient and optimizer-moment type.
struct ParamSet {
  std::vector<Eigen::MatrixXd> w;
  std::vector<Eigen::VectorXd> b;

  void set_zero();
  double squared_norm() const;
  void scale(double s);
  void add_scaled(const ParamSet& other, double s);
  bool congruent(const ParamSet& other) const;
  std::size_t size() const;
};

using ParamGradient = ParamSet;

struct ActivationRecord {
  // inputs[l] feeds layer l; outputs[l] is layer l after its activation.
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<Eigen::MatrixXd> outputs;
};

class Mlp {
 public:
  Mlp() = default;
  // Zero-initialized network; dims has one more entry than activations.
  Mlp(const std::vector<int>& dims, const std::vector<Activation>& activations);

  // He-style uniform fan-in initialization, zero biases. The last layer's
  // weights are multiplied by out_scale (0 gives a zero output layer).
  static Mlp random(const std::vector<int>& dims,
                    const std::vector<Activation>& activations,
                    std::mt19937_64& rng, double out_scale = 1.0);

  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }
  std::size_t num_layers() const { return acts_.size(); }
  const std::vector<Activation>& activations() const { return acts_; }
  std::vector<int> dims() const;

  const ParamSet& params() const { return params_; }
  ParamSet& params() { return params_; }

  ParamGradient zero_gradient() const;

  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, ActivationRecord* record = nullptr) const;

  // Returns the input cotangent. Parameter gradients are accumulated into
  // grad when it is non-null.
  Eigen::MatrixXd vjp(const ActivationRecord& record, const Eigen::MatrixXd& cotangent,
                      ParamGradient* grad) const;

  // d output / d input at a single sample (out_dim x in_dim).
  Eigen::MatrixXd jacobian(const Eigen::VectorXd& x) const;

  bool all_finite() const;

 private:
  int in_dim_ = 0;
  int out_dim_ = 0;
  std::vector<Activation> acts_;
  ParamSet params_;
};

// params <- params - lr * grad
Mlp sgd_step(const Mlp& net, const ParamGradient& grad, double lr);

// Rescales grad in place so its global norm is at most max_norm. Returns the
// norm before clipping.
double clip_grad_norm(ParamGradient& grad, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  Adam(const Mlp& net, AdamConfig cfg = {});
  // Descent step: params <- params - lr * m_hat / (sqrt(v_hat) + eps).
  void step(Mlp& net, const ParamGradient& grad, double lr);
  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  ParamSet m_;
  ParamSet v_;
  long t_ = 0;
};

// Largest singular value by power iteration from a fixed start vector.
double spectral_norm(const Eigen::MatrixXd& w, int iters);

// Warm-started power iteration over every weight matrix of a network.
class SpectralPenalty {
 public:
  explicit SpectralPenalty(int iters = 10) : iters_(iters) {}
  // Returns sum_l sigma_max(W_l) and adds scale * u_l v_l^T into grad->w[l].
  double evaluate(const Mlp& net, ParamGradient* grad, double scale);

 private:
  int iters_;
  std::vector<Eigen::VectorXd> v_;
};

nlohmann::json to_json(const Mlp& net);
Mlp mlp_from_json(const nlohmann::json& j);

}  // namespace agile
