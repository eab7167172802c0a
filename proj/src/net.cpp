#include "agile/net.hpp"

#include <cmath>

namespace agile {

namespace {

constexpr int kCheckpointVersion = 1;

Eigen::MatrixXd apply(Activation a, const Eigen::MatrixXd& z) {
  switch (a) {
    case Activation::kTanh:
      return z.array().tanh().matrix();
    case Activation::kIdentity:
      break;
  }
  return z;
}

// Multiplies the cotangent of a layer output by the activation slope.
void backprop_activation(Activation a, const Eigen::MatrixXd& out, Eigen::MatrixXd& g) {
  if (a == Activation::kTanh) {
    g.array() *= (1.0 - out.array().square());
  }
}

}  // namespace

std::string to_string(Activation a) {
  return a == Activation::kTanh ? "tanh" : "identity";
}

Activation activation_from_string(const std::string& s) {
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation tag: " + s);
}

void ParamSet::set_zero() {
  for (auto& m : w) m.setZero();
  for (auto& v : b) v.setZero();
}

double ParamSet::squared_norm() const {
  double s = 0.0;
  for (const auto& m : w) s += m.squaredNorm();
  for (const auto& v : b) s += v.squaredNorm();
  return s;
}

void ParamSet::scale(double s) {
  for (auto& m : w) m *= s;
  for (auto& v : b) v *= s;
}

void ParamSet::add_scaled(const ParamSet& other, double s) {
  if (!congruent(other)) throw DimensionMismatch("ParamSet::add_scaled: shape mismatch");
  for (std::size_t l = 0; l < w.size(); ++l) {
    w[l] += s * other.w[l];
    b[l] += s * other.b[l];
  }
}

bool ParamSet::congruent(const ParamSet& other) const {
  if (w.size() != other.w.size() || b.size() != other.b.size()) return false;
  for (std::size_t l = 0; l < w.size(); ++l) {
    if (w[l].rows() != other.w[l].rows() || w[l].cols() != other.w[l].cols()) return false;
    if (b[l].size() != other.b[l].size()) return false;
  }
  return true;
}

std::size_t ParamSet::size() const {
  std::size_t n = 0;
  for (const auto& m : w) n += static_cast<std::size_t>(m.size());
  for (const auto& v : b) n += static_cast<std::size_t>(v.size());
  return n;
}

Mlp::Mlp(const std::vector<int>& dims, const std::vector<Activation>& activations)
    : acts_(activations) {
  if (dims.size() != activations.size() + 1 || activations.empty()) {
    throw DimensionMismatch("Mlp: dims must have one more entry than activations");
  }
  in_dim_ = dims.front();
  out_dim_ = dims.back();
  for (std::size_t l = 0; l < activations.size(); ++l) {
    params_.w.push_back(Eigen::MatrixXd::Zero(dims[l + 1], dims[l]));
    params_.b.push_back(Eigen::VectorXd::Zero(dims[l + 1]));
  }
}

Mlp Mlp::random(const std::vector<int>& dims, const std::vector<Activation>& activations,
                std::mt19937_64& rng, double out_scale) {
  Mlp net(dims, activations);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double bound = std::sqrt(6.0 / dims[l]);
    std::uniform_real_distribution<double> dist(-bound, bound);
    auto& w = net.params_.w[l];
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
      for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = dist(rng);
    }
  }
  net.params_.w.back() *= out_scale;
  return net;
}

std::vector<int> Mlp::dims() const {
  std::vector<int> d{in_dim_};
  for (const auto& w : params_.w) d.push_back(static_cast<int>(w.rows()));
  return d;
}

ParamGradient Mlp::zero_gradient() const {
  ParamGradient g = params_;
  g.set_zero();
  return g;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, ActivationRecord* record) const {
  if (x.rows() != in_dim_) {
    throw DimensionMismatch("Mlp::forward: expected input dim " + std::to_string(in_dim_) +
                            ", got " + std::to_string(x.rows()));
  }
  if (record) {
    record->inputs.clear();
    record->outputs.clear();
  }
  Eigen::MatrixXd h = x;
  for (std::size_t l = 0; l < acts_.size(); ++l) {
    Eigen::MatrixXd z = params_.w[l] * h;
    z.colwise() += params_.b[l];
    Eigen::MatrixXd out = apply(acts_[l], z);
    if (record) {
      record->inputs.push_back(std::move(h));
      record->outputs.push_back(out);
    }
    h = std::move(out);
  }
  return h;
}

Eigen::MatrixXd Mlp::vjp(const ActivationRecord& record, const Eigen::MatrixXd& cotangent,
                         ParamGradient* grad) const {
  if (record.outputs.size() != acts_.size()) {
    throw DimensionMismatch("Mlp::vjp: record does not match network depth");
  }
  if (cotangent.rows() != out_dim_ || cotangent.cols() != record.outputs.back().cols()) {
    throw DimensionMismatch("Mlp::vjp: cotangent shape mismatch");
  }
  Eigen::MatrixXd g = cotangent;
  for (std::size_t k = acts_.size(); k-- > 0;) {
    backprop_activation(acts_[k], record.outputs[k], g);
    if (grad) {
      grad->w[k].noalias() += g * record.inputs[k].transpose();
      grad->b[k] += g.rowwise().sum();
    }
    g = params_.w[k].transpose() * g;
  }
  return g;
}

Eigen::MatrixXd Mlp::jacobian(const Eigen::VectorXd& x) const {
  ActivationRecord rec;
  forward(x, &rec);
  Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(out_dim_, out_dim_);
  for (std::size_t k = acts_.size(); k-- > 0;) {
    if (acts_[k] == Activation::kTanh) {
      jac *= (1.0 - rec.outputs[k].col(0).array().square()).matrix().asDiagonal();
    }
    jac = jac * params_.w[k];
  }
  return jac;
}

bool Mlp::all_finite() const {
  for (std::size_t l = 0; l < acts_.size(); ++l) {
    if (!params_.w[l].allFinite() || !params_.b[l].allFinite()) return false;
  }
  return true;
}

Mlp sgd_step(const Mlp& net, const ParamGradient& grad, double lr) {
  if (!net.params().congruent(grad)) {
    throw DimensionMismatch("sgd_step: gradient shape does not match network");
  }
  Mlp out = net;
  out.params().add_scaled(grad, -lr);
  return out;
}

double clip_grad_norm(ParamGradient& grad, double max_norm) {
  const double norm = std::sqrt(grad.squared_norm());
  if (norm > max_norm && norm > 0.0) grad.scale(max_norm / norm);
  return norm;
}

Adam::Adam(const Mlp& net, AdamConfig cfg) : cfg_(cfg), m_(net.zero_gradient()), v_(net.zero_gradient()) {}

void Adam::step(Mlp& net, const ParamGradient& grad, double lr) {
  if (!m_.congruent(grad) || !net.params().congruent(grad)) {
    throw DimensionMismatch("Adam::step: gradient shape does not match network");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  auto update = [&](auto& p, auto& m, auto& v, const auto& g) {
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
  };
  auto& params = net.params();
  for (std::size_t l = 0; l < params.w.size(); ++l) {
    update(params.w[l], m_.w[l], v_.w[l], grad.w[l]);
    update(params.b[l], m_.b[l], v_.b[l], grad.b[l]);
  }
}

namespace {

Eigen::VectorXd power_start(Eigen::Index n) {
  // Fixed, non-degenerate start vector so results do not depend on an RNG.
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = 1.0 + 0.5 * std::sin(1.7 * static_cast<double>(i) + 0.3);
  return v.normalized();
}

// One power-iteration sweep on W^T W; returns sigma estimate |W v|.
double power_sweep(const Eigen::MatrixXd& w, Eigen::VectorXd& v, int iters, Eigen::VectorXd* u_out) {
  Eigen::VectorXd u = w * v;
  double sigma = u.norm();
  for (int i = 0; i < iters && sigma > 0.0; ++i) {
    Eigen::VectorXd next = w.transpose() * u;
    const double n = next.norm();
    if (n == 0.0) break;
    v = next / n;
    u = w * v;
    sigma = u.norm();
  }
  if (u_out) *u_out = sigma > 0.0 ? Eigen::VectorXd(u / sigma) : Eigen::VectorXd::Zero(w.rows());
  return sigma;
}

}  // namespace

double spectral_norm(const Eigen::MatrixXd& w, int iters) {
  if (iters < 1) throw std::invalid_argument("spectral_norm: iters must be >= 1");
  Eigen::VectorXd v = power_start(w.cols());
  return power_sweep(w, v, iters, nullptr);
}

double SpectralPenalty::evaluate(const Mlp& net, ParamGradient* grad, double scale) {
  const auto& params = net.params();
  if (v_.size() != params.w.size()) {
    v_.clear();
    for (const auto& w : params.w) v_.push_back(power_start(w.cols()));
  }
  double total = 0.0;
  for (std::size_t l = 0; l < params.w.size(); ++l) {
    Eigen::VectorXd u;
    const double sigma = power_sweep(params.w[l], v_[l], iters_, &u);
    total += sigma;
    if (grad && sigma > 0.0) grad->w[l].noalias() += scale * u * v_[l].transpose();
  }
  return total;
}

nlohmann::json to_json(const Mlp& net) {
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  const auto dims = net.dims();
  nlohmann::json layers = nlohmann::json::array();
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    layers.push_back({{"in", dims[l]}, {"out", dims[l + 1]}, {"activation", to_string(net.activations()[l])}});
  }
  j["layers"] = layers;
  std::vector<double> flat;
  flat.reserve(net.params().size());
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const auto& w = net.params().w[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) flat.push_back(w(r, c));
    const auto& b = net.params().b[l];
    for (Eigen::Index r = 0; r < b.size(); ++r) flat.push_back(b(r));
  }
  j["params"] = flat;
  return j;
}

Mlp mlp_from_json(const nlohmann::json& j) {
  if (j.at("format_version").get<int>() != kCheckpointVersion) {
    throw std::runtime_error("network checkpoint: unsupported format version");
  }
  std::vector<int> dims;
  std::vector<Activation> acts;
  for (const auto& layer : j.at("layers")) {
    if (dims.empty()) dims.push_back(layer.at("in").get<int>());
    if (layer.at("in").get<int>() != dims.back()) {
      throw DimensionMismatch("network checkpoint: layer dimensions do not chain");
    }
    dims.push_back(layer.at("out").get<int>());
    acts.push_back(activation_from_string(layer.at("activation").get<std::string>()));
  }
  Mlp net(dims, acts);
  const auto flat = j.at("params").get<std::vector<double>>();
  if (flat.size() != net.params().size()) {
    throw DimensionMismatch("network checkpoint: parameter count mismatch");
  }
  std::size_t k = 0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    auto& w = net.params().w[l];
    for (Eigen::Index r = 0; r < w.rows(); ++r)
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = flat[k++];
    auto& b = net.params().b[l];
    for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = flat[k++];
  }
  return net;
}

}  // namespace agile
