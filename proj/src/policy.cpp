#include "agile/policy.hpp"

#include <cmath>
#include <stdexcept>

namespace agile {

namespace {

double sigmoid(double y) {
  if (y >= 0.0) return 1.0 / (1.0 + std::exp(-y));
  const double e = std::exp(y);
  return e / (1.0 + e);
}

std::vector<Activation> hidden_acts(std::size_t n_hidden) {
  std::vector<Activation> acts(n_hidden, Activation::kTanh);
  acts.push_back(Activation::kIdentity);
  return acts;
}

std::vector<int> layer_dims(int in, const std::vector<int>& hidden) {
  std::vector<int> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(4);
  return dims;
}

}  // namespace

ActionHistory::ActionHistory(int length) {
  if (length < 0) throw std::invalid_argument("history length must be nonnegative");
  buf_.assign(static_cast<std::size_t>(length), Command{0.0, Vec3::Zero()});
}

void ActionHistory::push(const Command& u) {
  if (buf_.empty()) return;
  buf_[head_] = u;
  head_ = (head_ + 1) % buf_.size();
}

void ActionHistory::reset() {
  std::fill(buf_.begin(), buf_.end(), Command{0.0, Vec3::Zero()});
  head_ = 0;
}

Command ActionHistory::latest() const {
  if (buf_.empty()) return {0.0, Vec3::Zero()};
  return (*this)[length() - 1];
}

Eigen::VectorXd ActionHistory::to_vector() const {
  Eigen::VectorXd out(4 * length());
  for (int i = 0; i < length(); ++i) out.segment<4>(4 * i) = (*this)[i].to_vector();
  return out;
}

Observation build_observation(const State& x, const State& x_ref, const ActionHistory& h) {
  Observation o(2 * kStateObsDim + 4 * h.length());
  o << x.p, x.v, vec(x.R), x_ref.p, x_ref.v, vec(x_ref.R), h.to_vector();
  return o;
}

Policy::Policy(const PolicyConfig& cfg, std::mt19937_64& rng)
    : Policy(cfg, std::vector<int>{cfg.hidden, cfg.hidden}, rng) {}

Policy::Policy(const PolicyConfig& cfg) : cfg_(cfg) {
  net_ = Mlp(layer_dims(obs_dim(), {cfg.hidden, cfg.hidden}), hidden_acts(2));
}

Policy::Policy(const PolicyConfig& cfg, const std::vector<int>& hidden, std::mt19937_64& rng) : cfg_(cfg) {
  net_ = Mlp::random(layer_dims(obs_dim(), hidden), hidden_acts(hidden.size()), rng, cfg.out_scale);
}

Eigen::VectorXd Policy::input_scale() const {
  const auto& lim = cfg_.limits;
  Eigen::VectorXd s(obs_dim());
  for (int part = 0; part < 2; ++part) {
    s.segment<3>(part * kStateObsDim).setConstant(1.0 / 5.0);
    s.segment<3>(part * kStateObsDim + 3).setConstant(1.0 / 10.0);
    s.segment<9>(part * kStateObsDim + 6).setOnes();
  }
  for (int i = 0; i < cfg_.history; ++i) {
    s(2 * kStateObsDim + 4 * i) = 1.0 / lim.c_max;
    s.segment<3>(2 * kStateObsDim + 4 * i + 1).setConstant(1.0 / lim.omega_max);
  }
  return s;
}

Eigen::MatrixXd Policy::preprocess(const Eigen::MatrixXd& obs) const {
  if (obs.rows() != obs_dim()) throw DimensionMismatch("policy: observation has wrong length");
  Eigen::MatrixXd z = obs;
  if (cfg_.error_frame) z.topRows(6) -= obs.middleRows(kStateObsDim, 6);
  return input_scale().asDiagonal() * z;
}

Eigen::MatrixXd Policy::preprocess_transpose(const Eigen::MatrixXd& g) const {
  Eigen::MatrixXd out = input_scale().asDiagonal() * g;
  if (cfg_.error_frame) out.middleRows(kStateObsDim, 6) -= out.topRows(6);
  return out;
}

Eigen::MatrixXd Policy::act_batch(const Eigen::MatrixXd& obs, ActRecord* record) const {
  Eigen::MatrixXd y = net_.forward(preprocess(obs), record ? &record->net : nullptr);
  const auto& lim = cfg_.limits;
  Eigen::MatrixXd u(4, y.cols());
  for (Eigen::Index b = 0; b < y.cols(); ++b) {
    u(0, b) = lim.c_min + (lim.c_max - lim.c_min) * sigmoid(y(0, b));
    for (int i = 1; i < 4; ++i) u(i, b) = lim.omega_max * std::tanh(y(i, b));
  }
  if (record) record->y = std::move(y);
  return u;
}

Command Policy::act(const Observation& o, ActRecord* record) const {
  return Command::from_vector(act_batch(o, record).col(0));
}

Eigen::MatrixXd Policy::act_vjp(const ActRecord& record, const Eigen::MatrixXd& g_u, ParamGradient* grad) const {
  const auto& lim = cfg_.limits;
  Eigen::MatrixXd g_y(4, g_u.cols());
  for (Eigen::Index b = 0; b < g_u.cols(); ++b) {
    const double s = sigmoid(record.y(0, b));
    g_y(0, b) = g_u(0, b) * (lim.c_max - lim.c_min) * s * (1.0 - s);
    for (int i = 1; i < 4; ++i) {
      const double t = std::tanh(record.y(i, b));
      g_y(i, b) = g_u(i, b) * lim.omega_max * (1.0 - t * t);
    }
  }
  return preprocess_transpose(net_.vjp(record.net, g_y, grad));
}

Eigen::MatrixXd Policy::jacobian(const Observation& o) const {
  ActRecord rec;
  act_batch(o.replicate(1, 4), &rec);
  return act_vjp(rec, Eigen::MatrixXd::Identity(4, 4), nullptr).transpose();
}

Eigen::MatrixXd policy_jacobian(const Policy& pol, const Observation& o) { return pol.jacobian(o); }

nlohmann::json to_json(const Policy& pol) {
  const auto& c = pol.config();
  return {{"history", c.history},
          {"hidden", c.hidden},
          {"error_frame", c.error_frame},
          {"limits", {{"c_min", c.limits.c_min}, {"c_max", c.limits.c_max}, {"omega_max", c.limits.omega_max}}},
          {"obs_scale", {{"position", 5.0}, {"velocity", 10.0}, {"rotation", 1.0}}},
          {"net", to_json(pol.net())}};
}

Policy policy_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.history = j.at("history").get<int>();
  c.hidden = j.at("hidden").get<int>();
  c.error_frame = j.at("error_frame").get<bool>();
  const auto& lim = j.at("limits");
  c.limits.c_min = lim.at("c_min").get<double>();
  c.limits.c_max = lim.at("c_max").get<double>();
  c.limits.omega_max = lim.at("omega_max").get<double>();
  Policy pol(c);
  Mlp net = mlp_from_json(j.at("net"));
  if (net.in_dim() != pol.obs_dim() || net.out_dim() != 4)
    throw DimensionMismatch("policy checkpoint: network does not match the observation layout");
  pol.net() = std::move(net);
  return pol;
}

}  // namespace agile
