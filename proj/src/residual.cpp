#include "agile/residual.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace agile {

void ReplayBuffer::push(const Transition& t) {
  if (!(t.dt > 0.0)) throw std::invalid_argument("transition dt must be positive");
  if (!t.x.valid() || !t.x_next.valid()) throw std::invalid_argument("transition holds an invalid state");
  if (!window_.empty() && t.timestamp < window_.back().timestamp)
    throw std::invalid_argument("transition timestamps must be nondecreasing");
  if (capacity_ == 0) return;
  if (window_.size() == capacity_) window_.pop_front();
  window_.push_back(t);
}

double discrepancy(const State& a, const State& b, const DiscrepancyWeights& w) {
  return w.w_p * (a.p - b.p).squaredNorm() + w.w_v * (a.v - b.v).squaredNorm() +
         w.w_R * geodesic_sq(a.R, b.R);
}

StateTangent discrepancy_grad(const State& a, const State& b, const DiscrepancyWeights& w) {
  StateTangent g;
  g << 2.0 * w.w_p * (b.p - a.p), 2.0 * w.w_v * (b.v - a.v), w.w_R * geodesic_sq_grad(a.R, b.R).d_second;
  return g;
}

ResidualLoss residual_loss(const HybridModel& model, const std::vector<Transition>& batch,
                           const DiscrepancyWeights& w, double lambda_reg, SpectralPenalty* spectral) {
  if (batch.empty()) throw EmptyBatch("residual_loss: empty batch");
  ResidualLoss out;
  out.grad = model.residual.zero_gradient();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  StepRecord rec;
  for (const auto& t : batch) {
    const State pred = step(model, t.x, t.u, t.dt, &rec);
    out.data += inv_n * discrepancy(t.x_next, pred, w);
    if (model.residual_active()) step_vjp(model, rec, inv_n * discrepancy_grad(t.x_next, pred, w), &out.grad);
  }
  if (model.residual_active() && lambda_reg != 0.0) {
    SpectralPenalty local;
    SpectralPenalty& sp = spectral ? *spectral : local;
    out.penalty = lambda_reg * sp.evaluate(model.residual, &out.grad, lambda_reg);
  }
  return out;
}

ResidualTrainer::ResidualTrainer(const HybridModel& model, ResidualTrainConfig cfg)
    : cfg_(cfg), adam_(model.residual), rng_(cfg.seed) {}

double ResidualTrainer::epoch(HybridModel& model, const ReplayBuffer& buf) {
  if (buf.empty()) throw EmptyBatch("train_epoch: empty replay buffer");
  if (!model.residual_active()) return 0.0;
  std::uniform_int_distribution<std::size_t> pick(0, buf.size() - 1);
  std::vector<Transition> batch(static_cast<std::size_t>(cfg_.batch));
  double mean = 0.0;
  for (int b = 0; b < cfg_.n_batches; ++b) {
    for (auto& t : batch) t = buf[pick(rng_)];
    ResidualLoss loss = residual_loss(model, batch, cfg_.weights, cfg_.lambda_reg, &spectral_);
    clip_grad_norm(loss.grad, cfg_.grad_clip);
    adam_.step(model.residual, loss.grad, cfg_.lr);
    mean += loss.total() / cfg_.n_batches;
  }
  return mean;
}

HybridModel train_epoch(const HybridModel& model, const ReplayBuffer& buf, const ResidualTrainConfig& cfg) {
  HybridModel out = model;
  ResidualTrainer trainer(out, cfg);
  trainer.epoch(out, buf);
  return out;
}

namespace {

void write_row(std::ostream& out, double t, const State& x, const Command& u) {
  out << t;
  for (int i = 0; i < 3; ++i) out << ',' << x.p(i);
  for (int i = 0; i < 3; ++i) out << ',' << x.v(i);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out << ',' << x.R(r, c);
  out << ',' << u.c;
  for (int i = 0; i < 3; ++i) out << ',' << u.omega(i);
  out << '\n';
}

bool same_state(const State& a, const State& b) { return a.p == b.p && a.v == b.v && a.R == b.R; }

}  // namespace

void write_transitions_csv(std::ostream& out, const std::vector<Transition>& transitions) {
  const auto old_precision = out.precision(17);
  out << "t,px,py,pz,vx,vy,vz,r00,r01,r02,r10,r11,r12,r20,r21,r22,c,wx,wy,wz\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const Transition& t = transitions[i];
    write_row(out, t.timestamp, t.x, t.u);
    const bool contiguous = i + 1 < transitions.size() && same_state(t.x_next, transitions[i + 1].x) &&
                            transitions[i + 1].timestamp == t.timestamp + t.dt;
    if (!contiguous) write_row(out, t.timestamp + t.dt, t.x_next, Command{nan, Vec3::Constant(nan)});
  }
  out.precision(old_precision);
}

std::vector<Transition> read_transitions_csv(std::istream& in) {
  struct Row {
    double t;
    State x;
    Command u;
  };
  std::vector<Row> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::vector<double> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(std::stod(cell));
    if (f.size() != 20) throw std::invalid_argument("transition csv: expected 20 columns");
    Row r;
    r.t = f[0];
    r.x.p = Vec3(f[1], f[2], f[3]);
    r.x.v = Vec3(f[4], f[5], f[6]);
    for (int i = 0; i < 9; ++i) r.x.R(i / 3, i % 3) = f[7 + i];
    r.u = Command{f[16], Vec3(f[17], f[18], f[19])};
    rows.push_back(r);
  }
  std::vector<Transition> out;
  for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
    if (std::isnan(rows[i].u.c)) continue;
    out.push_back({rows[i].x, rows[i].u, rows[i + 1].x, rows[i + 1].t - rows[i].t, rows[i].t});
  }
  return out;
}

}  // namespace agile
