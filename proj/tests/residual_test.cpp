#include "agile/residual.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "agile/plant.hpp"
#include "fd.hpp"

namespace agile {
namespace {

constexpr double kPi = std::numbers::pi;

State random_near_hover(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  State x;
  x.p = Vec3(0.5 * u(rng), 0.5 * u(rng), 1.0 + 0.5 * u(rng));
  x.v = Vec3(u(rng), u(rng), 0.5 * u(rng));
  x.R = exp_so3(Vec3(0.2 * u(rng), 0.2 * u(rng), 0.5 * u(rng)));
  return x;
}

Command random_command(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  return {kGravity + 1.5 * u(rng), Vec3(0.5 * u(rng), 0.5 * u(rng), 0.3 * u(rng))};
}

// Independent transitions from a stationary state distribution.
ReplayBuffer plant_data(const PlantConfig& cfg, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ReplayBuffer buf(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PlantState ps;
    ps.x = random_near_hover(rng);
    const Command u = random_command(rng);
    buf.push({ps.x, u, plant_step(ps, u, cfg, kDefaultDt).x, kDefaultDt, i * kDefaultDt});
  }
  return buf;
}

PlantConfig wind_plant() {
  PlantConfig cfg = PlantConfig::nominal();
  cfg.wind = Vec3(4, -2, 0);
  cfg.drag_lin = Vec3(0.3, 0.3, 0.15);
  return cfg;
}

TEST(DiscrepancyTest, Examples) {
  const DiscrepancyWeights unit{1.0, 1.0, 1.0};
  State a;
  a.p = Vec3(1, 2, 3);
  a.R = rot_x(0.3);
  EXPECT_EQ(discrepancy(a, a, unit), 0.0);
  State b = a;
  b.p += Vec3(1, 0, 0);
  EXPECT_DOUBLE_EQ(discrepancy(a, b, unit), 1.0);
  b = a;
  b.R = a.R * rot_z(kPi / 2);
  EXPECT_NEAR(discrepancy(a, b, unit), kPi * kPi / 4, 1e-12);
}

TEST(DiscrepancyTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(2);
  const DiscrepancyWeights w;
  for (int i = 0; i < 20; ++i) {
    const State a = random_near_hover(rng);
    const State b = random_near_hover(rng);
    const auto fd = testing::central_gradient(
        [&](const Eigen::VectorXd& d) { return discrepancy(a, retract(b, StateTangent(d)), w); },
        StateTangent::Zero());
    EXPECT_LT(testing::max_rel_error(discrepancy_grad(a, b, w), fd), 1e-6);
  }
}

TEST(ReplayBufferTest, EvictsOldestFirst) {
  ReplayBuffer buf(5);
  for (int i = 0; i < 8; ++i) buf.push({State{}, Command{}, State{}, kDefaultDt, static_cast<double>(i)});
  ASSERT_EQ(buf.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(buf[i].timestamp, 3.0 + i);
}

TEST(ReplayBufferTest, RejectsBadTransitions) {
  ReplayBuffer buf(5);
  buf.push({State{}, Command{}, State{}, kDefaultDt, 1.0});
  EXPECT_THROW(buf.push({State{}, Command{}, State{}, kDefaultDt, 0.5}), std::invalid_argument);
  EXPECT_THROW(buf.push({State{}, Command{}, State{}, 0.0, 2.0}), std::invalid_argument);
  State bad;
  bad.R(0, 0) = 2.0;
  EXPECT_THROW(buf.push({bad, Command{}, State{}, kDefaultDt, 2.0}), std::invalid_argument);
  buf.push({State{}, Command{}, State{}, kDefaultDt, 1.0});  // equal timestamps are fine
  EXPECT_EQ(buf.size(), 2u);
}

TEST(ResidualLossTest, PerfectModelHasNoDataError) {
  std::mt19937_64 rng(1);
  const HybridModel model = HybridModel::make(rng);
  const ReplayBuffer buf = plant_data(PlantConfig::nominal(), 64, 3);
  const ResidualLoss loss = residual_loss(model, buf.snapshot(), DiscrepancyWeights{}, 1e-3);
  EXPECT_LT(loss.data, 1e-10);
}

TEST(ResidualLossTest, ConstantAccelerationOffset) {
  // Drag 1/s against 1 m/s of wind is a 1 m/s^2 push on a vehicle at rest.
  PlantConfig cfg = PlantConfig::nominal();
  cfg.wind = Vec3(1, 0, 0);
  cfg.drag_lin = Vec3(1, 1, 1);
  const State hover;
  const State next = plant_step(PlantState{hover, Vec3::Zero(), 0.0}, Command{}, cfg, kDefaultDt).x;
  const DiscrepancyWeights w;
  const double dt = kDefaultDt;
  const double expected = w.w_p * std::pow(0.5 * dt * dt, 2) + w.w_v * dt * dt;
  const ResidualLoss loss =
      residual_loss(HybridModel::nominal(), {{hover, Command{}, next, dt, 0.0}}, w, 0.0);
  EXPECT_NEAR(loss.data, expected, 0.05 * expected);
}

TEST(ResidualLossTest, RegularizerOnly) {
  std::mt19937_64 rng(5);
  HybridModel model = HybridModel::make(rng);
  model.residual = Mlp::random({19, 64, 64, 6}, {Activation::kTanh, Activation::kTanh, Activation::kTanh}, rng);
  const ReplayBuffer buf = plant_data(wind_plant(), 16, 3);
  const ResidualLoss loss = residual_loss(model, buf.snapshot(), DiscrepancyWeights{0, 0, 0}, 1e-3);
  SpectralPenalty reference;
  EXPECT_EQ(loss.data, 0.0);
  EXPECT_DOUBLE_EQ(loss.penalty, 1e-3 * reference.evaluate(model.residual, nullptr, 0.0));
}

TEST(ResidualLossTest, EmptyBatchThrows) {
  EXPECT_THROW(residual_loss(HybridModel::nominal(), {}, DiscrepancyWeights{}, 0.0), EmptyBatch);
  std::mt19937_64 rng(1);
  ReplayBuffer empty;
  EXPECT_THROW(train_epoch(HybridModel::make(rng), empty, ResidualTrainConfig{}), EmptyBatch);
}

TEST(ResidualLossTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  HybridModel model = HybridModel::make(rng, 16);
  model.residual = Mlp::random({19, 16, 16, 6}, {Activation::kTanh, Activation::kTanh, Activation::kTanh}, rng, 0.5);
  const ReplayBuffer buf = plant_data(wind_plant(), 8, 7);
  const auto batch = buf.snapshot();
  const DiscrepancyWeights w;
  const ResidualLoss loss = residual_loss(model, batch, w, 0.0);

  std::uniform_int_distribution<int> layer(0, 2);
  int checked = 0;
  for (int trial = 0; trial < 60; ++trial) {
    const int l = layer(rng);
    auto& wl = model.residual.params().w[l];
    const int r = std::uniform_int_distribution<int>(0, static_cast<int>(wl.rows()) - 1)(rng);
    const int c = std::uniform_int_distribution<int>(0, static_cast<int>(wl.cols()) - 1)(rng);
    const double orig = wl(r, c);
    const double h = 1e-5;
    wl(r, c) = orig + h;
    const double fp = residual_loss(model, batch, w, 0.0).data;
    wl(r, c) = orig - h;
    const double fm = residual_loss(model, batch, w, 0.0).data;
    wl(r, c) = orig;
    const double fd = (fp - fm) / (2 * h);
    const double an = loss.grad.w[l](r, c);
    const double scale = std::max(std::abs(fd), 1e-3 * loss.grad.w[l].cwiseAbs().maxCoeff());
    EXPECT_LT(std::abs(an - fd) / scale, 1e-3) << l << " " << r << " " << c;
    ++checked;
  }
  EXPECT_EQ(checked, 60);
}

TEST(ResidualTrainTest, RecoversWindAtHover) {
  const PlantConfig cfg = wind_plant();
  const ReplayBuffer buf = plant_data(cfg, 500, 11);
  std::mt19937_64 rng(12);
  HybridModel model = HybridModel::make(rng);
  ResidualTrainer trainer(model, ResidualTrainConfig{});
  for (int e = 0; e < 50; ++e) trainer.epoch(model, buf);

  const State hover;
  const Vec3 truth = disturbance_accel(hover, Command{}, cfg, 0.0);
  const Vec3 learned = eval_residual(model, make_feature(hover.p, hover.v, hover.R, Command{})).accel;
  EXPECT_LT((learned - truth).norm(), 0.05 * truth.norm()) << learned.transpose() << " vs " << truth.transpose();
}

TEST(ResidualTrainTest, WindowLossMostlyDecreases) {
  const ReplayBuffer buf = plant_data(wind_plant(), 500, 13);
  const auto all = buf.snapshot();
  std::mt19937_64 rng(14);
  HybridModel model = HybridModel::make(rng);
  ResidualTrainConfig cfg;
  ResidualTrainer trainer(model, cfg);
  double prev = residual_loss(model, all, cfg.weights, cfg.lambda_reg).total();
  int decreases = 0;
  const int epochs = 30;
  for (int e = 0; e < epochs; ++e) {
    trainer.epoch(model, buf);
    const double now = residual_loss(model, all, cfg.weights, cfg.lambda_reg).total();
    decreases += now <= prev;
    prev = now;
  }
  EXPECT_GE(decreases, 0.8 * epochs);
}

TEST(ResidualTrainTest, NominalDataLearnsNothing) {
  const ReplayBuffer buf = plant_data(PlantConfig::nominal(), 500, 15);
  std::mt19937_64 rng(16);
  HybridModel model = HybridModel::make(rng);
  ResidualTrainer trainer(model, ResidualTrainConfig{});
  for (int e = 0; e < 10; ++e) trainer.epoch(model, buf);
  std::mt19937_64 probe(17);
  for (int i = 0; i < 100; ++i) {
    const State x = random_near_hover(probe);
    const ResidualOutput r = eval_residual(model, make_feature(x.p, x.v, x.R, random_command(probe)));
    EXPECT_LT(r.accel.norm(), 1e-2);
  }
}

TEST(ResidualTrainTest, LearnsBodyRateBias) {
  const Vec3 bias(0.3, -0.2, 0.1);
  std::mt19937_64 rng(18);
  ReplayBuffer buf(500);
  const HybridModel truth = HybridModel::nominal();
  for (int i = 0; i < 500; ++i) {
    const State x = random_near_hover(rng);
    const Command u = random_command(rng);
    buf.push({x, u, step(truth, x, Command{u.c, u.omega + bias}, kDefaultDt), kDefaultDt, 0.0});
  }
  const auto all = buf.snapshot();
  auto rotation_error = [&](const HybridModel& m) {
    double sum = 0.0;
    for (const auto& t : all) sum += geodesic_sq(t.x_next.R, step(m, t.x, t.u, t.dt).R);
    return sum / all.size();
  };
  HybridModel model = HybridModel::make(rng);
  const double before = rotation_error(model);
  ResidualTrainer trainer(model, ResidualTrainConfig{});
  for (int e = 0; e < 100; ++e) trainer.epoch(model, buf);
  EXPECT_LT(rotation_error(model), 0.1 * before);
}

TEST(ResidualTrainTest, DeterministicGivenSeed) {
  const ReplayBuffer buf = plant_data(wind_plant(), 100, 19);
  std::mt19937_64 r1(20), r2(20);
  const HybridModel a = train_epoch(HybridModel::make(r1), buf, ResidualTrainConfig{});
  const HybridModel b = train_epoch(HybridModel::make(r2), buf, ResidualTrainConfig{});
  for (std::size_t l = 0; l < a.residual.num_layers(); ++l)
    EXPECT_EQ(a.residual.params().w[l], b.residual.params().w[l]);
  ResidualTrainConfig other;
  other.seed = 1;
  std::mt19937_64 r3(20);
  const HybridModel c = train_epoch(HybridModel::make(r3), buf, other);
  EXPECT_NE(a.residual.params().w[2], c.residual.params().w[2]);
}

TEST(TransitionCsvTest, RoundTripWithGap) {
  PlantConfig cfg = wind_plant();
  std::vector<Transition> ts;
  PlantState ps;
  ps.x.p = Vec3(0, 0, 1);
  for (int i = 0; i < 5; ++i) {
    const PlantState next = plant_step(ps, Command{10.0, Vec3(0.1, 0, 0)}, cfg, kDefaultDt);
    ts.push_back({ps.x, Command{10.0, Vec3(0.1, 0, 0)}, next.x, kDefaultDt, ps.t});
    ps = next;
    if (i == 2) {  // teleport: breaks contiguity
      ps.x.p += Vec3(1, 0, 0);
      ps.t += 1.0;
    }
  }
  std::stringstream ss;
  write_transitions_csv(ss, ts);
  const auto back = read_transitions_csv(ss);
  ASSERT_EQ(back.size(), ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    EXPECT_EQ(back[i].x.p, ts[i].x.p);
    EXPECT_EQ(back[i].x.R, ts[i].x.R);
    EXPECT_EQ(back[i].x_next.v, ts[i].x_next.v);
    EXPECT_EQ(back[i].u.omega, ts[i].u.omega);
    EXPECT_NEAR(back[i].dt, kDefaultDt, 1e-12);
  }
}

}  // namespace
}  // namespace agile
