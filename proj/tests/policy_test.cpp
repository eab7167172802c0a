#include "agile/policy.hpp"

#include <cmath>

#include <gtest/gtest.h>

#include "fd.hpp"

namespace agile {
namespace {

Observation random_obs(const Policy& pol, std::mt19937_64& rng, double spread = 1.0) {
  std::normal_distribution<double> n(0.0, spread);
  Observation o(pol.obs_dim());
  for (Eigen::Index i = 0; i < o.size(); ++i) o(i) = n(rng);
  return o;
}

PolicyConfig small_config(int history = 2) {
  PolicyConfig c;
  c.history = history;
  c.out_scale = 1.0;
  return c;
}

TEST(ActionHistoryTest, OldestFirstRing) {
  ActionHistory h(2);
  EXPECT_TRUE(h.to_vector().isZero(0.0));
  const Command u1{1.0, Vec3(1, 0, 0)}, u2{2.0, Vec3(0, 2, 0)}, u3{3.0, Vec3(0, 0, 3)};
  h.push(u1);
  h.push(u2);
  Eigen::VectorXd expected(8);
  expected << u1.to_vector(), u2.to_vector();
  EXPECT_EQ(h.to_vector(), expected);
  h.push(u3);
  expected << u2.to_vector(), u3.to_vector();
  EXPECT_EQ(h.to_vector(), expected);
  EXPECT_EQ(h.latest().c, 3.0);
  h.reset();
  EXPECT_TRUE(h.to_vector().isZero(0.0));
  ActionHistory empty(0);
  empty.push(u1);
  EXPECT_EQ(empty.to_vector().size(), 0);
}

TEST(ObservationTest, LayoutRoundTrip) {
  State x;
  x.p = Vec3(1, 2, 3);
  x.v = Vec3(-1, 0.5, 0);
  x.R = rot_x(0.3) * rot_z(1.0);
  ActionHistory h(4);
  const Observation same = build_observation(x, x, h);
  ASSERT_EQ(same.size(), 46);
  EXPECT_EQ(same.head<15>(), same.segment<15>(15));
  EXPECT_TRUE(same.tail<16>().isZero(0.0));

  State r;
  r.p = Vec3(4, 5, 6);
  r.R = rot_y(-0.4);
  h.push(Command{7.0, Vec3(0.1, 0.2, 0.3)});
  const Observation o = build_observation(x, r, h);
  EXPECT_EQ(Vec3(o.segment<3>(0)), x.p);
  EXPECT_EQ(Vec3(o.segment<3>(3)), x.v);
  EXPECT_EQ(o.segment<9>(6), vec(x.R));
  EXPECT_EQ(Vec3(o.segment<3>(15)), r.p);
  EXPECT_EQ(o.segment<9>(21), vec(r.R));
  EXPECT_EQ(o.tail<4>(), h.latest().to_vector());
}

TEST(PolicyTest, ZeroWeightsGiveMidThrustAndNoRate) {
  const Policy pol(PolicyConfig{});
  const Command u = pol.act(Observation::Zero(pol.obs_dim()));
  EXPECT_DOUBLE_EQ(u.c, kGravity);
  EXPECT_TRUE(u.omega.isZero(0.0));
  EXPECT_TRUE(policy_jacobian(pol, Observation::Ones(pol.obs_dim())).isZero(0.0));
}

TEST(PolicyTest, DefaultArchitecture) {
  std::mt19937_64 rng(1);
  const Policy pol(PolicyConfig{}, rng);
  EXPECT_EQ(pol.net().dims(), (std::vector<int>{46, 256, 256, 4}));
}

TEST(PolicyTest, OutputsAlwaysWithinLimits) {
  std::mt19937_64 rng(2);
  PolicyConfig cfg = small_config();
  cfg.out_scale = 20.0;
  for (int i = 0; i < 10000; ++i) {
    const Policy pol(cfg, {8}, rng);
    const Command u = pol.act(random_obs(pol, rng, 10.0));
    ASSERT_TRUE(cfg.limits.admits(u)) << u.c << " " << u.omega.transpose();
  }
}

TEST(PolicyTest, ActVjpMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  for (bool error_frame : {false, true}) {
    PolicyConfig cfg = small_config();
    cfg.error_frame = error_frame;
    Policy pol(cfg, {12, 12}, rng);
    const Observation o = random_obs(pol, rng);
    const Eigen::Vector4d g_u(0.7, -1.2, 0.4, 2.0);

    ActRecord rec;
    pol.act(o, &rec);
    ParamGradient grad = pol.net().zero_gradient();
    const Eigen::VectorXd g_o = pol.act_vjp(rec, g_u, &grad);

    auto objective = [&](const Policy& p, const Observation& obs) { return g_u.dot(p.act(obs).to_vector()); };
    const auto fd_o = testing::central_gradient([&](const Eigen::VectorXd& x) { return objective(pol, x); }, o);
    EXPECT_LT(testing::max_rel_error(g_o, fd_o), 1e-4);

    for (std::size_t l = 0; l < pol.net().num_layers(); ++l) {
      Eigen::MatrixXd& w = pol.net().params().w[l];
      for (int k = 0; k < 10; ++k) {
        const Eigen::Index r = std::uniform_int_distribution<Eigen::Index>(0, w.rows() - 1)(rng);
        const Eigen::Index c = std::uniform_int_distribution<Eigen::Index>(0, w.cols() - 1)(rng);
        const double orig = w(r, c);
        w(r, c) = orig + 1e-6;
        const double fp = objective(pol, o);
        w(r, c) = orig - 1e-6;
        const double fm = objective(pol, o);
        w(r, c) = orig;
        const double fd = (fp - fm) / 2e-6;
        EXPECT_LT(std::abs(grad.w[l](r, c) - fd) / std::max(std::abs(fd), 1e-4), 1e-4);
      }
    }
  }
}

TEST(PolicyTest, JacobianMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  const Policy pol(small_config(4), {16, 16}, rng);
  for (int i = 0; i < 10; ++i) {
    const Observation o = random_obs(pol, rng);
    const auto fd = testing::central_jacobian(
        [&](const Eigen::VectorXd& x) -> Eigen::VectorXd { return pol.act(x).to_vector(); }, o);
    EXPECT_LT(testing::max_rel_error(policy_jacobian(pol, o), fd), 1e-4);
  }
}

TEST(PolicyTest, LinearPolicyJacobianIsScaledWeights) {
  std::mt19937_64 rng(5);
  const Policy pol(small_config(1), {}, rng);
  const Observation o = random_obs(pol, rng, 0.1);
  ActRecord rec;
  pol.act(o, &rec);
  const auto& lim = pol.config().limits;
  Eigen::Vector4d slope;
  const double s = 1.0 / (1.0 + std::exp(-rec.y(0, 0)));
  slope(0) = (lim.c_max - lim.c_min) * s * (1.0 - s);
  for (int i = 1; i < 4; ++i) slope(i) = lim.omega_max * (1.0 - std::pow(std::tanh(rec.y(i, 0)), 2));
  const Eigen::VectorXd in_scale = pol.preprocess(Eigen::VectorXd::Ones(pol.obs_dim()));
  const Eigen::MatrixXd expected = slope.asDiagonal() * pol.net().params().w[0] * in_scale.asDiagonal();
  EXPECT_LT((policy_jacobian(pol, o) - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PolicyTest, SaturatedOutputsHaveFlatJacobian) {
  std::mt19937_64 rng(6);
  PolicyConfig cfg = small_config(1);
  Policy pol(cfg, {}, rng);
  pol.net().params().b[0] = Eigen::Vector4d(40, 40, -40, 40);
  const Observation o = random_obs(pol, rng, 0.1);
  EXPECT_LT(policy_jacobian(pol, o).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(PolicyTest, WrongObservationLengthThrows) {
  const Policy pol(PolicyConfig{});
  EXPECT_THROW(pol.act(Observation::Zero(10)), DimensionMismatch);
}

TEST(PolicyTest, CheckpointRoundTrip) {
  std::mt19937_64 rng(7);
  PolicyConfig cfg = small_config(3);
  cfg.hidden = 32;
  cfg.error_frame = true;
  cfg.limits.omega_max = 5.0;
  const Policy pol(cfg, rng);
  const Policy back = policy_from_json(nlohmann::json::parse(to_json(pol).dump()));
  EXPECT_EQ(back.config().history, 3);
  EXPECT_TRUE(back.config().error_frame);
  EXPECT_EQ(back.config().limits.omega_max, 5.0);
  const Observation o = random_obs(pol, rng);
  EXPECT_EQ(back.act(o).to_vector(), pol.act(o).to_vector());
  nlohmann::json bad = to_json(pol);
  bad["history"] = 4;
  EXPECT_THROW(policy_from_json(bad), DimensionMismatch);
}

TEST(PolicyTest, BatchMatchesSingleSamples) {
  std::mt19937_64 rng(8);
  const Policy pol(small_config(), {16}, rng);
  Eigen::MatrixXd obs(pol.obs_dim(), 5);
  for (int b = 0; b < 5; ++b) obs.col(b) = random_obs(pol, rng);
  const Eigen::MatrixXd u = pol.act_batch(obs);
  for (int b = 0; b < 5; ++b) EXPECT_LT((u.col(b) - pol.act(obs.col(b)).to_vector()).norm(), 1e-14);
}

}  // namespace
}  // namespace agile
