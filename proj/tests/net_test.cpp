#include "agile/net.hpp"

#include <random>

#include <Eigen/SVD>
#include <gtest/gtest.h>

#include "fd.hpp"

namespace agile {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

const std::vector<Activation> kTanh3{Activation::kTanh, Activation::kTanh, Activation::kIdentity};

VectorXd random_vector(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = u(rng);
  return v;
}

VectorXd flatten(const ParamSet& p) {
  VectorXd out(p.size());
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    out.segment(k, p.w[l].size()) = Eigen::Map<const VectorXd>(p.w[l].data(), p.w[l].size());
    k += p.w[l].size();
    out.segment(k, p.b[l].size()) = p.b[l];
    k += p.b[l].size();
  }
  return out;
}

void unflatten(const VectorXd& flat, ParamSet& p) {
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < p.w.size(); ++l) {
    p.w[l] = Eigen::Map<const MatrixXd>(flat.data() + k, p.w[l].rows(), p.w[l].cols());
    k += p.w[l].size();
    p.b[l] = flat.segment(k, p.b[l].size());
    k += p.b[l].size();
  }
}

TEST(MlpTest, ZeroNetGivesZeroOutput) {
  Mlp net({3, 5, 2}, {Activation::kTanh, Activation::kIdentity});
  EXPECT_TRUE(net.forward(VectorXd::Constant(3, 7.0)).isZero(0.0));
}

TEST(MlpTest, IdentityLinearLayer) {
  Mlp net({2, 2}, {Activation::kIdentity});
  net.params().w[0].setIdentity();
  const VectorXd x = (VectorXd(2) << 1, 2).finished();
  EXPECT_EQ(VectorXd(net.forward(x)), x);
}

TEST(MlpTest, ForwardIsDeterministic) {
  std::mt19937_64 rng(1);
  const Mlp net = Mlp::random({2, 8, 3}, {Activation::kTanh, Activation::kIdentity}, rng);
  const VectorXd x = random_vector(rng, 2);
  EXPECT_EQ(VectorXd(net.forward(x)), VectorXd(net.forward(x)));
}

TEST(MlpTest, RejectsWrongInputDim) {
  Mlp net({3, 2}, {Activation::kIdentity});
  EXPECT_THROW(net.forward(VectorXd::Zero(4)), DimensionMismatch);
}

TEST(MlpTest, SeededInitializationIsBitIdentical) {
  std::mt19937_64 a(42), b(42);
  const Mlp na = Mlp::random({4, 16, 16, 2}, kTanh3, a);
  const Mlp nb = Mlp::random({4, 16, 16, 2}, kTanh3, b);
  EXPECT_EQ(flatten(na.params()), flatten(nb.params()));
}

TEST(VjpTest, LinearLayerAdjoint) {
  std::mt19937_64 rng(2);
  Mlp net = Mlp::random({3, 4}, {Activation::kIdentity}, rng);
  ActivationRecord rec;
  net.forward(random_vector(rng, 3), &rec);
  const VectorXd g = random_vector(rng, 4);
  const MatrixXd gin = net.vjp(rec, g, nullptr);
  EXPECT_LT((VectorXd(gin) - net.params().w[0].transpose() * g).norm(), 1e-14);
}

TEST(VjpTest, ZeroCotangentGivesZeroGradients) {
  std::mt19937_64 rng(3);
  Mlp net = Mlp::random({2, 8, 8, 3}, kTanh3, rng);
  ActivationRecord rec;
  net.forward(random_vector(rng, 2), &rec);
  ParamGradient grad = net.zero_gradient();
  const MatrixXd gin = net.vjp(rec, VectorXd::Zero(3), &grad);
  EXPECT_TRUE(gin.isZero(0.0));
  EXPECT_EQ(grad.squared_norm(), 0.0);
}

// Checks both input and parameter gradients of <g, net(x)> against central
// differences.
double vjp_fd_error(const Mlp& net, const VectorXd& x, const VectorXd& g) {
  ActivationRecord rec;
  net.forward(x, &rec);
  ParamGradient grad = net.zero_gradient();
  const VectorXd gin = net.vjp(rec, g, &grad);

  const auto fd_x = testing::central_gradient(
      [&](const VectorXd& xx) { return g.dot(VectorXd(net.forward(xx))); }, x, 1e-5);
  Mlp probe = net;
  const auto fd_p = testing::central_gradient(
      [&](const VectorXd& flat) {
        unflatten(flat, probe.params());
        return g.dot(VectorXd(probe.forward(x)));
      },
      flatten(net.params()), 1e-5);
  return std::max(testing::max_rel_error(gin, fd_x), testing::max_rel_error(flatten(grad), fd_p));
}

TEST(VjpTest, FiniteDifferenceSmallNet) {
  std::mt19937_64 rng(4);
  const Mlp net = Mlp::random({2, 8, 8, 3}, kTanh3, rng);
  EXPECT_LT(vjp_fd_error(net, random_vector(rng, 2), random_vector(rng, 3)), 1e-4);
}

TEST(VjpTest, FiniteDifferenceRandomNetsProperty) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> width(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    const int in = width(rng), h1 = width(rng), h2 = width(rng), out = width(rng);
    const auto last = (trial % 2 == 0) ? Activation::kTanh : Activation::kIdentity;
    const Mlp net = Mlp::random({in, h1, h2, out}, {Activation::kTanh, Activation::kTanh, last}, rng);
    EXPECT_LT(vjp_fd_error(net, random_vector(rng, in), random_vector(rng, out)), 1e-4) << "trial " << trial;
  }
}

TEST(VjpTest, BatchGradientIsSumOfSamples) {
  std::mt19937_64 rng(6);
  const Mlp net = Mlp::random({3, 6, 2}, {Activation::kTanh, Activation::kIdentity}, rng);
  MatrixXd x(3, 4), g(2, 4);
  for (int j = 0; j < 4; ++j) {
    x.col(j) = random_vector(rng, 3);
    g.col(j) = random_vector(rng, 2);
  }
  ActivationRecord rec;
  net.forward(x, &rec);
  ParamGradient batch = net.zero_gradient();
  net.vjp(rec, g, &batch);
  ParamGradient sum = net.zero_gradient();
  for (int j = 0; j < 4; ++j) {
    ActivationRecord r1;
    net.forward(x.col(j), &r1);
    net.vjp(r1, g.col(j), &sum);
  }
  EXPECT_LT((flatten(batch) - flatten(sum)).norm(), 1e-12);
}

TEST(JacobianTest, MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Mlp net = Mlp::random({5, 16, 16, 4}, kTanh3, rng);
  const VectorXd x = random_vector(rng, 5);
  const auto fd = testing::central_jacobian([&](const VectorXd& xx) -> VectorXd { return net.forward(xx); }, x);
  EXPECT_LT(testing::max_rel_error(net.jacobian(x), fd), 1e-6);
}

TEST(SpectralNormTest, DiagonalAndIdentity) {
  EXPECT_NEAR(spectral_norm(Eigen::Vector3d(3, 1, 0.5).asDiagonal().toDenseMatrix(), 20), 3.0, 1e-9);
  EXPECT_NEAR(spectral_norm(MatrixXd::Identity(4, 4), 1), 1.0, 1e-12);
}

TEST(SpectralNormTest, RandomMatrixAgainstSvd) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int n : {64, 256}) {
    MatrixXd w(n, n);
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = u(rng);
    const double svd = Eigen::BDCSVD<MatrixXd>(w).singularValues()(0);
    EXPECT_LT(std::abs(spectral_norm(w, 20) - svd) / svd, 1e-3) << n;
  }
}

// Zero-mean matrices have a small top singular gap, so 20 sweeps are not
// enough; the warm-started penalty accumulates sweeps across calls instead.
TEST(SpectralNormTest, CenteredMatrixNeedsMoreSweeps) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd w(64, 64);
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = n(rng);
  const double svd = Eigen::JacobiSVD<MatrixXd>(w).singularValues()(0);
  EXPECT_LT(std::abs(spectral_norm(w, 400) - svd) / svd, 1e-3);

  Mlp net({64, 64}, {Activation::kIdentity});
  net.params().w[0] = w;
  SpectralPenalty penalty(10);
  double sigma = 0.0;
  for (int call = 0; call < 40; ++call) sigma = penalty.evaluate(net, nullptr, 0.0);
  EXPECT_LT(std::abs(sigma - svd) / svd, 1e-3);
}

TEST(SpectralNormTest, MonotoneInIterations) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd w(30, 20);
  for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = n(rng);
  double prev = 0.0;
  for (int it = 1; it <= 30; ++it) {
    const double s = spectral_norm(w, it);
    EXPECT_GE(s, prev - 1e-12);
    prev = s;
  }
}

TEST(SpectralPenaltyTest, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const Mlp net = Mlp::random({4, 6, 3}, {Activation::kTanh, Activation::kIdentity}, rng);
  SpectralPenalty penalty(200);
  ParamGradient grad = net.zero_gradient();
  penalty.evaluate(net, &grad, 1.0);
  Mlp probe = net;
  const auto fd = testing::central_gradient(
      [&](const VectorXd& flat) {
        unflatten(flat, probe.params());
        double s = 0.0;
        for (const auto& w : probe.params().w) s += Eigen::JacobiSVD<MatrixXd>(w).singularValues()(0);
        return s;
      },
      flatten(net.params()), 1e-6);
  EXPECT_LT(testing::max_rel_error(flatten(grad), fd, 1e-3), 1e-3);
}

TEST(SgdTest, ZeroLearningRateIsNoop) {
  std::mt19937_64 rng(11);
  const Mlp net = Mlp::random({2, 3}, {Activation::kIdentity}, rng);
  ParamGradient g = net.zero_gradient();
  g.w[0].setOnes();
  EXPECT_EQ(flatten(sgd_step(net, g, 0.0).params()), flatten(net.params()));
}

TEST(SgdTest, ScalarArithmetic) {
  Mlp net({1, 1}, {Activation::kIdentity});
  net.params().w[0](0, 0) = 1.0;
  ParamGradient g = net.zero_gradient();
  g.w[0](0, 0) = 2.0;
  EXPECT_DOUBLE_EQ(sgd_step(net, g, 0.1).params().w[0](0, 0), 0.8);
}

TEST(SgdTest, TwoStepsEqualOneSummedStep) {
  std::mt19937_64 rng(12);
  const Mlp net = Mlp::random({3, 4, 2}, {Activation::kTanh, Activation::kIdentity}, rng);
  ParamGradient g1 = net.zero_gradient(), g2 = net.zero_gradient();
  g1.w[0].setConstant(0.3);
  g2.b[1].setConstant(-1.2);
  ParamGradient sum = g1;
  sum.add_scaled(g2, 1.0);
  const Mlp two = sgd_step(sgd_step(net, g1, 0.05), g2, 0.05);
  const Mlp one = sgd_step(net, sum, 0.05);
  EXPECT_LT((flatten(two.params()) - flatten(one.params())).norm(), 1e-14);
}

TEST(SgdTest, RejectsIncongruentGradient) {
  const Mlp a({2, 3}, {Activation::kIdentity});
  const Mlp b({2, 4}, {Activation::kIdentity});
  EXPECT_THROW(sgd_step(a, b.zero_gradient(), 0.1), DimensionMismatch);
}

TEST(ClipTest, ScalesToMaxNorm) {
  Mlp net({2, 2}, {Activation::kIdentity});
  ParamGradient g = net.zero_gradient();
  g.w[0].setConstant(10.0);
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 10.0), 20.0);
  EXPECT_NEAR(std::sqrt(g.squared_norm()), 10.0, 1e-12);
}

TEST(CheckpointTest, JsonRoundTripIsExact) {
  std::mt19937_64 rng(13);
  const Mlp net = Mlp::random({5, 7, 3}, {Activation::kTanh, Activation::kIdentity}, rng);
  const Mlp back = mlp_from_json(nlohmann::json::parse(to_json(net).dump()));
  EXPECT_EQ(flatten(back.params()), flatten(net.params()));
  EXPECT_EQ(back.activations(), net.activations());
}

TEST(CheckpointTest, RejectsBadHeader) {
  nlohmann::json j = to_json(Mlp({2, 2}, {Activation::kIdentity}));
  j["format_version"] = 99;
  EXPECT_THROW(mlp_from_json(j), std::runtime_error);
  j = to_json(Mlp({2, 2}, {Activation::kIdentity}));
  j["params"].push_back(1.0);
  EXPECT_THROW(mlp_from_json(j), DimensionMismatch);
}

}  // namespace
}  // namespace agile
