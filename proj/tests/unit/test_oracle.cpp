#include <cmath>

#include <gtest/gtest.h>

#include "splitsim/experiment.hpp"
#include "splitsim/oracle.hpp"
#include "splitsim/verify.hpp"

using namespace splitsim;

TEST(FiniteDifferences, KnownDerivatives) {
  const auto g = oracle::finite_diff_grad([](std::span<const double> t) { return t[0] * t[0]; }, {3.0}, 1e-6);
  EXPECT_NEAR(g[0], 6.0, 1e-9);
  const auto z = oracle::finite_diff_grad([](std::span<const double>) { return 1.5; }, {1.0, 2.0});
  EXPECT_EQ(z, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(oracle::finite_diff_grad([](std::span<const double>) { return NAN; }, {1.0}), OracleError);
  EXPECT_THROW(oracle::finite_diff_grad([](std::span<const double> t) { return t[0]; }, {1.0}, 0.0), OracleError);
}

TEST(Centralized, ZeroStepsIsInitialization) {
  const auto layers = mlp_layers(4, {6}, 3, LayerKind::relu, true);
  const auto d = gaussian_mixture({3, 4, 2.0, 1}, 60, 0);
  oracle::CentralizedConfig cfg;
  cfg.init_seed = 3;
  Rng rng = Rng::substream(3, "init");
  EXPECT_TRUE(bit_equal(oracle::centralized_train(layers, d, cfg), init_params(layers, rng)));
  cfg.steps = 20;
  cfg.batch_size = 8;
  EXPECT_TRUE(bit_equal(oracle::centralized_train(layers, d, cfg), oracle::centralized_train(layers, d, cfg)));
}

TEST(Centralized, ReferenceGradientsAgreeWithBackward) {
  const auto layers = mlp_layers(5, {7, 4}, 3, LayerKind::tanh, true);
  Rng rng(2);
  const ParamBlock p = init_params(layers, rng);
  const auto d = gaussian_mixture({3, 5, 2.0, 1}, 30, 1);
  const auto ref = oracle::detail::reference_gradients(p, layers, d.x, d.y);
  const auto f = forward(p, layers, d.x);
  const auto nn = backward(p, layers, f.tape, loss_and_grad(f.output, d.y).d_output);
  EXPECT_TRUE(bit_equal(ref, nn.grads));
}

TEST(Toy, SeedInstance) {
  const auto s = oracle::toy_steps({1.0, 2.0, 1.0, 1.0, 0.1});
  EXPECT_NEAR(s.w_s_after, 1.8, 1e-15);
  EXPECT_NEAR(s.end_to_end_client_step, 0.4, 1e-15);
  EXPECT_NEAR(s.cycle_client_step, 0.288, 1e-15);
}

TEST(Toy, StepsMatchFiniteDifferencesOfTheLoss) {
  // brute force: differentiate (w_s w_c x - y)^2 numerically instead of using the closed form
  const oracle::ToyInstance t{0.7, 1.9, 1.3, 1.1, 0.05};
  auto loss = [&](double wc, double ws) { return (ws * wc * t.x - t.y) * (ws * wc * t.x - t.y); };
  const double h = 1e-6;
  const double dws = (loss(t.w_c, t.w_s + h) - loss(t.w_c, t.w_s - h)) / (2 * h);
  const double ws_after = t.w_s - t.eta * dws;
  const double e2e = t.eta * (loss(t.w_c + h, t.w_s) - loss(t.w_c - h, t.w_s)) / (2 * h);
  const double cyc = t.eta * (loss(t.w_c + h, ws_after) - loss(t.w_c - h, ws_after)) / (2 * h);
  const auto s = oracle::toy_steps(t);
  EXPECT_NEAR(s.w_s_after, ws_after, 1e-9);
  EXPECT_NEAR(s.end_to_end_client_step, e2e, 1e-9);
  EXPECT_NEAR(s.cycle_client_step, cyc, 1e-9);
}

TEST(Toy, OptimumAndZeroRate) {
  const auto opt = oracle::toy_steps({1.0, 2.0, 0.5, 1.0, 0.1});
  EXPECT_EQ(opt.end_to_end_client_step, 0.0);
  EXPECT_EQ(opt.cycle_client_step, 0.0);
  const auto still = oracle::toy_steps({1.0, 2.0, 1.0, 1.0, 0.0});
  EXPECT_EQ(still.w_s_after, 2.0);
  EXPECT_EQ(still.end_to_end_client_step, 0.0);
  EXPECT_EQ(still.cycle_client_step, 0.0);
}

TEST(Toy, OvershootingPointsAreExcludedNotFailed) {
  // eta large enough that w_s' drops below y / (w_c x)
  const oracle::ToyInstance t{2.0, 0.6, 2.0, 1.0, 0.1};
  EXPECT_FALSE(oracle::toy_in_regime(t, oracle::toy_steps(t)));
  const auto rep = oracle::toy_sweep(200);
  EXPECT_GT(rep.excluded, 0u);
  EXPECT_GE(rep.valid(), 10000u);
  EXPECT_TRUE(rep.violations.empty());
  EXPECT_EQ(rep.valid() + rep.excluded, rep.grid_points);
}

TEST(VerifySuites, AllPassOnThePristineBuild) {
  for (const auto& r : verify::run_all()) EXPECT_TRUE(r.passed) << r.name << ": " << r.detail;
}

TEST(VerifySuites, CorruptedBackwardIsCaught) {
  auto bad = [](const ParamBlock& p, std::span<const LayerSpec> s, const Tape& t, const Tensor& d, bool g) {
    auto r = backward(p, s, t, d, g);
    for (auto& l : r.grads)
      for (double& v : l.bias.values()) v *= 0.999;
    return r;
  };
  const auto r = verify::check_gradients(20, 1e-6, bad);
  EXPECT_FALSE(r.passed);
  EXPECT_EQ(r.name, "gradient-check");
}
