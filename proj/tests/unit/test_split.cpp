#include <gtest/gtest.h>

#include "splitsim/experiment.hpp"
#include "splitsim/oracle.hpp"

using namespace splitsim;

namespace {

SplitSpec two_block_net() {
  return SplitSpec({LayerSpec::dense(3, 5), LayerSpec::relu(), LayerSpec::dense(5, 4), LayerSpec::softmax_output()}, 2);
}

Tensor fixed_input(std::size_t rows, std::size_t cols, std::uint64_t seed = 0) {
  Rng rng(seed);
  Tensor x = Tensor::zeros({rows, cols});
  for (double& v : x.values()) v = rng.uniform(-1, 1);
  return x;
}

}  // namespace

TEST(SplitSpec, CutRangeAndFirstLayer) {
  const auto layers = two_block_net().layers;
  EXPECT_THROW(SplitSpec(layers, 0), ConfigError);
  EXPECT_THROW(SplitSpec(layers, 4), ConfigError);
  EXPECT_NO_THROW(SplitSpec(layers, 3));
  EXPECT_THROW(SplitSpec({LayerSpec::relu(), LayerSpec::dense(3, 2)}, 1), ConfigError);
  EXPECT_EQ(two_block_net().cut_dim(), 5u);
}

TEST(ClientForward, IdentityClientHalfPassesInputThrough) {
  SplitSpec spec({LayerSpec::dense(2, 2), LayerSpec::dense(2, 2)}, 1);
  ParamBlock id;
  id.layers.push_back({Tensor::matrix(2, 2, {1, 0, 0, 1}), Tensor::zeros({2})});
  ClientModel c(0, id);
  const Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(client_forward(c, spec, x, Targets::classification({0, 1})).features, x);
}

TEST(ClientForward, EqualsForwardOfTheFirstHalf) {
  const auto spec = two_block_net();
  Rng rng = Rng::substream(0, "init");
  auto [ch, sh] = init_split(spec, rng);
  ClientModel c(0, ch);
  const Tensor x = fixed_input(16, 3);
  std::vector<int> y(16, 1);
  const auto sb = client_forward(c, spec, x, Targets::classification(y));
  EXPECT_EQ(sb.features.rows(), 16u);
  EXPECT_TRUE(sb.features.bit_equal(forward(ch, spec.client_layers(), x).output));
}

TEST(ClientForward, EmptyBatchRejected) {
  const auto spec = two_block_net();
  Rng rng(1);
  ClientModel c(0, init_split(spec, rng).first);
  EXPECT_THROW(client_forward(c, spec, Tensor(), Targets::classification({})), ContractError);
}

TEST(ServerForward, CompositionEqualsFullModelLoss) {
  const auto spec = two_block_net();
  Rng rng = Rng::substream(0, "init");
  const ParamBlock full = init_params(spec.layers, rng);
  ClientModel c(0, slice(full, 0, spec.cut));
  ServerModel s{slice(full, spec.cut, spec.layers.size()), false};
  const Tensor x = fixed_input(4, 3);
  const Targets y = Targets::classification({0, 1, 2, 3});
  const auto sb = client_forward(c, spec, x, y);
  const double split_loss = server_forward_loss(s, spec, sb).loss;
  EXPECT_EQ(split_loss, loss_and_grad(forward(full, spec.layers, x).output, y).loss);
  s.frozen = true;
  EXPECT_EQ(server_forward_loss(s, spec, sb).loss, split_loss);
}

TEST(ServerForward, UniformOutputGivesLogC) {
  const auto spec = two_block_net();
  Rng rng(2);
  auto [ch, sh] = init_split(spec, rng);
  for (auto& l : sh.layers)
    for (double& v : l.weight.values()) v = 0.0;
  ServerModel s{sh, false};
  EXPECT_NEAR(server_forward_loss(s, spec, fixed_input(3, 5), Targets::classification({0, 1, 2})).loss,
              std::log(4.0), 1e-15);
}

TEST(ServerForward, CutWidthMismatch) {
  const auto spec = two_block_net();
  Rng rng(2);
  ServerModel s{init_split(spec, rng).second, true};
  EXPECT_THROW(server_forward_loss(s, spec, fixed_input(2, 4), Targets::classification({0, 1})), DimensionError);
}

TEST(GradientService, RequiresFrozenServer) {
  const auto spec = two_block_net();
  Rng rng(2);
  ServerModel s{init_split(spec, rng).second, false};
  SmashedBatch sb{0, 0, fixed_input(2, 5), Targets::classification({0, 1})};
  EXPECT_THROW(server_grad_for_client(s, spec, sb), ContractError);
  {
    FreezeGuard g(s);
    EXPECT_NO_THROW(server_grad_for_client(s, spec, sb));
    EXPECT_THROW(server_step(s, spec, sb.features, sb.targets, {}), ContractError);
  }
  EXPECT_FALSE(s.frozen);
}

TEST(GradientService, MatchesFiniteDifferencesOnFeatures) {
  const auto spec = two_block_net();
  Rng rng(4);
  ServerModel s{init_split(spec, rng).second, true};
  for (auto& l : s.params.layers)
    for (double& v : l.bias.values()) v = rng.uniform(-0.3, 0.3);
  const Tensor f = fixed_input(3, 5, 8);
  const Targets y = Targets::classification({3, 0, 1});
  const auto g = server_grad_for_client(s, spec, {0, 0, f, y});
  const auto numeric = oracle::finite_diff_grad(
      [&](std::span<const double> t) {
        return server_forward_loss(s, spec, Tensor::matrix(3, 5, std::vector<double>(t.begin(), t.end())), y).loss;
      },
      std::vector<double>(f.values().begin(), f.values().end()));
  EXPECT_LT(oracle::max_relative_error(g.d_features.values(), numeric), 1e-6);
}

TEST(GradientService, ZeroAtMseOptimum) {
  SplitSpec spec({LayerSpec::dense(2, 3), LayerSpec::dense(3, 2)}, 1);
  Rng rng(3);
  ServerModel s{init_split(spec, rng).second, true};
  const Tensor f = fixed_input(2, 3);
  const Tensor target = forward(s.params, spec.server_layers(), f).output;
  const auto g = server_grad_for_client(s, spec, {0, 0, f, Targets::regression(target)});
  for (double v : g.d_features.values()) EXPECT_EQ(v, 0.0);
}

TEST(GradientService, ChangesAfterAServerStep) {
  const auto spec = two_block_net();
  Rng rng = Rng::substream(0, "init");
  ServerModel s{init_split(spec, rng).second, false};
  const SmashedBatch sb{0, 0, fixed_input(4, 5), Targets::classification({0, 1, 2, 3})};
  s.frozen = true;
  const auto before = server_grad_for_client(s, spec, sb);
  s.frozen = false;
  server_step(s, spec, sb.features, sb.targets, {OptimizerKind::sgd, 0.1});
  s.frozen = true;
  const auto after = server_grad_for_client(s, spec, sb);
  EXPECT_FALSE(before.d_features.bit_equal(after.d_features));
}

TEST(ClientBackward, ZeroCutGradientLeavesSgdClientUnchanged) {
  const auto spec = two_block_net();
  Rng rng(5);
  ClientModel c(0, init_split(spec, rng).first);
  const ParamBlock before = c.params();
  const auto sb = client_forward(c, spec, fixed_input(2, 3), Targets::classification({0, 1}));
  client_backward_update(c, spec, {0, sb.handle, Tensor::zeros({2, 5})}, {OptimizerKind::sgd, 0.5});
  EXPECT_TRUE(bit_equal(c.params().layers, before.layers));
}

TEST(ClientBackward, TapeConsumedOnce) {
  const auto spec = two_block_net();
  Rng rng(5);
  ClientModel c(0, init_split(spec, rng).first);
  const auto sb = client_forward(c, spec, fixed_input(2, 3), Targets::classification({0, 1}));
  const CutGradientBatch g{0, sb.handle, Tensor::zeros({2, 5})};
  client_backward_update(c, spec, g, {OptimizerKind::sgd, 0.1});
  EXPECT_THROW(client_backward_update(c, spec, g, {OptimizerKind::sgd, 0.1}), StaleTapeError);
}

TEST(ClientBackward, SplitStepEqualsCentralizedStepAtEveryCut) {
  const auto layers = mlp_layers(4, {6, 5, 3}, 3, LayerKind::tanh, true);
  const Tensor x = fixed_input(6, 4, 12);
  const Targets y = Targets::classification({0, 1, 2, 0, 1, 2});
  for (std::size_t cut = 1; cut < layers.size(); ++cut) {
    SplitSpec spec(layers, cut);
    Rng rng = Rng::substream(0, "init");
    ParamBlock full = init_params(layers, rng);
    ClientModel c(0, slice(full, 0, cut));
    ServerModel s{slice(full, cut, layers.size()), false};
    const OptimizerConfig opt{OptimizerKind::adam, 0.01};

    const auto f = forward(full, layers, x);
    apply_update(full, backward(full, layers, f.tape, loss_and_grad(f.output, y).d_output).grads, opt);

    const auto sb = client_forward(c, spec, x, y);
    const auto step = server_step(s, spec, sb.features, sb.targets, opt);
    client_backward_update(c, spec, {0, sb.handle, step.d_features}, opt);
    EXPECT_TRUE(bit_equal(c.params(), slice(full, 0, cut))) << "cut " << cut;
    EXPECT_TRUE(bit_equal(s.params, slice(full, cut, layers.size()))) << "cut " << cut;
  }
}

TEST(ClientBackward, ClientGradientsThroughFrozenServerMatchFiniteDifferences) {
  const auto spec = two_block_net();
  Rng rng(6);
  auto [ch, sh] = init_split(spec, rng);
  for (auto& l : ch.layers)
    for (double& v : l.bias.values()) v = rng.uniform(0.1, 0.4);  // keep relu inputs away from the kink
  ServerModel s{sh, true};
  ClientModel c(0, ch);
  const Tensor x = fixed_input(3, 3, 2);
  const Targets y = Targets::classification({1, 2, 3});
  const auto sb = client_forward(c, spec, x, y);
  const auto g = server_grad_for_client(s, spec, sb);
  const auto grads = client_backward_update(c, spec, g, {OptimizerKind::sgd, 1e-9});
  const auto numeric = oracle::finite_diff_grad(
      [&](std::span<const double> t) {
        ParamBlock q = ch;
        unflatten_into(q.layers, t);
        return server_forward_loss(s, spec, forward(q, spec.client_layers(), x).output, y).loss;
      },
      flatten(ch.layers));
  EXPECT_LT(oracle::max_relative_error(flatten(grads), numeric), 1e-6);
}
