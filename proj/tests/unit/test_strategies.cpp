#include <gtest/gtest.h>

#include "splitsim/experiment.hpp"
#include "splitsim/verify.hpp"

using namespace splitsim;

namespace {

SplitSpec small_spec() { return SplitSpec(mlp_layers(6, {8, 8}, 3, LayerKind::relu, true), 2); }

ParticipantBatch make_batch(std::size_t id, std::size_t rows, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x = Tensor::zeros({rows, 6});
  for (double& v : x.values()) v = rng.normal();
  std::vector<int> y(rows);
  for (int& v : y) v = static_cast<int>(rng.index(3));
  return {id, std::move(x), Targets::classification(std::move(y))};
}

StrategyConfig sgd(StrategyKind k, double lr = 0.05) {
  StrategyConfig c;
  c.kind = k;
  c.optimizer = OptimizerKind::sgd;
  c.lr_client = c.lr_server = lr;
  return c;
}

std::vector<std::string> phases(const SplitState& s) {
  std::vector<std::string> out;
  for (const auto& e : s.events) out.push_back(e.phase);
  return out;
}

}  // namespace

TEST(WeightedAverage, SingleBlockIsExact) {
  Rng rng(1);
  const auto spec = small_spec();
  const ParamBlock p = init_split(spec, rng).second;
  const ParamBlock* blocks[] = {&p};
  const std::size_t sizes[] = {7};
  EXPECT_TRUE(bit_equal(weighted_average(blocks, sizes), p));
}

TEST(SeqSl, TwoClientsSameBatchEqualTwoSteps) {
  const auto spec = small_spec();
  const auto b = make_batch(0, 8, 3);
  SplitState two = make_state(spec, 2, 0, 0);
  std::vector<ParticipantBatch> both{b, b};
  both[1].client_id = 1;
  execute_round(two, sgd(StrategyKind::seq_sl), both);

  SplitState one = make_state(spec, 1, 0, 0);
  std::vector<ParticipantBatch> single{b};
  execute_round(one, sgd(StrategyKind::seq_sl), single);
  execute_round(one, sgd(StrategyKind::seq_sl), single);
  EXPECT_TRUE(bit_equal(two.relay->layers, one.clients[0].params().layers));
  EXPECT_TRUE(bit_equal(two.server.params, one.server.params));
}

TEST(SeqSl, RelayOrderMatters) {
  const auto spec = small_spec();
  const auto a = make_batch(0, 8, 3), b = make_batch(0, 8, 4);
  auto run_order = [&](const ParticipantBatch& first, const ParticipantBatch& second) {
    SplitState s = make_state(spec, 2, 0, 0);
    std::vector<ParticipantBatch> bs{first, second};
    bs[0].client_id = 0;
    bs[1].client_id = 1;
    execute_round(s, sgd(StrategyKind::seq_sl), bs);
    return s;
  };
  const auto ab = run_order(a, b), ba = run_order(b, a);
  EXPECT_FALSE(bit_equal(ab.server.params, ba.server.params));
  EXPECT_FALSE(bit_equal(ab.relay->layers, ba.relay->layers));
}

TEST(Psl, SingleParticipantEqualsSeqSl) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5)};
  SplitState p = make_state(spec, 1, 2, 2), q = make_state(spec, 1, 2, 2);
  execute_round(p, sgd(StrategyKind::psl), b);
  execute_round(q, sgd(StrategyKind::seq_sl), b);
  EXPECT_TRUE(bit_equal(p.server.params, q.server.params));
  EXPECT_TRUE(bit_equal(p.clients[0].params(), q.clients[0].params()));
}

TEST(Psl, IdenticalReplicasAverageToThemselves) {
  const auto spec = small_spec();
  auto b = make_batch(0, 8, 5);
  std::vector<ParticipantBatch> two{b, b};
  two[1].client_id = 1;
  SplitState s = make_state(spec, 2, 0, 0);
  SplitState one = make_state(spec, 1, 0, 0);
  execute_round(s, sgd(StrategyKind::psl), two);
  std::vector<ParticipantBatch> single{b};
  execute_round(one, sgd(StrategyKind::psl), single);
  EXPECT_TRUE(bit_equal(s.server.params.layers, one.server.params.layers));
}

TEST(Psl, ServerIsSampleWeightedMeanOfReplicas) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 16, 6), make_batch(1, 32, 7)};
  SplitState s = make_state(spec, 2, 0, 0);
  const auto cfg = sgd(StrategyKind::psl);

  // each replica stepped by hand from the pre-round server
  std::vector<ParamBlock> replicas;
  for (const auto& pb : b) {
    ServerModel r = s.server;
    const auto f = forward(s.clients[pb.client_id].params(), spec.client_layers(), pb.x).output;
    server_step(r, spec, f, pb.y, cfg.server_opt());
    replicas.push_back(r.params);
  }
  execute_round(s, cfg, b);
  const auto want_a = flatten(replicas[0].layers), want_b = flatten(replicas[1].layers);
  const auto got = flatten(s.server.params.layers);
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_NEAR(got[i], (16.0 / 48.0) * want_a[i] + (32.0 / 48.0) * want_b[i], 1e-15);
  }
  // clients are not averaged in psl
  EXPECT_FALSE(bit_equal(s.clients[0].params().layers, s.clients[1].params().layers));
}

TEST(Sflv1, SingleParticipantAggregationIsIdentity) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5)};
  SplitState v1 = make_state(spec, 1, 0, 0), p = make_state(spec, 1, 0, 0);
  execute_round(v1, sgd(StrategyKind::sflv1), b);
  execute_round(p, sgd(StrategyKind::psl), b);
  EXPECT_TRUE(bit_equal(v1.clients[0].params().layers, p.clients[0].params().layers));
}

TEST(Sflv1, BroadcastMakesAllClientsIdentical) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(1, 8, 5), make_batch(3, 8, 9)};
  SplitState s = make_state(spec, 5, 0, 0);
  execute_round(s, sgd(StrategyKind::sflv1), b);
  for (const auto& c : s.clients) EXPECT_TRUE(bit_equal(c.params().layers, s.clients[0].params().layers));
  EXPECT_EQ(s.costs.client_aggregations, 1u);
}

TEST(Sflv2, ServerTrajectoryMatchesSeqSlWithOneClient) {
  const auto spec = small_spec();
  SplitState a = make_state(spec, 1, 1, 1), b = make_state(spec, 1, 1, 1);
  for (std::uint64_t r = 0; r < 5; ++r) {
    std::vector<ParticipantBatch> batch{make_batch(0, 8, 20 + r)};
    execute_round(a, sgd(StrategyKind::sflv2), batch);
    execute_round(b, sgd(StrategyKind::seq_sl), batch);
    EXPECT_TRUE(bit_equal(a.server.params, b.server.params)) << "round " << r;
  }
}

TEST(Sglr, SingleParticipantEqualsPsl) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5)};
  SplitState g = make_state(spec, 1, 0, 0), p = make_state(spec, 1, 0, 0);
  execute_round(g, sgd(StrategyKind::sglr), b);
  execute_round(p, sgd(StrategyKind::psl), b);
  EXPECT_TRUE(bit_equal(g.clients[0].params(), p.clients[0].params()));
  EXPECT_TRUE(bit_equal(g.server.params, p.server.params));
}

TEST(Sglr, OppositeCutGradientsCancel) {
  // zero client weights make the smashed features exactly zero, and a linear
  // server with dyadic weights turns targets +1 / -1 into gradients g and -g
  SplitSpec spec({LayerSpec::dense(2, 2), LayerSpec::dense(2, 1)}, 1);
  SplitState s = make_state(spec, 2, 0, 0);
  ParamBlock client = s.clients[0].params();
  for (auto& v : client.layers[0].weight.values()) v = 0.0;
  for (auto& c : s.clients) c.assign(client);
  s.server.params.layers[0].weight = Tensor::matrix(1, 2, {0.5, -0.25});
  const Tensor x = Tensor::matrix(2, 2, {1, 2, 3, 4});
  std::vector<ParticipantBatch> b{{0, x, Targets::regression(Tensor::matrix(2, 1, {1, 1}))},
                                  {1, x, Targets::regression(Tensor::matrix(2, 1, {-1, -1}))}};
  SplitState psl = s;
  auto cfg = sgd(StrategyKind::sglr);
  cfg.audit = true;
  const auto out = execute_round(s, cfg, b);
  for (const auto& c : s.clients) EXPECT_TRUE(bit_equal(c.params().layers, client.layers));
  ASSERT_EQ(out.served.size(), 2u);
  for (std::size_t i = 0; i < out.served[0].d_features.size(); ++i) {
    EXPECT_EQ(out.served[0].d_features[i], -out.served[1].d_features[i]);
    EXPECT_NE(out.served[0].d_features[i], 0.0);
  }
  execute_round(psl, sgd(StrategyKind::psl), b);
  EXPECT_FALSE(bit_equal(psl.clients[0].params().layers, client.layers));
}

TEST(Sglr, AppliedGradientIsTheMeanOfServedGradients) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5), make_batch(1, 8, 6), make_batch(2, 8, 7)};
  SplitState s = make_state(spec, 3, 0, 0);
  auto cfg = sgd(StrategyKind::sglr);
  cfg.audit = true;
  const auto out = execute_round(s, cfg, b);
  ASSERT_EQ(out.served.size(), 3u);
  for (const auto& a : out.applied) {
    for (std::size_t i = 0; i < a.d_features.size(); ++i) {
      const double manual =
          (out.served[0].d_features[i] + out.served[1].d_features[i] + out.served[2].d_features[i]) * (1.0 / 3.0);
      EXPECT_EQ(a.d_features[i], manual);
    }
  }
}

TEST(Sglr, UnequalBatchSizesRejected) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5), make_batch(1, 4, 6)};
  SplitState s = make_state(spec, 2, 0, 0);
  try {
    execute_round(s, sgd(StrategyKind::sglr), b);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("sglr"), std::string::npos);
  }
}

TEST(Round, ParticipantsMustBeAscending) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(1, 8, 5), make_batch(0, 8, 6)};
  SplitState s = make_state(spec, 2, 0, 0);
  EXPECT_THROW(execute_round(s, sgd(StrategyKind::psl), b), ContractError);
  std::vector<ParticipantBatch> none;
  EXPECT_THROW(execute_round(s, sgd(StrategyKind::psl), none), ContractError);
}

TEST(Cycle, MatchesEndToEndServerStepButNotClientStep) {
  const auto r = verify::check_cyclical_update(5);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Cycle, PhaseOrder) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5), make_batch(2, 8, 6)};
  SplitState s = make_state(spec, 3, 0, 0);
  execute_round(s, sgd(StrategyKind::cycle_sfl), b);
  const std::vector<std::string> want{"collect",          "collect",          "server-train",  "server-train",
                                      "freeze",           "gradient-service", "gradient-service", "unfreeze",
                                      "client-update",    "client-update",    "aggregate-clients"};
  EXPECT_EQ(phases(s), want);
  EXPECT_FALSE(s.server.frozen);
}

TEST(Cycle, SmallStoreClipsServerBatchWithNotice) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 4, 5)};
  SplitState s = make_state(spec, 1, 0, 0);
  auto cfg = sgd(StrategyKind::cycle_psl);
  cfg.cycle.server_batch = 64;
  cfg.trace_store = true;
  const auto out = execute_round(s, cfg, b);
  EXPECT_EQ(out.store->server_batch, 4u);
  EXPECT_EQ(s.events.front().phase, "collect");
  bool noticed = false;
  for (const auto& e : s.events) noticed = noticed || (e.phase == "notice" && e.note.find("clipped") != std::string::npos);
  EXPECT_TRUE(noticed);
}

TEST(Cycle, EpochsMultiplyServerSteps) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5), make_batch(1, 8, 6)};
  for (std::size_t e : {1u, 2u, 4u, 8u}) {
    SplitState s = make_state(spec, 2, 0, 0);
    auto cfg = sgd(StrategyKind::cycle_sglr);
    cfg.cycle.server_epochs = e;
    cfg.cycle.server_batch = 4;
    execute_round(s, cfg, b);
    EXPECT_EQ(s.costs.server_optimizer_steps, e * 4);
    EXPECT_EQ(s.costs.server_forward_samples, e * 16 + 16);
  }
}

TEST(Costs, ReplicasAndServerPasses) {
  const auto spec = small_spec();
  std::vector<ParticipantBatch> b{make_batch(0, 8, 5), make_batch(1, 8, 6), make_batch(2, 8, 7)};
  for (auto k : kAllStrategies) {
    SplitState s = make_state(spec, 3, 0, 0);
    execute_round(s, sgd(k), b);
    const auto& c = cost_counters(s);
    const bool replicated = k == StrategyKind::psl || k == StrategyKind::sflv1 || k == StrategyKind::sglr;
    EXPECT_EQ(c.peak_server_replicas, replicated ? 3u : 1u) << to_string(k);
    EXPECT_EQ(c.server_forward_calls, is_cycle(k) ? 6u : 3u) << to_string(k);
    EXPECT_EQ(c.server_backward_calls, c.server_forward_calls) << to_string(k);
    EXPECT_EQ(c.smashed_batches, 3u);
    EXPECT_EQ(c.bytes_down, 3u * 8u * 8u * sizeof(double));
    EXPECT_EQ(c.server_aggregations, replicated ? 1u : 0u) << to_string(k);
  }
}
