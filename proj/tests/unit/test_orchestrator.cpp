#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "splitsim/experiment.hpp"
#include "splitsim/oracle.hpp"

using namespace splitsim;

namespace {

std::vector<ClientDataset> one_client(const Dataset& d, std::size_t test_rows = 40) {
  ClientDataset c;
  std::vector<std::size_t> tr, te;
  for (std::size_t i = 0; i < d.size(); ++i) (i < d.size() - test_rows ? tr : te).push_back(i);
  c.train = d.subset(tr);
  c.test = d.subset(te);
  c.train_indices = tr;
  c.test_indices = te;
  return {c};
}

ExperimentConfig small(StrategyKind k) {
  ExperimentConfig cfg;
  cfg.data.samples = 800;
  cfg.data.mixture = {3, 5, 2.0, 1};
  cfg.model.hidden = {8};
  cfg.run.clients = 4;
  cfg.run.rounds = 12;
  cfg.run.batch_size = 8;
  cfg.run.attendance = 0.5;
  cfg.run.eval_every = 5;
  cfg.run.eval_train = true;
  cfg.run.strategy.kind = k;
  cfg.data.alpha = 1.0;
  return cfg;
}

}  // namespace

TEST(Run, SingleRoundSingleClient) {
  const auto d = gaussian_mixture({3, 4, 2.0, 1}, 200, 0);
  const auto clients = one_client(d);
  RunConfig cfg;
  cfg.rounds = 1;
  cfg.attendance = 1.0;
  cfg.strategy.kind = StrategyKind::psl;
  const SplitSpec spec(mlp_layers(4, {6}, 3, LayerKind::relu, true), 2);
  const auto r = run(cfg, spec, clients);
  EXPECT_EQ(r.state.round, 1u);
  EXPECT_EQ(r.rounds.size(), 1u);
  ASSERT_EQ(r.metrics.size(), 1u);
  EXPECT_EQ(r.metrics[0].round, 1u);
  cfg.rounds = 0;
  EXPECT_THROW(run(cfg, spec, clients), ConfigError);
}

TEST(Run, SeqSlMatchesCentralizedTrainer) {
  const auto d = gaussian_mixture({3, 4, 2.0, 1}, 300, 2);
  const auto clients = one_client(d);
  const SplitSpec spec(mlp_layers(4, {6, 5}, 3, LayerKind::tanh, true), 4);
  RunConfig cfg;
  cfg.rounds = 50;
  cfg.attendance = 1.0;
  cfg.batch_size = 10;
  cfg.seeds = {9, 4, 9, 7};
  cfg.strategy.kind = StrategyKind::seq_sl;
  cfg.strategy.lr_client = cfg.strategy.lr_server = 0.01;
  const auto r = run(cfg, spec, clients);

  oracle::CentralizedConfig cc;
  cc.steps = 50;
  cc.batch_size = 10;
  cc.optimizer = cfg.strategy.client_opt();
  cc.init_seed = 4;
  cc.shuffle_seed = 7;
  const auto ref = oracle::centralized_train(spec.layers, clients[0].train, cc);
  EXPECT_TRUE(bit_equal(r.state.clients[0].params().layers, slice(ref, 0, spec.cut).layers));
  EXPECT_TRUE(bit_equal(r.state.server.params.layers, slice(ref, spec.cut, spec.layers.size()).layers));
}

TEST(Run, EvaluationScheduleAndDeterminism) {
  const auto cfg = small(StrategyKind::cycle_psl);
  const auto a = run_experiment(cfg), b = run_experiment(cfg);
  std::ostringstream sa, sb;
  write_metrics_csv(sa, a.result.metrics);
  write_metrics_csv(sb, b.result.metrics);
  EXPECT_EQ(sa.str(), sb.str());
  std::vector<std::size_t> rounds;
  for (const auto& m : a.result.metrics) {
    if (m.split == "test") rounds.push_back(m.round);
  }
  EXPECT_EQ(rounds, (std::vector<std::size_t>{5, 10, 12}));
  EXPECT_EQ(a.result.metrics.size(), 6u);  // train and test rows
}

TEST(Run, DivergenceKeepsLastGoodState) {
  ExperimentConfig cfg;
  cfg.data.kind = DataKind::linear_regression;
  cfg.data.samples = 400;
  cfg.data.partition = PartitionScheme::iid;
  cfg.run.clients = 2;
  cfg.run.rounds = 40;
  cfg.run.attendance = 1.0;
  cfg.run.strategy.kind = StrategyKind::sflv2;
  cfg.run.strategy.optimizer = OptimizerKind::sgd;
  cfg.run.strategy.lr_client = cfg.run.strategy.lr_server = 10.0;
  const auto r = run_experiment(cfg);
  ASSERT_TRUE(r.result.diverged.has_value());
  EXPECT_EQ(r.result.state.round + 1, r.result.diverged->round);
  EXPECT_EQ(r.result.rounds.size(), r.result.state.round);
  for (const auto& c : r.result.state.clients) {
    for (const auto& l : c.params().layers) {
      if (!l.empty()) {
        EXPECT_TRUE(l.weight.all_finite());
      }
    }
  }
}

TEST(Evaluate, PureAndUntrainedNearChance) {
  const auto d = gaussian_mixture({4, 6, 2.0, 1}, 4000, 1);
  const auto clients = one_client(d, 2000);
  const SplitSpec spec(mlp_layers(6, {8}, 4, LayerKind::relu, true), 2);
  SplitState s = make_state(spec, 1, 0, 0);
  for (auto& l : s.server.params.layers)
    for (double& v : l.weight.values()) v = 0.0;  // uniform logits
  const auto a = evaluate(s, clients, EvalSplit::test);
  const auto b = evaluate(s, clients, EvalSplit::test);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.accuracy, b.accuracy);
  EXPECT_NEAR(a.loss, std::log(4.0), 1e-12);
  EXPECT_NEAR(a.accuracy, 0.25, 3 * std::sqrt(0.25 * 0.75 / 2000.0));
}

TEST(Evaluate, PerfectClassifier) {
  // one-hot inputs through identity-like layers with large logits
  const std::size_t n = 40;
  Tensor x = Tensor::zeros({n, 3});
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<int>(i % 3);
    x.at(i, i % 3) = 1.0;
  }
  Dataset d{x, Targets::classification(y), 3};
  const auto clients = one_client(d, 10);
  const SplitSpec spec({LayerSpec::dense(3, 3), LayerSpec::dense(3, 3), LayerSpec::softmax_output()}, 1);
  SplitState s = make_state(spec, 1, 0, 0);
  ParamBlock c = s.clients[0].params();
  c.layers[0].weight = Tensor::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  s.clients[0].assign(c);
  s.server.params.layers[0].weight = Tensor::matrix(3, 3, {60, 0, 0, 0, 60, 0, 0, 0, 60});
  const auto m = evaluate(s, clients, EvalSplit::train);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.mcc, 1.0);
  EXPECT_LT(m.loss, 1e-20);
}

TEST(Convergence, FirstRoundReachingThreshold) {
  const std::vector<double> h{0.1, 0.4, 0.5};
  EXPECT_EQ(convergence_round(h, 0.45), 3u);
  EXPECT_FALSE(convergence_round(h, 0.9).has_value());
  EXPECT_EQ(convergence_round(h, 0.0), 1u);
}

TEST(Config, ReadsSectionsAndRejectsUnknownKeys) {
  auto kv = KeyValueFile::parse(
      "schema = 1\n[data]\nsamples = 600  # comment\nclasses = 3\n[model]\nhidden = 16, 8\ncut = 2\n"
      "[run]\nstrategy = cycle-sglr\nlr = 0.01\nlr_server = 0.02\n[cycle]\nserver_epochs = 4\n[seeds]\ninit = 5\n");
  const auto c = read_experiment(kv);
  kv.expect_consumed();
  EXPECT_EQ(c.data.samples, 600u);
  EXPECT_EQ(c.model.hidden, (std::vector<std::size_t>{16, 8}));
  EXPECT_EQ(c.run.strategy.kind, StrategyKind::cycle_sglr);
  EXPECT_EQ(c.run.strategy.lr_client, 0.01);
  EXPECT_EQ(c.run.strategy.lr_server, 0.02);
  EXPECT_EQ(c.run.strategy.cycle.server_epochs, 4u);
  EXPECT_EQ(c.run.seeds.init, 5u);

  auto bad = KeyValueFile::parse("[run]\nlearning_rate = 3\n");
  read_experiment(bad);
  try {
    bad.expect_consumed();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("run.learning_rate"), std::string::npos);
  }
  EXPECT_THROW(KeyValueFile::parse("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(KeyValueFile::parse("[run\n"), ConfigError);
  auto not_number = KeyValueFile::parse("[run]\nrounds = ten\n");
  EXPECT_THROW(read_experiment(not_number), ConfigError);
  auto schema = KeyValueFile::parse("schema = 2\n");
  EXPECT_THROW(read_experiment(schema), ConfigError);
}

TEST(Report, MetricsCsvRoundTripsLosslessly) {
  std::vector<MetricsRecord> recs(2);
  recs[0] = {3, 10, "cycle-sfl", "test", 0.1 + 0.2, 1.0 / 3.0, std::nextafter(0.5, 1.0), -0.123456789012345678, 1e-300,
             2.5e10, 0.0};
  recs[1] = {3, 20, "psl", "train", 7.0, 0.25, 0.0, 0.0, 0.0, 0.0, 12.75};
  std::ostringstream os;
  write_metrics_csv(os, recs);
  std::istringstream is(os.str());
  const auto back = read_metrics_csv(is);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].round, recs[i].round);
    EXPECT_EQ(back[i].strategy, recs[i].strategy);
    for (auto f : {&MetricsRecord::loss, &MetricsRecord::accuracy, &MetricsRecord::macro_f1, &MetricsRecord::mcc,
                   &MetricsRecord::grad_norm_mean, &MetricsRecord::grad_norm_std, &MetricsRecord::wall_ms}) {
      EXPECT_EQ(back[i].*f, recs[i].*f);
    }
  }
}

TEST(Report, EventLogIsJsonLines) {
  auto cfg = small(StrategyKind::cycle_sfl);
  cfg.run.rounds = 2;
  const auto r = run_experiment(cfg);
  std::ostringstream os;
  write_events_jsonl(os, r.result.state.events);
  std::istringstream is(os.str());
  std::string line;
  std::uint64_t expect_seq = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j.at("seq").get<std::uint64_t>(), expect_seq++);
    EXPECT_TRUE(j.contains("phase"));
    EXPECT_EQ(j.at("wall_us").get<double>(), 0.0);
  }
  EXPECT_EQ(expect_seq, r.result.state.events.size());
}

TEST(Bench, ConvergenceCsvMarksUnreachedCells) {
  BenchCell cell;
  cell.strategy = StrategyKind::psl;
  cell.alpha = 0.1;
  SeedOutcome s;
  s.ok = true;
  MetricsRecord m;
  m.round = 10;
  m.accuracy = 0.5;
  s.test_history = {m};
  cell.seeds = {s};
  std::ostringstream os;
  write_convergence_csv(os, {cell}, {0.4, 0.9}, 600);
  EXPECT_NE(os.str().find("psl,0.10000000000000001,0.40000000000000002,10,"), std::string::npos) << os.str();
  EXPECT_NE(os.str().find("> 600"), std::string::npos);
}

TEST(Bench, EightStrategiesGiveEightRows) {
  auto base = small(StrategyKind::psl);
  base.run.rounds = 3;
  BenchSpec spec;
  spec.seeds = {0, 1};
  const auto cells = run_bench(base, spec, 2);
  EXPECT_EQ(cells.size(), 8u);
  std::ostringstream os;
  write_results_csv(os, cells);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 9);
  for (const auto& c : cells) EXPECT_EQ(c.failures(), 0u) << to_string(c.strategy);
}

TEST(Ablation, CutRowsAndDuplicateWarning) {
  auto base = small(StrategyKind::cycle_sfl);
  base.model.hidden = {8, 8, 8};  // four blocks
  base.run.rounds = 3;
  std::vector<std::string> warnings;
  const auto rows = run_ablation(base, AblationAxis::cut, {1, 2, 3, 2}, {0}, warnings, 2);
  EXPECT_EQ(rows.size(), 3u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_THROW(run_ablation(base, AblationAxis::cut, {4}, {0}, warnings), ConfigError);
  const auto epochs = run_ablation(base, AblationAxis::epochs, {1, 2, 4, 8}, {0}, warnings, 2);
  ASSERT_EQ(epochs.size(), 4u);
  EXPECT_EQ(epochs[3].value, 8u);
  base.run.strategy.kind = StrategyKind::sflv1;
  EXPECT_THROW(run_ablation(base, AblationAxis::epochs, {1}, {0}, warnings), ConfigError);
}
