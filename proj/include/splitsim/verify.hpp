#pragma once

// Self-verification suites: each one compares the protocol code against an
// oracle and reports a single pass/fail with a short diagnostic.

#include <algorithm>
#include <chrono>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "splitsim/experiment.hpp"
#include "splitsim/oracle.hpp"

namespace splitsim::verify {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

using BackwardFn = std::function<BackwardResult(const ParamBlock&, std::span<const LayerSpec>, const Tape&,
                                                const Tensor&, bool)>;

inline BackwardFn default_backward() {
  return [](const ParamBlock& p, std::span<const LayerSpec> s, const Tape& t, const Tensor& d, bool g) {
    return backward(p, s, t, d, g);
  };
}

namespace detail {

template <class Fn>
SuiteResult timed(std::string name, Fn&& fn) {
  SuiteResult r;
  r.name = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline Tensor random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.values()) v = rng.uniform(-scale, scale);
  return t;
}

inline Targets random_targets(Rng& rng, LossKind kind, std::size_t batch, std::size_t width) {
  if (kind == LossKind::cross_entropy) {
    std::vector<int> y(batch);
    for (int& v : y) v = static_cast<int>(rng.index(width));
    return Targets::classification(std::move(y));
  }
  return Targets::regression(random_matrix(rng, batch, width));
}

inline bool near_relu_kink(const Tape& tape, std::span<const LayerSpec> specs, double margin) {
  for (std::size_t k = 0; k < specs.size(); ++k) {
    if (specs[k].kind != LayerKind::relu) continue;
    for (double v : tape.activations[k].values()) {
      if (std::abs(v) < margin) return true;
    }
  }
  return false;
}

/// Small split-ready MLP used by several suites.
inline SplitSpec small_split(std::size_t in, std::size_t classes, std::size_t cut_layers = 2) {
  return SplitSpec(mlp_layers(in, {8, 8}, classes, LayerKind::relu, true), cut_layers);
}

inline std::vector<ClientDataset> single_client(const Dataset& d) {
  std::vector<std::size_t> all(d.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  ClientDataset c;
  c.train = d;
  c.test = d.subset(std::span<const std::size_t>(all).first(std::min<std::size_t>(all.size(), 20)));
  c.train_indices = all;
  return {c};
}

inline ExperimentConfig small_experiment(StrategyKind kind, std::size_t rounds) {
  ExperimentConfig cfg;
  cfg.data.samples = 1200;
  cfg.data.mixture = {4, 8, 1.5, 1};
  cfg.data.partition = PartitionScheme::dirichlet;
  cfg.data.alpha = 0.5;
  cfg.model.hidden = {16, 16};
  cfg.run.clients = 10;
  cfg.run.rounds = rounds;
  cfg.run.batch_size = 8;
  cfg.run.attendance = 0.3;
  cfg.run.eval_every = 5;
  cfg.run.strategy.kind = kind;
  return cfg;
}

}  // namespace detail

/// The central-difference oracle on functions with known derivatives.
inline SuiteResult check_finite_differences() {
  return detail::timed("finite-difference-oracle", [](SuiteResult& r) {
    auto sq = oracle::finite_diff_grad([](std::span<const double> t) { return t[0] * t[0]; }, {3.0}, 1e-6);
    auto flat = oracle::finite_diff_grad([](std::span<const double>) { return 7.0; }, {1.0, -2.0, 0.5}, 1e-6);
    const bool ok_sq = std::abs(sq[0] - 6.0) <= 1e-9;
    const bool ok_flat = std::all_of(flat.begin(), flat.end(), [](double v) { return v == 0.0; });
    r.passed = ok_sq && ok_flat;
    r.detail = "d/dx x^2 at 3 = " + fmt_double(sq[0]) + (ok_flat ? ", constant -> 0" : ", constant -> nonzero");
  });
}

/// Analytic parameter and input gradients vs central differences on random nets
/// (1-3 dense layers, widths <= 8, batch <= 4, both losses).
inline SuiteResult check_gradients(std::size_t instances = 100, double tolerance = 1e-6,
                                   const BackwardFn& bwd = default_backward(), std::uint64_t seed = 0) {
  return detail::timed("gradient-check", [&](SuiteResult& r) {
    Rng rng = Rng::substream(seed, "verify.gradients");
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    while (checked < instances) {
      const std::size_t dense = 1 + rng.index(3);
      const std::size_t batch = 1 + rng.index(4);
      const LossKind loss = rng.index(2) == 0 ? LossKind::cross_entropy : LossKind::mse;
      std::vector<LayerSpec> specs;
      std::size_t width = 1 + rng.index(8);
      const std::size_t in = width;
      for (std::size_t k = 0; k < dense; ++k) {
        const std::size_t out = (k + 1 == dense && loss == LossKind::cross_entropy) ? 2 + rng.index(7) : 1 + rng.index(8);
        specs.push_back(LayerSpec::dense(width, out));
        width = out;
        if (k + 1 < dense) specs.push_back(rng.index(2) == 0 ? LayerSpec::relu() : LayerSpec::tanh());
      }
      if (loss == LossKind::cross_entropy) specs.push_back(LayerSpec::softmax_output());
      ParamBlock p = init_params(specs, rng);
      for (auto& l : p.layers)
        for (double& b : l.bias.values()) b = rng.uniform(-0.5, 0.5);
      const Tensor x = detail::random_matrix(rng, batch, in);
      const Targets y = detail::random_targets(rng, loss, batch, width);

      auto fwd = forward(p, specs, x);
      if (detail::near_relu_kink(fwd.tape, specs, 1e-4)) {
        ++skipped;
        continue;
      }
      auto lg = loss_and_grad(fwd.output, y);
      auto analytic = bwd(p, specs, fwd.tape, lg.d_output, true);

      auto objective = [&](std::span<const double> theta) {
        ParamBlock q = p;
        unflatten_into(q.layers, theta);
        return loss_and_grad(forward(q, specs, x).output, y).loss;
      };
      const auto numeric = oracle::finite_diff_grad(objective, flatten(p.layers));
      const auto exact = flatten(analytic.grads);
      worst = std::max(worst, oracle::max_relative_error(exact, numeric));

      auto input_objective = [&](std::span<const double> v) {
        Tensor xi({x.rows(), x.cols()}, std::vector<double>(v.begin(), v.end()));
        return loss_and_grad(forward(p, specs, xi).output, y).loss;
      };
      const auto numeric_in =
          oracle::finite_diff_grad(input_objective, std::vector<double>(x.values().begin(), x.values().end()));
      worst = std::max(worst, oracle::max_relative_error(analytic.d_input.values(), numeric_in));
      ++checked;
    }
    r.passed = worst < tolerance;
    r.detail = std::to_string(checked) + " nets, max relative error " + fmt_double(worst) + " (skipped " +
               std::to_string(skipped) + " near a relu kink)";
  });
}

/// For every cut of a 4-block MLP, one split step (client forward, server
/// step, client backward) leaves both halves bit-identical to one centralized
/// step on the unsplit network.
inline SuiteResult check_compositionality(std::uint64_t seed = 0) {
  return detail::timed("compositionality", [&](SuiteResult& r) {
    Rng rng = Rng::substream(seed, "verify.compositionality");
    const auto layers = mlp_layers(6, {8, 7, 5}, 4, LayerKind::relu, true);
    const Tensor x = detail::random_matrix(rng, 5, 6);
    const Targets y = detail::random_targets(rng, LossKind::cross_entropy, 5, 4);
    std::size_t cuts = 0;
    for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
      const OptimizerConfig opt{kind, 0.05};
      for (std::size_t cut = 1; cut < layers.size(); ++cut) {
        SplitSpec spec(layers, cut);
        Rng init = Rng::substream(seed, "init");
        ParamBlock full = init_params(layers, init);
        // a couple of warm-up steps so Adam moments are non-trivial
        for (int s = 0; s < 3; ++s) {
          auto f = forward(full, layers, x);
          auto lg = loss_and_grad(f.output, y);
          apply_update(full, backward(full, layers, f.tape, lg.d_output).grads, opt);
        }
        ClientModel client(0, slice(full, 0, cut));
        ServerModel server{slice(full, cut, layers.size()), false};

        auto f = forward(full, layers, x);
        auto lg = loss_and_grad(f.output, y);
        apply_update(full, backward(full, layers, f.tape, lg.d_output).grads, opt);

        auto smashed = client_forward(client, spec, x, y);
        auto step = server_step(server, spec, smashed.features, smashed.targets, opt);
        client_backward_update(client, spec, {0, smashed.handle, step.d_features}, opt);

        if (step.loss != lg.loss || !bit_equal(client.params(), slice(full, 0, cut)) ||
            !bit_equal(server.params, slice(full, cut, layers.size()))) {
          r.passed = false;
          r.detail = std::string("mismatch at layer cut ") + std::to_string(cut) + " with " + to_string(kind);
          return;
        }
        ++cuts;
      }
    }
    r.passed = true;
    r.detail = std::to_string(cuts) + " (cut, optimizer) pairs bit-identical";
  });
}

/// Sequential split learning with one client against the centralized trainer.
inline SuiteResult check_seq_sl_centralized(std::size_t steps = 200, std::uint64_t seed = 0) {
  return detail::timed("seq-sl-equals-centralized", [&](SuiteResult& r) {
    const Dataset d = gaussian_mixture({4, 8, 1.5, 1}, 400, seed);
    const auto clients = detail::single_client(d);
    const SplitSpec spec = detail::small_split(8, 4);
    RunConfig cfg;
    cfg.rounds = steps;
    cfg.batch_size = 16;
    cfg.attendance = 1.0;
    cfg.eval_every = steps;
    cfg.seeds = SeedBundle::all(seed);
    cfg.strategy.kind = StrategyKind::seq_sl;
    cfg.strategy.lr_client = cfg.strategy.lr_server = 1e-2;
    const auto res = run(cfg, spec, clients);

    oracle::CentralizedConfig cc;
    cc.steps = steps;
    cc.batch_size = cfg.batch_size;
    cc.optimizer = cfg.strategy.client_opt();
    cc.init_seed = seed;
    cc.shuffle_seed = seed;
    const auto ref = oracle::centralized_train(spec.layers, d, cc);

    const auto split_flat = flatten(res.state.clients[0].params().layers);
    auto server_flat = flatten(res.state.server.params.layers);
    std::vector<double> got = split_flat;
    got.insert(got.end(), server_flat.begin(), server_flat.end());
    const auto want = flatten(ref.layers);
    double diff = got.size() == want.size() ? 0.0 : 1.0;
    for (std::size_t i = 0; i < std::min(got.size(), want.size()); ++i) diff = std::max(diff, std::abs(got[i] - want[i]));
    r.passed = diff == 0.0 && !res.diverged;
    r.detail = std::to_string(steps) + " steps, max |param diff| = " + fmt_double(diff);
  });
}

/// Paired rounds from identical states: sflv2 (end-to-end) vs cycle-sfl with
/// E = 1 and the resample pinned to the one collected batch. Server steps must
/// match; client steps must differ whenever the server moved; every served
/// gradient is recomputed from its audited server snapshot.
inline SuiteResult check_cyclical_update(std::size_t pairs = 20, std::uint64_t seed = 0) {
  return detail::timed("cyclical-update", [&](SuiteResult& r) {
    const SplitSpec spec = detail::small_split(8, 4);
    const Dataset d = gaussian_mixture({4, 8, 1.5, 1}, 400, seed);
    std::size_t moved = 0;
    for (std::size_t p = 0; p < pairs; ++p) {
      SplitState base = make_state(spec, 1, seed + p, seed + p);
      // advance a few ordinary rounds so the pair does not start from initialization
      StrategyConfig warm;
      warm.kind = StrategyKind::sflv2;
      auto sampler = BatchSampler::for_client(d.size(), 16, seed + p, 0);
      for (std::size_t w = 0; w < p % 4; ++w) {
        const auto idx = sampler.next();
        std::vector<ParticipantBatch> b{{0, d.x.gather_rows(idx), d.y.gather(idx)}};
        execute_round(base, warm, b);
      }
      const auto idx = sampler.next();
      std::vector<ParticipantBatch> batch{{0, d.x.gather_rows(idx), d.y.gather(idx)}};
      const ParamBlock server_before = base.server.params;

      SplitState e2e = base, cyc = base;
      StrategyConfig a;
      a.kind = StrategyKind::sflv2;
      a.audit = true;
      StrategyConfig c = a;
      c.kind = StrategyKind::cycle_sfl;
      c.cycle = {1, 0, ServerPassMode::sampled_steps, ResampleOrder::in_order};
      const auto oa = execute_round(e2e, a, batch);
      const auto oc = execute_round(cyc, c, batch);

      auto fail = [&](const std::string& why) {
        r.passed = false;
        r.detail = "pair " + std::to_string(p) + ": " + why;
      };
      if (!bit_equal(e2e.server.params, cyc.server.params)) return fail("server steps differ");
      const bool server_moved = !bit_equal(server_before.layers, cyc.server.params.layers);
      const bool clients_differ = !bit_equal(e2e.clients[0].params().layers, cyc.clients[0].params().layers);
      if (server_moved && !clients_differ) return fail("client steps identical although the server moved");
      moved += server_moved;

      // audit: cycle gradients come from theta_S^{t+1}, end-to-end ones from theta_S^t
      if (oa.audits.size() != 1 || oc.audits.size() != 1) return fail("missing audit records");
      if (!bit_equal(oa.audits[0].server_snapshot, server_before)) return fail("baseline audit is not theta_S^t");
      if (!bit_equal(oc.audits[0].server_snapshot, cyc.server.params)) return fail("cycle audit is not theta_S^{t+1}");
      for (const auto* o : {&oa, &oc}) {
        ServerModel snap{o->audits[0].server_snapshot, true};
        SmashedBatch sb{0, 0, o->audits[0].features, o->audits[0].targets};
        const auto again = server_grad_for_client(snap, spec, sb);
        if (!again.d_features.bit_equal(o->audits[0].served) || !again.d_features.bit_equal(o->applied[0].d_features)) {
          return fail("recomputed cut gradient differs from the served one");
        }
      }
    }
    r.passed = moved > 0;
    r.detail = std::to_string(pairs) + " paired rounds, server moved in " + std::to_string(moved);
  });
}

/// Closed-form one-neuron example plus the near-convergence sweep.
inline SuiteResult check_toy_sweep(std::size_t residual_points = 200, std::size_t min_valid = 10000) {
  return detail::timed("toy-sweep", [&](SuiteResult& r) {
    const auto s = oracle::toy_steps({1.0, 2.0, 1.0, 1.0, 0.1});
    const bool seed_ok = std::abs(s.w_s_after - 1.8) <= 1e-15 && std::abs(s.end_to_end_client_step - 0.4) <= 1e-15 &&
                         std::abs(s.cycle_client_step - 0.288) <= 1e-15;
    const auto rep = oracle::toy_sweep(residual_points);
    r.passed = seed_ok && rep.all_hold() && rep.valid() >= min_valid;
    r.detail = "seed instance " + fmt_double(s.cycle_client_step) + " vs " + fmt_double(s.end_to_end_client_step) + "; " +
               std::to_string(rep.valid()) + " in-regime points, " + std::to_string(rep.violations.size()) +
               " violations, " + std::to_string(rep.excluded) + " excluded";
  });
}

/// Per round of a cycle-sfl run: the feature store is the multiset union of
/// the smashed batches (recomputed from the pre-round client models), and each
/// epoch pass visits every row exactly once.
inline SuiteResult check_feature_store(std::size_t rounds = 100, std::size_t epochs = 2, std::uint64_t seed = 0) {
  return detail::timed("feature-store", [&](SuiteResult& r) {
    auto cfg = detail::small_experiment(StrategyKind::cycle_sfl, rounds);
    cfg.run.seeds = SeedBundle::all(seed);
    cfg.run.strategy.trace_store = true;
    cfg.run.strategy.cycle.server_epochs = epochs;
    cfg.run.strategy.cycle.server_batch = 5;  // does not divide the store: exercises the tail chunk
    std::size_t checked = 0;
    std::string failure;
    auto row_key = [](const Tensor& f, std::size_t row, int label, std::size_t origin) {
      std::string k(reinterpret_cast<const char*>(f.row(row).data()), f.cols() * sizeof(double));
      k.append(reinterpret_cast<const char*>(&label), sizeof label);
      k.append(reinterpret_cast<const char*>(&origin), sizeof origin);
      return k;
    };
    const auto observer = [&](const SplitState& before, std::span<const ParticipantBatch> batches,
                              const RoundOutcome& out) {
      if (!failure.empty()) return;
      if (!out.store) {
        failure = "no store trace";
        return;
      }
      const auto& st = *out.store;
      std::vector<std::string> expected, actual;
      for (const auto& b : batches) {
        const auto f = forward(before.clients[b.client_id].params(), before.spec.client_layers(), b.x).output;
        for (std::size_t i = 0; i < f.rows(); ++i) expected.push_back(row_key(f, i, b.y.classes[i], b.client_id));
      }
      for (std::size_t i = 0; i < st.features.rows(); ++i) {
        actual.push_back(row_key(st.features, i, st.targets.classes[i], st.origin[i]));
      }
      std::sort(expected.begin(), expected.end());
      std::sort(actual.begin(), actual.end());
      if (expected != actual) failure = "store differs from the union of smashed batches";
      if (st.passes.size() != epochs) failure = "wrong number of epoch passes";
      for (const auto& pass : st.passes) {
        std::vector<std::size_t> seen = pass;
        std::sort(seen.begin(), seen.end());
        for (std::size_t i = 0; i < seen.size(); ++i) {
          if (seen.size() != st.features.rows() || seen[i] != i) failure = "an epoch pass is not a permutation of the store";
        }
      }
      ++checked;
    };
    auto run_out = run_experiment(cfg, observer);
    r.passed = failure.empty() && checked == rounds && !run_out.result.diverged;
    r.detail = failure.empty() ? std::to_string(checked) + " rounds checked" : failure;
  });
}

/// Server-side cost taxonomy: replicas, forwards and backwards per smashed sample.
inline SuiteResult check_cost_counters(std::uint64_t seed = 0) {
  return detail::timed("cost-counters", [&](SuiteResult& r) {
    std::ostringstream detail;
    bool ok = true;
    for (auto k : {StrategyKind::psl, StrategyKind::sflv1, StrategyKind::sglr, StrategyKind::sflv2, StrategyKind::seq_sl,
                   StrategyKind::cycle_psl, StrategyKind::cycle_sfl, StrategyKind::cycle_sglr}) {
      auto cfg = detail::small_experiment(k, 20);
      cfg.run.seeds = SeedBundle::all(seed);
      auto out = run_experiment(cfg);
      const auto& c = out.result.state.costs;
      const std::size_t k_per_round = participants_per_round(out.data.parts.clients.size(), cfg.run.attendance);
      const bool replicated = k == StrategyKind::psl || k == StrategyKind::sflv1 || k == StrategyKind::sglr;
      const std::size_t want_replicas = replicated ? k_per_round : 1;
      const double want_fwd = is_cycle(k) ? 2.0 : 1.0;
      const bool this_ok = c.peak_server_replicas == want_replicas && c.forwards_per_smashed_sample() == want_fwd &&
                           c.backwards_per_smashed_sample() == want_fwd &&
                           (is_cycle(k) ? c.server_aggregations == 0 : true);
      ok = ok && this_ok;
      detail << to_string(k) << ": replicas " << c.peak_server_replicas << ", fwd/sample "
             << c.forwards_per_smashed_sample() << (this_ok ? "" : " (unexpected)") << "; ";
    }
    r.passed = ok;
    r.detail = detail.str();
  });
}

/// The same configuration twice yields byte-identical metrics CSV.
inline SuiteResult check_determinism(std::uint64_t seed = 0) {
  return detail::timed("determinism", [&](SuiteResult& r) {
    auto cfg = detail::small_experiment(StrategyKind::cycle_sglr, 30);
    cfg.run.seeds = SeedBundle::all(seed);
    std::string csv[2];
    for (auto& s : csv) {
      std::ostringstream os;
      write_metrics_csv(os, run_experiment(cfg).result.metrics);
      s = os.str();
    }
    r.passed = csv[0] == csv[1] && !csv[0].empty();
    r.detail = std::to_string(csv[0].size()) + " bytes of metrics CSV, " + (r.passed ? "identical" : "different");
  });
}

struct VerifyOptions {
  BackwardFn backward = default_backward();
};

inline std::vector<SuiteResult> run_all(const VerifyOptions& opts = {}) {
  return {check_finite_differences(),
          check_gradients(100, 1e-6, opts.backward),
          check_compositionality(),
          check_seq_sl_centralized(),
          check_cyclical_update(),
          check_toy_sweep(),
          check_feature_store(),
          check_cost_counters(),
          check_determinism()};
}

}  // namespace splitsim::verify
