#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitsim/data.hpp"
#include "splitsim/metrics.hpp"
#include "splitsim/strategies.hpp"

namespace splitsim {

/// Roots of the four independent random streams of a run.
struct SeedBundle {
  std::uint64_t data = 0;
  std::uint64_t init = 0;
  std::uint64_t participation = 0;
  std::uint64_t shuffle = 0;

  static SeedBundle all(std::uint64_t s) { return {s, s, s, s}; }
  friend bool operator==(const SeedBundle&, const SeedBundle&) = default;
};

struct RunConfig {
  std::size_t clients = 1;  // before exclusions; the run uses the clients it is given
  std::size_t rounds = 1;
  StrategyConfig strategy;
  std::size_t batch_size = 16;
  double attendance = 1.0;
  std::size_t eval_every = 10;
  bool eval_train = false;
  SeedBundle seeds;

  void validate() const {
    if (rounds < 1) throw ConfigError("rounds must be at least 1");
    if (!(strategy.lr_client > 0.0) || !(strategy.lr_server > 0.0)) throw ConfigError("learning rates must be positive");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (!(attendance > 0.0 && attendance <= 1.0)) throw ConfigError("attendance must lie in (0, 1]");
    if (strategy.cycle.server_epochs < 1) throw ConfigError("server_epochs must be at least 1");
  }
};

enum class EvalSplit { train, test };

struct MetricsRecord {
  std::uint64_t seed = 0;
  std::size_t round = 0;
  std::string strategy;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  double mcc = 0.0;
  double grad_norm_mean = 0.0;
  double grad_norm_std = 0.0;
  double wall_ms = 0.0;

  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct RoundRecord {
  std::size_t round = 0;  // 1-based
  std::vector<std::size_t> participants;
  double mean_loss = 0.0;
  GradNormStats grad_norms;
};

struct Divergence {
  std::size_t round = 0;  // 1-based round that failed
  std::string message;
};

struct RunResult {
  SplitState state;  // last good state
  std::vector<MetricsRecord> metrics;
  std::vector<RoundRecord> rounds;
  std::optional<Divergence> diverged;
};

/// Called after each round with the pre-round models, the batches and the outcome.
using RoundObserver =
    std::function<void(const SplitState& before, std::span<const ParticipantBatch>, const RoundOutcome&)>;

/// Each client's own client model composed with the global server, on that
/// client's shard; losses and confusion counts are pooled, i.e. sample-weighted.
inline MetricsRecord evaluate(const SplitState& state, std::span<const ClientDataset> data, EvalSplit split) {
  MetricsRecord rec;
  rec.split = split == EvalSplit::train ? "train" : "test";
  const std::size_t classes = state.spec.output_dim();
  const bool classify = !data.empty() && data.front().train.y.kind == LossKind::cross_entropy;
  ConfusionMatrix cm(classify ? classes : 1);
  double loss_sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : data) {
    const Dataset& d = split == EvalSplit::train ? c.train : c.test;
    if (d.size() == 0) continue;
    const auto& client = state.clients.at(c.client_id);
    auto feats = forward(client.params(), state.spec.client_layers(), d.x);
    auto out = forward(state.server.params, state.spec.server_layers(), feats.output);
    loss_sum += loss_and_grad(out.output, d.y).loss * static_cast<double>(d.size());
    n += d.size();
    if (classify) {
      const auto pred = argmax_rows(out.output);
      for (std::size_t i = 0; i < pred.size(); ++i) cm.add(d.y.classes[i], pred[i]);
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  rec.loss = n ? loss_sum / static_cast<double>(n) : nan;
  if (classify && n) {
    rec.accuracy = accuracy(cm);
    rec.macro_f1 = macro_f1(cm);
    rec.mcc = mcc(cm);
  } else {
    rec.accuracy = rec.macro_f1 = rec.mcc = nan;
  }
  return rec;
}

/// First 1-based position whose value reaches `threshold`.
inline std::optional<std::size_t> convergence_round(std::span<const double> history, double threshold) {
  for (std::size_t i = 0; i < history.size(); ++i) {
    if (history[i] >= threshold) return i + 1;
  }
  return std::nullopt;
}

namespace detail {

inline SplitState snapshot_models(SplitState& s) {
  std::vector<Event> events = std::move(s.events);
  SplitState copy = s;
  s.events = std::move(events);
  return copy;
}

inline bool outcome_finite(const RoundOutcome& o) {
  if (!std::isfinite(o.mean_loss)) return false;
  for (double l : o.server_train_losses) {
    if (!std::isfinite(l)) return false;
  }
  return true;
}

}  // namespace detail

/// Outer training loop: participation sampling, one local batch per
/// participant, one strategy round, evaluation every `eval_every` rounds and
/// after the last one. A non-finite loss stops the run and keeps the
/// pre-round state.
inline RunResult run(const RunConfig& cfg, const SplitSpec& spec, std::span<const ClientDataset> data,
                     const RoundObserver& observer = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("run needs at least one client dataset");
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].client_id != i) throw ConfigError("client datasets must carry contiguous ids 0..N-1");
    if (data[i].train.size() < cfg.batch_size) throw ConfigError("client " + std::to_string(i) + " cannot fill a batch");
    if (data[i].train.dim() != spec.input_dim()) throw DimensionError("client data width differs from model input");
  }
  const auto started = std::chrono::steady_clock::now();
  const std::size_t N = data.size();

  RunResult res;
  res.state = make_state(spec, N, cfg.seeds.init, cfg.seeds.shuffle);
  const auto plan = sample_participants(N, cfg.attendance, cfg.rounds, cfg.seeds.participation);
  std::vector<BatchSampler> samplers;
  samplers.reserve(N);
  for (std::size_t i = 0; i < N; ++i) {
    samplers.push_back(BatchSampler::for_client(data[i].train.size(), cfg.batch_size, cfg.seeds.shuffle, i));
  }

  GradNormStats window;
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    std::vector<ParticipantBatch> batches;
    for (std::size_t id : plan.rounds[t]) {
      const auto idx = samplers[id].next();
      batches.push_back({id, data[id].train.x.gather_rows(idx), data[id].train.y.gather(idx)});
    }
    SplitState before = detail::snapshot_models(res.state);
    const std::size_t events_before = res.state.events.size();
    RoundOutcome outcome;
    std::optional<std::string> failure;
    try {
      outcome = execute_round(res.state, cfg.strategy, batches);
      if (!detail::outcome_finite(outcome)) failure = "non-finite loss";
    } catch (const NumericError& e) {
      failure = e.what();
    }
    if (failure) {
      res.state.events.resize(events_before);
      std::vector<Event> events = std::move(res.state.events);
      res.state = std::move(before);
      res.state.events = std::move(events);
      res.diverged = Divergence{t + 1, *failure};
      break;
    }
    if (observer) observer(before, batches, outcome);

    RoundRecord rr;
    rr.round = t + 1;
    rr.participants = plan.rounds[t];
    rr.mean_loss = outcome.mean_loss;
    rr.grad_norms = outcome.grad_norms;
    window.merge(outcome.grad_norms);
    res.rounds.push_back(std::move(rr));

    if ((t + 1) % cfg.eval_every == 0 || t + 1 == cfg.rounds) {
      const double wall =
          cfg.strategy.record_wall_time
              ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count()
              : 0.0;
      std::vector<EvalSplit> splits{EvalSplit::test};
      if (cfg.eval_train) splits.push_back(EvalSplit::train);
      for (auto sp : splits) {
        MetricsRecord m = evaluate(res.state, data, sp);
        m.seed = cfg.seeds.init;
        m.round = t + 1;
        m.strategy = to_string(cfg.strategy.kind);
        m.grad_norm_mean = window.mean();
        m.grad_norm_std = window.stddev().value_or(std::numeric_limits<double>::quiet_NaN());
        m.wall_ms = wall;
        res.metrics.push_back(std::move(m));
      }
      window = GradNormStats{};
    }
  }
  return res;
}

}  // namespace splitsim
