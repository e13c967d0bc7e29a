#pragma once

// Turning a configuration into data, a model and finished runs, plus the
// seed-grid drivers behind the bench and ablate commands.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "splitsim/config.hpp"
#include "splitsim/idx.hpp"
#include "splitsim/report.hpp"

namespace splitsim {

/// Dense blocks [dense, activation] per hidden width, then a [dense(, softmax-output)] head.
inline std::vector<LayerSpec> mlp_layers(std::size_t input, const std::vector<std::size_t>& hidden,
                                         std::size_t output, LayerKind activation, bool classification) {
  std::vector<LayerSpec> layers;
  std::size_t prev = input;
  for (std::size_t h : hidden) {
    layers.push_back(LayerSpec::dense(prev, h));
    layers.push_back(activation == LayerKind::tanh ? LayerSpec::tanh() : LayerSpec::relu());
    prev = h;
  }
  layers.push_back(LayerSpec::dense(prev, output));
  if (classification) layers.push_back(LayerSpec::softmax_output());
  return layers;
}

inline std::size_t mlp_blocks(const ModelConfig& m) { return m.hidden.size() + 1; }

inline SplitSpec build_split_spec(const ModelConfig& m, std::size_t input, std::size_t output, bool classification) {
  const std::size_t blocks = mlp_blocks(m);
  if (m.cut_block < 1 || m.cut_block >= blocks) {
    throw ConfigError("cut block " + std::to_string(m.cut_block) + " outside [1, " + std::to_string(blocks - 1) + "]");
  }
  return SplitSpec(mlp_layers(input, m.hidden, output, m.activation, classification), 2 * m.cut_block);
}

struct PreparedData {
  Dataset full;
  PartitionResult parts;
};

inline Dataset load_dataset(const DataConfig& d, std::uint64_t seed) {
  switch (d.kind) {
    case DataKind::gaussian_mixture: return gaussian_mixture(d.mixture, d.samples, seed);
    case DataKind::linear_regression: return linear_regression(d.mixture.dim, d.noise, d.samples, seed);
    case DataKind::idx:
      if (d.images_path.empty() || d.labels_path.empty()) throw ConfigError("idx data needs data.images and data.labels");
      return load_idx_dataset(d.images_path, d.labels_path);
  }
  throw ConfigError("unknown dataset kind");
}

inline PreparedData prepare_data(const DataConfig& d, std::size_t clients, std::size_t batch, std::uint64_t seed) {
  PreparedData p;
  p.full = load_dataset(d, seed);
  PartitionSpec ps;
  ps.scheme = d.partition;
  ps.alpha = d.alpha;
  ps.shards_per_client = d.shards_per_client;
  ps.clients = clients;
  ps.seed = seed;
  ps.test_fraction = d.test_fraction;
  p.parts = partition(p.full, ps, batch);
  return p;
}

struct ExperimentRun {
  PreparedData data;
  SplitSpec spec;
  RunResult result;
};

inline ExperimentRun run_experiment(const ExperimentConfig& cfg, const RoundObserver& observer = {}) {
  ExperimentRun r;
  r.data = prepare_data(cfg.data, cfg.run.clients, cfg.run.batch_size, cfg.run.seeds.data);
  const bool classify = r.data.full.num_classes > 0;
  const std::size_t out = classify ? r.data.full.num_classes : r.data.full.y.values.cols();
  r.spec = build_split_spec(cfg.model, r.data.full.dim(), out, classify);
  r.result = run(cfg.run, r.spec, r.data.parts.clients, observer);
  return r;
}

/// SPLITSIM_THREADS caps parallel cells; defaults to the hardware concurrency.
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SPLITSIM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = static_cast<std::size_t>(v);
  }
  return n;
}

template <class Fn>
void parallel_for(std::size_t jobs, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, jobs));
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t j; (j = next.fetch_add(1)) < jobs;) fn(j);
    });
  }
  for (auto& th : pool) th.join();
}

/// Outcome of one (configuration, seed) run inside a grid.
struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsRecord final_test;
  std::vector<MetricsRecord> test_history;
  std::vector<RoundRecord> rounds;
  CostReport costs;
};

inline SeedOutcome run_seed(ExperimentConfig cfg, std::uint64_t seed) {
  cfg.run.seeds = SeedBundle::all(seed);
  SeedOutcome o;
  o.seed = seed;
  try {
    auto r = run_experiment(cfg);
    if (r.result.diverged) {
      o.error = "diverged at round " + std::to_string(r.result.diverged->round) + ": " + r.result.diverged->message;
    }
    for (const auto& m : r.result.metrics) {
      if (m.split == "test") o.test_history.push_back(m);
    }
    o.rounds = std::move(r.result.rounds);
    o.costs = r.result.state.costs;
    if (!o.error.empty() || o.test_history.empty()) return o;
    o.final_test = o.test_history.back();
    o.ok = true;
  } catch (const Error& e) {
    o.error = e.what();
  }
  return o;
}

// ---------------------------------------------------------------------------
// bench

struct BenchSpec {
  std::vector<StrategyKind> strategies{std::begin(kAllStrategies), std::end(kAllStrategies)};
  std::vector<double> alphas;  // empty: the base config's alpha
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<double> thresholds{0.8};
  std::string out_dir = "bench-out";
};

inline BenchSpec read_bench(KeyValueFile& kv, const ExperimentConfig& base) {
  BenchSpec b;
  auto names = kv.take_string_list("bench.strategies", {});
  if (!names.empty()) {
    b.strategies.clear();
    for (const auto& n : names) b.strategies.push_back(parse_strategy(n));
  }
  b.alphas = kv.take_list<double>("bench.alphas", {base.data.alpha});
  b.seeds = kv.take_list<std::uint64_t>("bench.seeds", b.seeds);
  b.thresholds = kv.take_list<double>("bench.thresholds", b.thresholds);
  b.out_dir = kv.take_or("bench.out", b.out_dir);
  if (b.strategies.empty() || b.alphas.empty() || b.seeds.empty()) throw ConfigError("bench grid is empty");
  return b;
}

struct BenchCell {
  StrategyKind strategy = StrategyKind::cycle_sfl;
  double alpha = 0.0;
  std::vector<SeedOutcome> seeds;

  std::vector<double> final_values(double MetricsRecord::*field) const {
    std::vector<double> v;
    for (const auto& s : seeds) {
      if (s.ok) v.push_back(s.final_test.*field);
    }
    return v;
  }
  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(seeds.begin(), seeds.end(), [](const auto& s) { return !s.ok; }));
  }
};

inline std::vector<BenchCell> run_bench(const ExperimentConfig& base, const BenchSpec& spec,
                                        std::size_t threads = worker_threads()) {
  std::vector<BenchCell> cells;
  const std::vector<double> alphas = spec.alphas.empty() ? std::vector<double>{base.data.alpha} : spec.alphas;
  for (auto k : spec.strategies) {
    for (double a : alphas) {
      BenchCell c;
      c.strategy = k;
      c.alpha = a;
      c.seeds.resize(spec.seeds.size());
      cells.push_back(std::move(c));
    }
  }
  const std::size_t per_cell = spec.seeds.size();
  parallel_for(cells.size() * per_cell, threads, [&](std::size_t job) {
    auto& cell = cells[job / per_cell];
    ExperimentConfig cfg = base;
    cfg.run.strategy.kind = cell.strategy;
    cfg.data.alpha = cell.alpha;
    cell.seeds[job % per_cell] = run_seed(cfg, spec.seeds[job % per_cell]);
  });
  return cells;
}

inline void write_results_csv(std::ostream& out, const std::vector<BenchCell>& cells) {
  out << "strategy,alpha,seeds,failed,test_loss_mean,test_loss_std,accuracy_mean,accuracy_std,"
         "macro_f1_mean,macro_f1_std,mcc_mean,mcc_std\n";
  for (const auto& c : cells) {
    out << to_string(c.strategy) << ',' << fmt_double(c.alpha) << ',' << c.seeds.size() << ',' << c.failures();
    for (auto field : {&MetricsRecord::loss, &MetricsRecord::accuracy, &MetricsRecord::macro_f1, &MetricsRecord::mcc}) {
      const auto v = c.final_values(field);
      const auto ms = mean_std(v);
      out << ',' << fmt_double(ms.mean) << ',' << fmt_double(ms.std);
    }
    out << '\n';
  }
}

/// Rounds until test accuracy first reaches each threshold, averaged over
/// seeds; "> T" when some seed never gets there.
inline void write_convergence_csv(std::ostream& out, const std::vector<BenchCell>& cells,
                                  const std::vector<double>& thresholds, std::size_t total_rounds) {
  out << "strategy,alpha,threshold,rounds_mean,rounds_std,reached\n";
  for (const auto& c : cells) {
    for (double th : thresholds) {
      std::vector<double> reached;
      std::size_t ran = 0;
      for (const auto& s : c.seeds) {
        if (s.test_history.empty()) continue;
        ++ran;
        std::vector<double> acc;
        for (const auto& m : s.test_history) acc.push_back(m.accuracy);
        if (auto idx = convergence_round(acc, th)) reached.push_back(static_cast<double>(s.test_history[*idx - 1].round));
      }
      out << to_string(c.strategy) << ',' << fmt_double(c.alpha) << ',' << fmt_double(th) << ',';
      if (ran > 0 && reached.size() == ran) {
        const auto ms = mean_std(reached);
        out << fmt_double(ms.mean) << ',' << fmt_double(ms.std);
      } else {
        out << "> " << total_rounds << ',';
      }
      out << ',' << reached.size() << '/' << c.seeds.size() << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// ablate

enum class AblationAxis { cut, epochs };

struct AblationRow {
  AblationAxis axis = AblationAxis::cut;
  std::size_t value = 0;
  MeanStd accuracy;
  std::size_t failed = 0;
};

/// Sorted unique values; duplicates are reported in `warnings`.
inline std::vector<std::size_t> dedupe_values(const std::vector<std::size_t>& values, std::vector<std::string>& warnings) {
  std::set<std::size_t> seen;
  std::vector<std::size_t> out;
  for (auto v : values) {
    if (!seen.insert(v).second) {
      warnings.push_back("duplicate ablation value " + std::to_string(v) + " ignored");
      continue;
    }
    out.push_back(v);
  }
  return out;
}

inline std::vector<AblationRow> run_ablation(const ExperimentConfig& base, AblationAxis axis,
                                             const std::vector<std::size_t>& raw_values,
                                             const std::vector<std::uint64_t>& seeds,
                                             std::vector<std::string>& warnings,
                                             std::size_t threads = worker_threads()) {
  const auto values = dedupe_values(raw_values, warnings);
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  if (axis == AblationAxis::epochs && !is_cycle(base.run.strategy.kind)) {
    throw ConfigError("the epochs axis needs a cycle strategy, got " + std::string(to_string(base.run.strategy.kind)));
  }
  for (auto v : values) {
    if (axis == AblationAxis::cut && (v < 1 || v >= mlp_blocks(base.model))) {
      throw ConfigError("cut " + std::to_string(v) + " outside [1, " + std::to_string(mlp_blocks(base.model) - 1) + "]");
    }
    if (axis == AblationAxis::epochs && v < 1) throw ConfigError("server epochs must be at least 1");
  }
  std::vector<std::vector<SeedOutcome>> grid(values.size(), std::vector<SeedOutcome>(seeds.size()));
  parallel_for(values.size() * seeds.size(), threads, [&](std::size_t job) {
    const std::size_t vi = job / seeds.size(), si = job % seeds.size();
    ExperimentConfig cfg = base;
    if (axis == AblationAxis::cut) cfg.model.cut_block = values[vi];
    else cfg.run.strategy.cycle.server_epochs = values[vi];
    grid[vi][si] = run_seed(cfg, seeds[si]);
  });
  std::vector<AblationRow> rows;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    AblationRow row;
    row.axis = axis;
    row.value = values[vi];
    std::vector<double> acc;
    for (const auto& s : grid[vi]) {
      if (s.ok) acc.push_back(s.final_test.accuracy);
      else ++row.failed;
    }
    row.accuracy = mean_std(acc);
    rows.push_back(row);
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "axis,value,test_accuracy_mean,test_accuracy_std,seeds,failed\n";
  for (const auto& r : rows) {
    out << (r.axis == AblationAxis::cut ? "cut" : "epochs") << ',' << r.value << ',' << fmt_double(r.accuracy.mean)
        << ',' << fmt_double(r.accuracy.std) << ',' << r.accuracy.n << ',' << r.failed << '\n';
  }
}

}  // namespace splitsim
