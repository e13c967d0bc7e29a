// splitsim: run, bench, verify, ablate and toy entry points.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or configuration
// error, 3 training diverged, 4 any other runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "splitsim/splitsim.hpp"

namespace fs = std::filesystem;
using namespace splitsim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDiverged = 3;
constexpr int kExitRuntime = 4;

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open " + p.string() + " for writing");
  return f;
}

void write_checkpoints(const fs::path& dir, const SplitState& st) {
  fs::create_directories(dir);
  const std::size_t cut = st.spec.cut;
  for (const auto& c : st.clients) {
    char name[32];
    std::snprintf(name, sizeof name, "client_%03zu.ckpt", c.id());
    write_checkpoint((dir / name).string(), c.params().layers, {1, "client", cut, c.params().layers.size()});
  }
  write_checkpoint((dir / "server.ckpt").string(), st.server.params.layers,
                   {1, "server", cut, st.server.params.layers.size()});
}

int cmd_run(const std::string& config, std::optional<std::uint64_t> seed, const fs::path& out) {
  auto cfg = load_experiment(config);
  if (seed) cfg.run.seeds = SeedBundle::all(*seed);
  const auto& sc = cfg.run.strategy;
  std::cout << "optimizer " << to_string(sc.optimizer) << " lr_client " << fmt_double(sc.lr_client) << " lr_server "
            << fmt_double(sc.lr_server) << '\n';
  auto r = run_experiment(cfg);
  fs::create_directories(out);
  {
    auto f = open_out(out / "metrics.csv");
    write_metrics_csv(f, r.result.metrics);
  }
  {
    auto f = open_out(out / "events.jsonl");
    write_events_jsonl(f, r.result.state.events);
  }
  if (r.data.full.num_classes > 0) {
    auto f = open_out(out / "partition.csv");
    write_partition_manifest(f, r.data.full, r.data.parts);
  }
  {
    auto f = open_out(out / "costs.json");
    f << to_json(r.result.state.costs).dump(2) << '\n';
  }
  for (const auto& w : r.data.parts.warnings) std::cerr << "warning: " << w << '\n';
  write_checkpoints(out / "checkpoints", r.result.state);
  if (r.result.diverged) {
    std::cerr << "error: training diverged at round " << r.result.diverged->round << ": " << r.result.diverged->message
              << "\ncheckpoints hold the last good state (round " << r.result.state.round << ")\n";
    return kExitDiverged;
  }
  if (!r.result.metrics.empty()) {
    const auto& m = r.result.metrics.back();
    std::cout << m.strategy << " round " << m.round << " " << m.split << " accuracy " << fmt_double(m.accuracy)
              << " loss " << fmt_double(m.loss) << '\n';
  }
  return kExitOk;
}

int cmd_bench(const std::string& manifest, const std::string& out_override) {
  auto kv = KeyValueFile::load(manifest);
  auto base = read_experiment(kv);
  auto spec = read_bench(kv, base);
  kv.expect_consumed();
  if (!out_override.empty()) spec.out_dir = out_override;
  const auto cells = run_bench(base, spec);
  fs::create_directories(spec.out_dir);
  {
    auto f = open_out(fs::path(spec.out_dir) / "results.csv");
    write_results_csv(f, cells);
  }
  {
    auto f = open_out(fs::path(spec.out_dir) / "convergence.csv");
    write_convergence_csv(f, cells, spec.thresholds, base.run.rounds);
  }
  std::printf("optimizer %s lr_client %g lr_server %g\n", to_string(base.run.strategy.optimizer),
              base.run.strategy.lr_client, base.run.strategy.lr_server);
  std::printf("%-11s %8s %24s %24s %6s\n", "strategy", "alpha", "test loss", "test accuracy", "failed");
  for (const auto& c : cells) {
    const auto loss = mean_std(c.final_values(&MetricsRecord::loss));
    const auto acc = mean_std(c.final_values(&MetricsRecord::accuracy));
    std::printf("%-11s %8g %11.4f +- %-8.4f %11.4f +- %-8.4f %6zu\n", to_string(c.strategy), c.alpha, loss.mean,
                loss.std, acc.mean, acc.std, c.failures());
    for (const auto& s : c.seeds) {
      if (!s.ok) std::cerr << "warning: " << to_string(c.strategy) << " seed " << s.seed << ": " << s.error << '\n';
    }
  }
  return kExitOk;
}

BackwardResult corrupted_backward(const ParamBlock& p, std::span<const LayerSpec> specs, const Tape& tape,
                                  const Tensor& d_output, bool param_grads) {
  auto r = backward(p, specs, tape, d_output, param_grads);
  for (auto& g : r.grads) {
    for (double& v : g.weight.values()) v *= 1.001;
  }
  return r;
}

int cmd_verify(const std::string& report, const std::string& mutation) {
  verify::VerifyOptions opts;
  if (mutation == "backward") opts.backward = corrupted_backward;
  else if (!mutation.empty()) throw ConfigError("unknown mutation '" + mutation + "' (expected backward)");
  const auto results = verify::run_all(opts);
  nlohmann::json j = nlohmann::json::array();
  const verify::SuiteResult* first_failure = nullptr;
  for (const auto& r : results) {
    std::printf("%-4s %-26s %7.2fs  %s\n", r.passed ? "ok" : "FAIL", r.name.c_str(), r.seconds, r.detail.c_str());
    j.push_back({{"suite", r.name}, {"passed", r.passed}, {"seconds", r.seconds}, {"detail", r.detail}});
    if (!r.passed && !first_failure) first_failure = &r;
  }
  if (!report.empty()) {
    auto f = open_out(report);
    f << nlohmann::json{{"passed", first_failure == nullptr}, {"suites", j}}.dump(2) << '\n';
  }
  if (first_failure) {
    std::cerr << "verify failed: " << first_failure->name << ": " << first_failure->detail << '\n';
    return kExitVerify;
  }
  return kExitOk;
}

int cmd_ablate(const std::string& config, const std::string& axis_name, const std::vector<std::size_t>& values,
               const std::vector<std::uint64_t>& seeds, const std::string& out) {
  AblationAxis axis;
  if (axis_name == "cut") axis = AblationAxis::cut;
  else if (axis_name == "epochs") axis = AblationAxis::epochs;
  else throw ConfigError("--axis must be cut or epochs");
  const auto cfg = load_experiment(config);
  std::vector<std::string> warnings;
  const auto rows = run_ablation(cfg, axis, values, seeds, warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
  if (out.empty()) {
    write_ablation_csv(std::cout, rows);
  } else {
    auto f = open_out(out);
    write_ablation_csv(f, rows);
  }
  return kExitOk;
}

int cmd_toy(std::size_t residual_points, const std::string& out) {
  const auto rep = oracle::toy_sweep(residual_points);
  if (out.empty()) {
    write_toy_csv(std::cout, rep.points);
  } else {
    auto f = open_out(out);
    write_toy_csv(f, rep.points);
  }
  std::cerr << rep.valid() << " in-regime points, " << rep.violations.size() << " violations, " << rep.excluded
            << " excluded of " << rep.grid_points << '\n';
  return rep.all_hold() ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"split learning protocol simulator"};
  app.require_subcommand(1);

  std::string run_out = "run-out";
  std::string config, out, manifest, report, mutation, axis;
  std::optional<std::uint64_t> seed;
  std::vector<std::size_t> values;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::size_t residual_points = 200;

  auto* run = app.add_subcommand("run", "train one configuration");
  run->add_option("--config", config, "experiment config file")->required();
  run->add_option("--seed", seed, "use this value for every seed in the bundle");
  run->add_option("--out", run_out, "output directory (default run-out)");

  auto* bench = app.add_subcommand("bench", "run a strategy x alpha x seed grid");
  bench->add_option("--manifest", manifest, "bench manifest file")->required();
  bench->add_option("--out", out, "output directory (overrides bench.out)");

  auto* ver = app.add_subcommand("verify", "run the oracle suites");
  ver->add_option("--report", report, "write a JSON report here");
  ver->add_option("--mutation", mutation, "inject a known defect (backward)");

  auto* abl = app.add_subcommand("ablate", "sweep the cut block or the server epochs");
  abl->add_option("--config", config, "experiment config file")->required();
  abl->add_option("--axis", axis, "cut or epochs")->required();
  abl->add_option("--values", values, "comma-separated values")->required()->delimiter(',');
  abl->add_option("--seeds", seeds, "comma-separated seeds")->delimiter(',');
  abl->add_option("--out", out, "CSV file (default stdout)");

  auto* toy = app.add_subcommand("toy", "one-neuron cycle vs end-to-end sweep");
  toy->add_option("--residual-points", residual_points, "residual grid size")->check(CLI::PositiveNumber);
  toy->add_option("--out", out, "CSV file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*run) return cmd_run(config, seed, run_out);
    if (*bench) return cmd_bench(manifest, out);
    if (*ver) return cmd_verify(report, mutation);
    if (*abl) return cmd_ablate(config, axis, values, seeds, out);
    if (*toy) return cmd_toy(residual_points, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const PartitionError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
