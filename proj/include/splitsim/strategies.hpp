#pragma once

// Round execution for the eight split-learning protocols.
//
// Baselines update the two halves from one backward flow: the server step and
// the cut gradient a client receives are both taken under the server
// parameters before that step. The cycle variants collect every participant's
// smashed batch into one feature store, train the single server model on
// resampled batches from it, freeze the server, and then serve cut gradients
// from the already-updated parameters.
//
// All per-round orderings and reductions run in ascending client id.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "splitsim/metrics.hpp"
#include "splitsim/split.hpp"

namespace splitsim {

enum class StrategyKind { seq_sl, psl, sflv1, sflv2, sglr, cycle_psl, cycle_sfl, cycle_sglr };

inline constexpr StrategyKind kAllStrategies[] = {StrategyKind::seq_sl,   StrategyKind::psl,
                                                  StrategyKind::sflv1,    StrategyKind::sflv2,
                                                  StrategyKind::sglr,     StrategyKind::cycle_psl,
                                                  StrategyKind::cycle_sfl, StrategyKind::cycle_sglr};

inline const char* to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::seq_sl: return "seq-sl";
    case StrategyKind::psl: return "psl";
    case StrategyKind::sflv1: return "sflv1";
    case StrategyKind::sflv2: return "sflv2";
    case StrategyKind::sglr: return "sglr";
    case StrategyKind::cycle_psl: return "cycle-psl";
    case StrategyKind::cycle_sfl: return "cycle-sfl";
    case StrategyKind::cycle_sglr: return "cycle-sglr";
  }
  return "?";
}

inline StrategyKind parse_strategy(std::string_view name) {
  for (auto k : kAllStrategies) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

inline bool is_cycle(StrategyKind k) {
  return k == StrategyKind::cycle_psl || k == StrategyKind::cycle_sfl || k == StrategyKind::cycle_sglr;
}

/// Strategies that average participating client models and broadcast the result.
inline bool aggregates_clients(StrategyKind k) {
  return k == StrategyKind::sflv1 || k == StrategyKind::sflv2 || k == StrategyKind::cycle_sfl;
}

inline bool averages_cut_gradients(StrategyKind k) {
  return k == StrategyKind::sglr || k == StrategyKind::cycle_sglr;
}

enum class ServerPassMode { epoch_passes, sampled_steps };
enum class ResampleOrder { shuffled, in_order };

inline const char* to_string(ServerPassMode m) {
  return m == ServerPassMode::epoch_passes ? "epoch-passes" : "sampled-steps";
}

struct CycleConfig {
  std::size_t server_epochs = 1;
  std::size_t server_batch = 0;  // 0: the participants' batch size
  ServerPassMode mode = ServerPassMode::epoch_passes;
  ResampleOrder order = ResampleOrder::shuffled;  // in_order reads the store as collected
};

struct StrategyConfig {
  StrategyKind kind = StrategyKind::cycle_sfl;
  OptimizerKind optimizer = OptimizerKind::adam;
  double lr_client = 1e-3;
  double lr_server = 1e-3;
  CycleConfig cycle;
  bool trace_store = false;  // keep the feature store and pass orders in the outcome
  bool audit = false;        // keep server snapshots and served gradients in the outcome
  bool record_wall_time = false;

  OptimizerConfig client_opt() const { return {optimizer, lr_client}; }
  OptimizerConfig server_opt() const { return {optimizer, lr_server}; }
};

/// One participant's local mini-batch for a round.
struct ParticipantBatch {
  std::size_t client_id = 0;
  Tensor x;
  Targets y;
};

struct CostReport {
  std::uint64_t server_forward_calls = 0;
  std::uint64_t server_backward_calls = 0;
  std::uint64_t server_forward_samples = 0;
  std::uint64_t server_backward_samples = 0;
  std::uint64_t smashed_batches = 0;
  std::uint64_t smashed_samples = 0;
  std::uint64_t bytes_up = 0;    // features and labels, client to server
  std::uint64_t bytes_down = 0;  // cut gradients, server to client
  std::size_t peak_server_replicas = 0;
  std::uint64_t server_optimizer_steps = 0;
  std::uint64_t server_aggregations = 0;
  std::uint64_t client_aggregations = 0;
  std::map<std::string, double> phase_ms;

  double forwards_per_smashed_sample() const {
    return smashed_samples ? static_cast<double>(server_forward_samples) / static_cast<double>(smashed_samples) : 0.0;
  }
  double backwards_per_smashed_sample() const {
    return smashed_samples ? static_cast<double>(server_backward_samples) / static_cast<double>(smashed_samples)
                           : 0.0;
  }
};

struct Event {
  std::size_t round = 0;
  std::uint64_t seq = 0;  // logical clock, strictly increasing within a run
  std::string phase;
  std::optional<std::size_t> client;
  std::optional<double> loss;
  std::optional<double> grad_norm;
  double wall_us = 0.0;
  std::string note;
};

/// The server-side feature dataset of one cycle round and how it was visited.
struct StoreTrace {
  Tensor features;
  Targets targets;
  std::vector<std::size_t> origin;                  // client id per row
  std::vector<std::vector<std::size_t>> passes;     // rows visited per epoch (or sampled step)
  std::size_t server_batch = 0;
};

struct GradientAudit {
  std::size_t client_id = 0;
  bool after_server_update = false;  // true: served under theta_S^{t+1}
  ParamBlock server_snapshot;
  Tensor features;
  Targets targets;
  Tensor served;  // cut gradient as computed by the server for this client
};

struct ClientRoundInfo {
  std::size_t client_id = 0;
  double loss = 0.0;
  double grad_norm = 0.0;  // of the gradient the client applied
};

struct RoundOutcome {
  std::vector<ClientRoundInfo> clients;
  double mean_loss = 0.0;
  std::vector<double> server_train_losses;  // cycle phase 2
  GradNormStats grad_norms;
  std::optional<StoreTrace> store;
  std::vector<GradientAudit> audits;
  std::vector<CutGradientBatch> served;   // audit only
  std::vector<CutGradientBatch> applied;  // audit only
};

/// Everything a protocol mutates across rounds.
struct SplitState {
  SplitSpec spec;
  std::vector<ClientModel> clients;
  ServerModel server;
  std::optional<ParamBlock> relay;  // latest trained client model (seq-sl)
  CostReport costs;
  std::vector<Event> events;
  Rng server_rng{0};  // feature-store resampling
  std::size_t round = 0;
  std::uint64_t clock = 0;
};

/// All clients start from the same client half; seeds are substream roots.
inline SplitState make_state(const SplitSpec& spec, std::size_t num_clients, std::uint64_t init_seed,
                             std::uint64_t shuffle_seed) {
  if (num_clients == 0) throw ConfigError("need at least one client");
  Rng init = Rng::substream(init_seed, "init");
  auto [client_half, server_half] = init_split(spec, init);
  SplitState s;
  s.spec = spec;
  s.clients.reserve(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) s.clients.emplace_back(i, client_half);
  s.server.params = std::move(server_half);
  s.server_rng = Rng::substream(shuffle_seed, "server-resample");
  return s;
}

/// sum_k w_k * theta_k with weights proportional to `sizes`, accumulated in order.
inline ParamBlock weighted_average(std::span<const ParamBlock* const> blocks, std::span<const std::size_t> sizes) {
  if (blocks.empty() || blocks.size() != sizes.size()) throw ConsistencyError("averaging: bad input");
  double total = 0.0;
  for (auto n : sizes) total += static_cast<double>(n);
  ParamBlock out = *blocks.front();
  auto combine = [&](auto member) {
    auto& dst = out.*member;
    for (std::size_t l = 0; l < dst.size(); ++l) {
      for (Tensor LayerParams::*part : {&LayerParams::weight, &LayerParams::bias}) {
        Tensor& acc = dst[l].*part;
        const double w0 = static_cast<double>(sizes[0]) / total;
        const Tensor& first = (blocks[0]->*member)[l].*part;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = w0 * first[i];
        for (std::size_t k = 1; k < blocks.size(); ++k) {
          const double w = static_cast<double>(sizes[k]) / total;
          const Tensor& src = (blocks[k]->*member)[l].*part;
          if (src.shape() != acc.shape()) throw ConsistencyError("averaging: parameter shapes differ");
          for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * src[i];
        }
      }
    }
  };
  combine(&ParamBlock::layers);
  combine(&ParamBlock::first_moment);
  combine(&ParamBlock::second_moment);
  for (const auto* b : blocks) out.step = std::max(out.step, b->step);
  return out;
}

/// Elementwise mean of equally shaped cut gradients, summed in order.
inline Tensor mean_cut_gradient(std::span<const CutGradientBatch> grads) {
  if (grads.empty()) throw ConsistencyError("cannot average zero gradients");
  Tensor acc = grads.front().d_features;
  for (std::size_t k = 1; k < grads.size(); ++k) {
    if (grads[k].d_features.shape() != acc.shape()) {
      throw ConfigError("sglr averages cut gradients elementwise and needs equal batch sizes across participants");
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grads[k].d_features[i];
  }
  const double inv = 1.0 / static_cast<double>(grads.size());
  if (grads.size() > 1) {
    for (double& v : acc.values()) v *= inv;
  }
  return acc;
}

namespace detail {

using Clock = std::chrono::steady_clock;

class RoundRunner {
 public:
  RoundRunner(SplitState& s, const StrategyConfig& cfg, std::span<const ParticipantBatch> batches)
      : s_(s), cfg_(cfg), batches_(batches) {}

  RoundOutcome run() {
    validate();
    switch (cfg_.kind) {
      case StrategyKind::seq_sl: seq_sl(); break;
      case StrategyKind::psl:
      case StrategyKind::sflv1:
      case StrategyKind::sglr: replicated(); break;
      case StrategyKind::sflv2: sflv2(); break;
      case StrategyKind::cycle_psl:
      case StrategyKind::cycle_sfl:
      case StrategyKind::cycle_sglr: cycle(); break;
    }
    if (aggregates_clients(cfg_.kind)) aggregate_clients();
    double sum = 0.0;
    for (const auto& c : out_.clients) sum += c.loss;
    out_.mean_loss = out_.clients.empty() ? 0.0 : sum / static_cast<double>(out_.clients.size());
    ++s_.round;
    return std::move(out_);
  }

 private:
  void validate() const {
    if (batches_.empty()) throw ContractError("a round needs at least one participant");
    for (std::size_t k = 0; k < batches_.size(); ++k) {
      if (batches_[k].client_id >= s_.clients.size()) throw ContractError("participant id out of range");
      if (k > 0 && batches_[k].client_id <= batches_[k - 1].client_id) {
        throw ContractError("participants must be listed in ascending, unique id order");
      }
    }
    if (averages_cut_gradients(cfg_.kind)) {
      for (const auto& b : batches_) {
        if (b.x.rows() != batches_.front().x.rows()) {
          throw ConfigError("sglr averages cut gradients elementwise and needs equal batch sizes across participants");
        }
      }
    }
  }

  void event(std::string phase, std::optional<std::size_t> client = {}, std::optional<double> loss = {},
             std::optional<double> norm = {}, std::string note = {}) {
    Event e;
    e.round = s_.round;
    e.seq = s_.clock++;
    e.phase = std::move(phase);
    e.client = client;
    e.loss = loss;
    e.grad_norm = norm;
    e.note = std::move(note);
    if (cfg_.record_wall_time) {
      e.wall_us = std::chrono::duration<double, std::micro>(Clock::now().time_since_epoch()).count();
    }
    s_.events.push_back(std::move(e));
  }

  struct PhaseTimer {
    CostReport& costs;
    std::string name;
    bool enabled;
    Clock::time_point start = Clock::now();
    ~PhaseTimer() {
      if (enabled) costs.phase_ms[name] += std::chrono::duration<double, std::milli>(Clock::now() - start).count();
    }
  };

  void count_upload(const SmashedBatch& b) {
    s_.costs.smashed_batches += 1;
    s_.costs.smashed_samples += b.size();
    s_.costs.bytes_up += b.features.size() * sizeof(double);
    s_.costs.bytes_up +=
        b.targets.kind == LossKind::cross_entropy ? b.targets.size() * sizeof(std::int32_t) : b.targets.values.size() * sizeof(double);
  }

  void count_server_pass(std::size_t rows, bool with_backward = true) {
    s_.costs.server_forward_calls += 1;
    s_.costs.server_forward_samples += rows;
    if (with_backward) {
      s_.costs.server_backward_calls += 1;
      s_.costs.server_backward_samples += rows;
    }
  }

  void note_replicas(std::size_t n) { s_.costs.peak_server_replicas = std::max(s_.costs.peak_server_replicas, n); }

  ServerStep server_update(ServerModel& server, const Tensor& f, const Targets& y) {
    auto step = server_step(server, s_.spec, f, y, cfg_.server_opt());
    count_server_pass(f.rows());
    s_.costs.server_optimizer_steps += 1;
    return step;
  }

  void record_audit(const ServerModel& server, const SmashedBatch& b, const Tensor& served, bool after) {
    if (!cfg_.audit) return;
    GradientAudit a;
    a.client_id = b.client_id;
    a.after_server_update = after;
    a.server_snapshot = server.params;
    a.features = b.features;
    a.targets = b.targets;
    a.served = served;
    out_.audits.push_back(std::move(a));
  }

  SmashedBatch collect(const ParticipantBatch& pb) {
    auto smashed = client_forward(s_.clients[pb.client_id], s_.spec, pb.x, pb.y);
    count_upload(smashed);
    return smashed;
  }

  void apply_to_client(const CutGradientBatch& g, double loss) {
    const double norm = batch_mean_grad_norm(g.d_features);
    out_.grad_norms.push(norm);
    s_.costs.bytes_down += g.d_features.size() * sizeof(double);
    client_backward_update(s_.clients[g.client_id], s_.spec, g, cfg_.client_opt());
    out_.clients.push_back({g.client_id, loss, norm});
    if (cfg_.audit) out_.applied.push_back(g);
    event("client-update", g.client_id, loss, norm);
  }

  /// End-to-end pair step: both halves updated from the same backward flow.
  void pair_step(ServerModel& server, const ParticipantBatch& pb) {
    PhaseTimer t{s_.costs, "pair-step", cfg_.record_wall_time};
    auto smashed = collect(pb);
    if (cfg_.audit) record_audit(server, smashed, {}, false);
    auto step = server_update(server, smashed.features, smashed.targets);
    if (cfg_.audit) {
      out_.audits.back().served = step.d_features;
      out_.served.push_back({smashed.client_id, smashed.handle, step.d_features});
    }
    event("pair-step", pb.client_id, step.loss);
    apply_to_client({smashed.client_id, smashed.handle, std::move(step.d_features)}, step.loss);
  }

  void seq_sl() {
    note_replicas(1);
    for (const auto& pb : batches_) {
      auto& client = s_.clients[pb.client_id];
      if (s_.relay) client.assign(*s_.relay);
      pair_step(s_.server, pb);
      s_.relay = client.params();
    }
  }

  void sflv2() {
    note_replicas(1);
    for (const auto& pb : batches_) pair_step(s_.server, pb);
  }

  /// psl, sflv1 and sglr: one server replica per participant, averaged at round end.
  void replicated() {
    std::vector<ServerModel> replicas(batches_.size(), s_.server);
    note_replicas(replicas.size());
    if (cfg_.kind == StrategyKind::sglr) {
      std::vector<CutGradientBatch> grads;
      std::vector<double> losses;
      {
        PhaseTimer t{s_.costs, "pair-step", cfg_.record_wall_time};
        for (std::size_t k = 0; k < batches_.size(); ++k) {
          auto smashed = collect(batches_[k]);
          if (cfg_.audit) record_audit(replicas[k], smashed, {}, false);
          auto step = server_update(replicas[k], smashed.features, smashed.targets);
          if (cfg_.audit) out_.audits.back().served = step.d_features;
          event("pair-step", smashed.client_id, step.loss);
          losses.push_back(step.loss);
          grads.push_back({smashed.client_id, smashed.handle, std::move(step.d_features)});
        }
      }
      apply_averaged(grads, losses);
    } else {
      for (std::size_t k = 0; k < batches_.size(); ++k) pair_step(replicas[k], batches_[k]);
    }
    PhaseTimer t{s_.costs, "aggregate", cfg_.record_wall_time};
    std::vector<const ParamBlock*> blocks;
    std::vector<std::size_t> sizes;
    for (std::size_t k = 0; k < replicas.size(); ++k) {
      blocks.push_back(&replicas[k].params);
      sizes.push_back(batches_[k].x.rows());
    }
    s_.server.params = weighted_average(blocks, sizes);
    s_.costs.server_aggregations += 1;
    event("aggregate-server");
  }

  void apply_averaged(const std::vector<CutGradientBatch>& grads, const std::vector<double>& losses) {
    PhaseTimer t{s_.costs, "client-update", cfg_.record_wall_time};
    Tensor mean = mean_cut_gradient(grads);
    if (cfg_.audit) out_.served.insert(out_.served.end(), grads.begin(), grads.end());
    for (std::size_t k = 0; k < grads.size(); ++k) {
      apply_to_client({grads[k].client_id, grads[k].handle, mean}, losses[k]);
    }
  }

  void cycle() {
    note_replicas(1);
    // Phase 1: collect smashed data and form the feature store.
    std::vector<SmashedBatch> smashed;
    {
      PhaseTimer t{s_.costs, "collect", cfg_.record_wall_time};
      for (const auto& pb : batches_) {
        smashed.push_back(collect(pb));
        event("collect", pb.client_id);
      }
    }
    std::vector<Tensor> feats;
    std::vector<Targets> targs;
    std::vector<std::size_t> origin;
    for (const auto& b : smashed) {
      feats.push_back(b.features);
      targs.push_back(b.targets);
      origin.insert(origin.end(), b.size(), b.client_id);
    }
    const Tensor store_x = concat_rows(feats);
    const Targets store_y = concat(targs);
    const std::size_t n = store_x.rows();

    // Phase 2: the server trains on resampled batches of the store.
    std::size_t server_batch = cfg_.cycle.server_batch ? cfg_.cycle.server_batch : batches_.front().x.rows();
    if (server_batch > n) {
      event("notice", {}, {}, {},
            "server batch " + std::to_string(server_batch) + " clipped to store size " + std::to_string(n));
      server_batch = n;
    }
    if (cfg_.cycle.server_epochs == 0) throw ConfigError("server epochs must be at least 1");
    StoreTrace trace;
    {
      PhaseTimer t{s_.costs, "server-train", cfg_.record_wall_time};
      std::vector<std::size_t> order(n);
      for (std::size_t e = 0; e < cfg_.cycle.server_epochs; ++e) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        if (cfg_.cycle.order == ResampleOrder::shuffled) s_.server_rng.shuffle(order);
        const std::size_t end = cfg_.cycle.mode == ServerPassMode::epoch_passes ? n : server_batch;
        for (std::size_t lo = 0; lo < end; lo += server_batch) {
          const std::size_t hi = std::min(end, lo + server_batch);
          std::span<const std::size_t> idx(order.data() + lo, hi - lo);
          auto step = server_update(s_.server, store_x.gather_rows(idx), store_y.gather(idx));
          out_.server_train_losses.push_back(step.loss);
          event("server-train", {}, step.loss);
        }
        if (cfg_.trace_store) trace.passes.emplace_back(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(end));
      }
    }

    // Phase 3: frozen server serves cut gradients for the original batches.
    std::vector<CutGradientBatch> grads;
    std::vector<double> losses;
    {
      PhaseTimer t{s_.costs, "gradient-service", cfg_.record_wall_time};
      FreezeGuard freeze(s_.server);
      event("freeze");
      for (const auto& b : smashed) {
        double loss = 0.0;
        grads.push_back(server_grad_for_client(s_.server, s_.spec, b, &loss));
        count_server_pass(b.size());
        losses.push_back(loss);
        record_audit(s_.server, b, grads.back().d_features, true);
        event("gradient-service", b.client_id, loss);
      }
    }
    event("unfreeze");

    // Phase 4: client updates per base protocol.
    if (averages_cut_gradients(cfg_.kind)) {
      apply_averaged(grads, losses);
    } else {
      PhaseTimer t{s_.costs, "client-update", cfg_.record_wall_time};
      if (cfg_.audit) out_.served.insert(out_.served.end(), grads.begin(), grads.end());
      for (std::size_t k = 0; k < grads.size(); ++k) apply_to_client(grads[k], losses[k]);
    }

    if (cfg_.trace_store) {
      trace.features = store_x;
      trace.targets = store_y;
      trace.origin = std::move(origin);
      trace.server_batch = server_batch;
      out_.store = std::move(trace);
    }
  }

  /// FedAvg over participating client models, broadcast to every client.
  void aggregate_clients() {
    PhaseTimer t{s_.costs, "aggregate", cfg_.record_wall_time};
    std::vector<const ParamBlock*> blocks;
    std::vector<std::size_t> sizes;
    for (const auto& pb : batches_) {
      blocks.push_back(&s_.clients[pb.client_id].params());
      sizes.push_back(pb.x.rows());
    }
    ParamBlock avg = weighted_average(blocks, sizes);
    for (auto& c : s_.clients) c.assign(avg);
    s_.costs.client_aggregations += 1;
    event("aggregate-clients");
  }

  SplitState& s_;
  const StrategyConfig& cfg_;
  std::span<const ParticipantBatch> batches_;
  RoundOutcome out_;
};

}  // namespace detail

/// Runs one round of `cfg.kind` over the participants' batches (ascending ids).
inline RoundOutcome execute_round(SplitState& state, const StrategyConfig& cfg,
                                  std::span<const ParticipantBatch> batches) {
  return detail::RoundRunner(state, cfg, batches).run();
}

inline RoundOutcome round_seq_sl(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b) {
  cfg.kind = StrategyKind::seq_sl;
  return execute_round(s, cfg, b);
}
inline RoundOutcome round_psl(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b) {
  cfg.kind = StrategyKind::psl;
  return execute_round(s, cfg, b);
}
inline RoundOutcome round_sflv1(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b) {
  cfg.kind = StrategyKind::sflv1;
  return execute_round(s, cfg, b);
}
inline RoundOutcome round_sflv2(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b) {
  cfg.kind = StrategyKind::sflv2;
  return execute_round(s, cfg, b);
}
inline RoundOutcome round_sglr(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b) {
  cfg.kind = StrategyKind::sglr;
  return execute_round(s, cfg, b);
}

enum class CycleBase { psl, sfl, sglr };

inline RoundOutcome round_cycle(SplitState& s, StrategyConfig cfg, std::span<const ParticipantBatch> b,
                                CycleBase base) {
  cfg.kind = base == CycleBase::psl   ? StrategyKind::cycle_psl
             : base == CycleBase::sfl ? StrategyKind::cycle_sfl
                                      : StrategyKind::cycle_sglr;
  return execute_round(s, cfg, b);
}

inline const CostReport& cost_counters(const SplitState& s) { return s.costs; }

}  // namespace splitsim
