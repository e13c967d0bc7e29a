#pragma once

#include <cstdio>
#include <cstdlib>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitsim/oracle.hpp"
#include "splitsim/orchestrator.hpp"

namespace splitsim {

/// 17 significant digits: round-trips every finite double.
inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw ParseError("not a number: '" + s + "'", 0);
  return v;
}

inline constexpr const char* kMetricsHeader =
    "seed,round,strategy,split,loss,accuracy,macro_f1,mcc,grad_norm_mean,grad_norm_std,wall_ms";

inline void write_metrics_csv(std::ostream& out, const std::vector<MetricsRecord>& records) {
  out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    out << r.seed << ',' << r.round << ',' << r.strategy << ',' << r.split << ',' << fmt_double(r.loss) << ','
        << fmt_double(r.accuracy) << ',' << fmt_double(r.macro_f1) << ',' << fmt_double(r.mcc) << ','
        << fmt_double(r.grad_norm_mean) << ',' << fmt_double(r.grad_norm_std) << ',' << fmt_double(r.wall_ms) << '\n';
  }
}

inline std::vector<MetricsRecord> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw ParseError("metrics CSV header mismatch", 0);
  std::vector<MetricsRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 11) throw ParseError("metrics CSV row with " + std::to_string(f.size()) + " fields", 0);
    MetricsRecord r;
    r.seed = std::stoull(f[0]);
    r.round = std::stoul(f[1]);
    r.strategy = f[2];
    r.split = f[3];
    r.loss = parse_double(f[4]);
    r.accuracy = parse_double(f[5]);
    r.macro_f1 = parse_double(f[6]);
    r.mcc = parse_double(f[7]);
    r.grad_norm_mean = parse_double(f[8]);
    r.grad_norm_std = parse_double(f[9]);
    r.wall_ms = parse_double(f[10]);
    out.push_back(std::move(r));
  }
  return out;
}

inline nlohmann::json to_json(const Event& e) {
  nlohmann::json j;
  j["round"] = e.round + 1;
  j["seq"] = e.seq;
  j["phase"] = e.phase;
  j["client_id"] = e.client ? nlohmann::json(*e.client) : nlohmann::json(nullptr);
  j["loss"] = e.loss ? nlohmann::json(*e.loss) : nlohmann::json(nullptr);
  j["grad_norm"] = e.grad_norm ? nlohmann::json(*e.grad_norm) : nlohmann::json(nullptr);
  j["wall_us"] = e.wall_us;
  if (!e.note.empty()) j["note"] = e.note;
  return j;
}

inline void write_events_jsonl(std::ostream& out, const std::vector<Event>& events) {
  for (const auto& e : events) out << to_json(e).dump() << '\n';
}

inline void write_toy_csv(std::ostream& out, const std::vector<oracle::ToyPoint>& points) {
  out << "w_c,w_s,x,y,eta,step_e2e,step_cycle,holds\n";
  for (const auto& p : points) {
    const auto& t = p.instance;
    out << fmt_double(t.w_c) << ',' << fmt_double(t.w_s) << ',' << fmt_double(t.x) << ',' << fmt_double(t.y) << ','
        << fmt_double(t.eta) << ',' << fmt_double(p.steps.end_to_end_client_step) << ','
        << fmt_double(p.steps.cycle_client_step) << ',' << (p.holds ? "true" : "false") << '\n';
  }
}

inline nlohmann::json to_json(const CostReport& c) {
  nlohmann::json j;
  j["server_forward_calls"] = c.server_forward_calls;
  j["server_backward_calls"] = c.server_backward_calls;
  j["server_forward_samples"] = c.server_forward_samples;
  j["server_backward_samples"] = c.server_backward_samples;
  j["smashed_batches"] = c.smashed_batches;
  j["smashed_samples"] = c.smashed_samples;
  j["forwards_per_smashed_sample"] = c.forwards_per_smashed_sample();
  j["backwards_per_smashed_sample"] = c.backwards_per_smashed_sample();
  j["bytes_up"] = c.bytes_up;
  j["bytes_down"] = c.bytes_down;
  j["peak_server_replicas"] = c.peak_server_replicas;
  j["server_optimizer_steps"] = c.server_optimizer_steps;
  j["server_aggregations"] = c.server_aggregations;
  j["client_aggregations"] = c.client_aggregations;
  j["phase_ms"] = c.phase_ms;
  return j;
}

}  // namespace splitsim
