#pragma once

// Flat key = value configuration with [section] headers.
//
//   schema = 1
//   [run]
//   strategy = cycle-sfl   # trailing comments allowed
//
// Keys outside a section belong to the "" section. Every key must be consumed
// by the reader; leftovers are reported as unknown keys.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "splitsim/data.hpp"
#include "splitsim/orchestrator.hpp"

namespace splitsim {

inline constexpr int kConfigSchema = 1;

class KeyValueFile {
 public:
  static KeyValueFile parse(std::string_view text) {
    KeyValueFile f;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated section header");
        section = trim(t.substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("line " + std::to_string(line_no) + ": expected key = value, got '" + t + "'");
      }
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
      const std::string full = section.empty() ? key : section + "." + key;
      if (f.values_.count(full)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + full + "'");
      f.values_[full] = trim(t.substr(eq + 1));
    }
    return f;
  }

  static KeyValueFile load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  /// Removes and returns the value of `key`, if present.
  std::optional<std::string> take(const std::string& key) {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    std::string v = it->second;
    values_.erase(it);
    return v;
  }

  std::string take_or(const std::string& key, std::string def) { return take(key).value_or(std::move(def)); }

  template <class T>
  T take_number(const std::string& key, T def) {
    auto v = take(key);
    return v ? parse_number<T>(key, *v) : def;
  }

  bool take_bool(const std::string& key, bool def) {
    auto v = take(key);
    if (!v) return def;
    if (*v == "true" || *v == "1" || *v == "yes") return true;
    if (*v == "false" || *v == "0" || *v == "no") return false;
    throw ConfigError("key '" + key + "': expected a boolean, got '" + *v + "'");
  }

  template <class T>
  std::vector<T> take_list(const std::string& key, std::vector<T> def) {
    auto v = take(key);
    if (!v) return def;
    std::vector<T> out;
    for (const auto& item : split_list(*v)) out.push_back(parse_number<T>(key, item));
    return out;
  }

  std::vector<std::string> take_string_list(const std::string& key, std::vector<std::string> def) {
    auto v = take(key);
    return v ? split_list(*v) : def;
  }

  /// Throws naming the first key nobody consumed.
  void expect_consumed() const {
    if (!values_.empty()) throw ConfigError("unknown config key '" + values_.begin()->first + "'");
  }

  template <class T>
  static T parse_number(const std::string& key, const std::string& s) {
    T v{};
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) {
      throw ConfigError("key '" + key + "': cannot parse '" + s + "' as a number");
    }
    return v;
  }

  static std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

enum class DataKind { gaussian_mixture, linear_regression, idx };

struct DataConfig {
  DataKind kind = DataKind::gaussian_mixture;
  std::size_t samples = 4000;
  GaussianMixtureSpec mixture;
  double noise = 0.1;
  std::string images_path;
  std::string labels_path;
  PartitionScheme partition = PartitionScheme::dirichlet;
  double alpha = 0.1;
  std::size_t shards_per_client = 2;
  double test_fraction = 0.1;
};

struct ModelConfig {
  std::vector<std::size_t> hidden{32, 32};
  LayerKind activation = LayerKind::relu;
  std::size_t cut_block = 1;  // client keeps the first `cut_block` blocks
};

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  RunConfig run;
};

/// Reads the [data], [model], [run], [cycle] and [seeds] sections.
/// Other sections are left in `kv` for the caller.
inline ExperimentConfig read_experiment(KeyValueFile& kv) {
  ExperimentConfig c;
  const int schema = kv.take_number<int>("schema", kConfigSchema);
  if (schema != kConfigSchema) throw ConfigError("unsupported config schema " + std::to_string(schema));

  auto& d = c.data;
  const auto kind = kv.take_or("data.kind", "gaussian-mixture");
  if (kind == "gaussian-mixture") d.kind = DataKind::gaussian_mixture;
  else if (kind == "linear-regression") d.kind = DataKind::linear_regression;
  else if (kind == "idx") d.kind = DataKind::idx;
  else throw ConfigError("key 'data.kind': unknown dataset kind '" + kind + "'");
  d.samples = kv.take_number<std::size_t>("data.samples", d.samples);
  d.mixture.dim = kv.take_number<std::size_t>("data.dim", d.mixture.dim);
  d.mixture.classes = kv.take_number<std::size_t>("data.classes", d.mixture.classes);
  d.mixture.class_sep = kv.take_number<double>("data.class_sep", d.mixture.class_sep);
  d.mixture.modes_per_class = kv.take_number<std::size_t>("data.modes_per_class", d.mixture.modes_per_class);
  d.noise = kv.take_number<double>("data.noise", d.noise);
  d.images_path = kv.take_or("data.images", "");
  d.labels_path = kv.take_or("data.labels", "");
  const auto scheme = kv.take_or("data.partition", "dirichlet");
  if (scheme == "iid") d.partition = PartitionScheme::iid;
  else if (scheme == "dirichlet") d.partition = PartitionScheme::dirichlet;
  else if (scheme == "shards") d.partition = PartitionScheme::shards;
  else throw ConfigError("key 'data.partition': unknown scheme '" + scheme + "'");
  d.alpha = kv.take_number<double>("data.alpha", d.alpha);
  d.shards_per_client = kv.take_number<std::size_t>("data.shards_per_client", d.shards_per_client);
  d.test_fraction = kv.take_number<double>("data.test_fraction", d.test_fraction);

  auto& m = c.model;
  m.hidden = kv.take_list<std::size_t>("model.hidden", m.hidden);
  const auto act = kv.take_or("model.activation", "relu");
  if (act == "relu") m.activation = LayerKind::relu;
  else if (act == "tanh") m.activation = LayerKind::tanh;
  else throw ConfigError("key 'model.activation': expected relu or tanh");
  m.cut_block = kv.take_number<std::size_t>("model.cut", m.cut_block);

  auto& r = c.run;
  r.strategy.kind = parse_strategy(kv.take_or("run.strategy", "cycle-sfl"));
  r.clients = kv.take_number<std::size_t>("run.clients", 10);
  r.rounds = kv.take_number<std::size_t>("run.rounds", 100);
  r.batch_size = kv.take_number<std::size_t>("run.batch_size", r.batch_size);
  r.attendance = kv.take_number<double>("run.attendance", r.attendance);
  const auto opt = kv.take_or("run.optimizer", "adam");
  if (opt == "adam") r.strategy.optimizer = OptimizerKind::adam;
  else if (opt == "sgd") r.strategy.optimizer = OptimizerKind::sgd;
  else throw ConfigError("key 'run.optimizer': expected adam or sgd");
  const double lr = kv.take_number<double>("run.lr", 1e-3);
  r.strategy.lr_client = kv.take_number<double>("run.lr_client", lr);
  r.strategy.lr_server = kv.take_number<double>("run.lr_server", lr);
  r.eval_every = kv.take_number<std::size_t>("run.eval_every", r.eval_every);
  r.eval_train = kv.take_bool("run.eval_train", r.eval_train);
  r.strategy.record_wall_time = kv.take_bool("run.record_wall_time", false);

  auto& cy = r.strategy.cycle;
  cy.server_epochs = kv.take_number<std::size_t>("cycle.server_epochs", cy.server_epochs);
  cy.server_batch = kv.take_number<std::size_t>("cycle.server_batch", cy.server_batch);
  const auto mode = kv.take_or("cycle.pass_mode", "epoch-passes");
  if (mode == "epoch-passes") cy.mode = ServerPassMode::epoch_passes;
  else if (mode == "sampled-steps") cy.mode = ServerPassMode::sampled_steps;
  else throw ConfigError("key 'cycle.pass_mode': expected epoch-passes or sampled-steps");

  r.seeds.data = kv.take_number<std::uint64_t>("seeds.data", 0);
  r.seeds.init = kv.take_number<std::uint64_t>("seeds.init", 0);
  r.seeds.participation = kv.take_number<std::uint64_t>("seeds.participation", 0);
  r.seeds.shuffle = kv.take_number<std::uint64_t>("seeds.shuffle", 0);
  r.validate();
  return c;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  auto kv = KeyValueFile::load(path);
  auto c = read_experiment(kv);
  kv.expect_consumed();
  return c;
}

}  // namespace splitsim
