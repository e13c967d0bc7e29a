#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "splitsim/error.hpp"
#include "splitsim/nn.hpp"
#include "splitsim/rng.hpp"

namespace splitsim {

struct Dataset {
  Tensor x;  // [n, d]
  Targets y;
  std::size_t num_classes = 0;  // 0 for regression

  std::size_t size() const { return x.rows(); }
  std::size_t dim() const { return x.cols(); }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.num_classes = num_classes;
    out.y = y.gather(idx);
    if (!idx.empty()) out.x = x.gather_rows(idx);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generators

struct GaussianMixtureSpec {
  std::size_t classes = 4;
  std::size_t dim = 8;
  double class_sep = 2.0;          // stddev of the class-mean coordinates
  std::size_t modes_per_class = 1;  // >1 gives a non-convex class layout
};

/// Balanced Gaussian mixture: class means ~ N(0, class_sep^2) per coordinate,
/// samples = mean + N(0, 1). Samples are ordered class-major then shuffled.
inline Dataset gaussian_mixture(const GaussianMixtureSpec& spec, std::size_t n, std::uint64_t seed) {
  if (spec.classes < 2 || spec.dim == 0 || spec.modes_per_class == 0) {
    throw ConfigError("gaussian mixture needs at least 2 classes, dim >= 1 and one mode per class");
  }
  if (n < spec.classes * 10) throw ConfigError("gaussian mixture needs n >= 10 * classes");
  Rng rng = Rng::substream(seed, "data.gaussian-mixture");
  const std::size_t modes = spec.classes * spec.modes_per_class;
  std::vector<double> means(modes * spec.dim);
  for (double& m : means) m = rng.normal(0.0, spec.class_sep);

  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i * spec.classes / n);
  // i * C / n hands out floor/ceil(n / C) per class; equal when C divides n.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);

  Tensor x = Tensor::zeros({n, spec.dim});
  std::vector<int> y(n);
  for (std::size_t r = 0; r < n; ++r) {
    const int c = labels[order[r]];
    const std::size_t mode = static_cast<std::size_t>(c) * spec.modes_per_class + rng.index(spec.modes_per_class);
    for (std::size_t d = 0; d < spec.dim; ++d) x.at(r, d) = means[mode * spec.dim + d] + rng.normal();
    y[r] = c;
  }
  return {std::move(x), Targets::classification(std::move(y)), spec.classes};
}

/// y = w . x + noise with x ~ N(0, I), w ~ N(0, 1).
inline Dataset linear_regression(std::size_t dim, double noise, std::size_t n, std::uint64_t seed) {
  if (dim == 0 || n == 0) throw ConfigError("linear regression needs dim >= 1 and n >= 1");
  if (noise < 0.0) throw ConfigError("noise must be non-negative");
  Rng rng = Rng::substream(seed, "data.linear-regression");
  std::vector<double> w(dim);
  for (double& v : w) v = rng.normal();
  Tensor x = Tensor::zeros({n, dim});
  Tensor t = Tensor::zeros({n, 1});
  for (std::size_t r = 0; r < n; ++r) {
    double acc = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      x.at(r, d) = rng.normal();
      acc += w[d] * x.at(r, d);
    }
    t.at(r, 0) = acc + noise * rng.normal();
  }
  return {std::move(x), Targets::regression(std::move(t)), 0};
}

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionScheme { iid, dirichlet, shards };

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::iid;
  double alpha = 1.0;              // dirichlet concentration
  std::size_t shards_per_client = 2;
  std::size_t clients = 1;
  std::uint64_t seed = 0;
  double test_fraction = 0.1;
};

struct ClientDataset {
  std::size_t client_id = 0;      // contiguous id after exclusions
  std::size_t source_id = 0;      // index before exclusions
  Dataset train;
  Dataset test;
  std::vector<std::size_t> train_indices;  // rows of the source dataset
  std::vector<std::size_t> test_indices;
};

struct PartitionResult {
  std::vector<ClientDataset> clients;
  std::vector<std::vector<std::size_t>> assignment;  // per source client, before exclusions
  std::vector<std::size_t> dropped;                   // source ids left out
  std::vector<std::string> warnings;
};

/// Assigns every sample to exactly one client (before exclusions).
inline std::vector<std::vector<std::size_t>> assign_samples(const Dataset& data, const PartitionSpec& spec) {
  const std::size_t n = data.size();
  const std::size_t N = spec.clients;
  if (N == 0) throw ConfigError("partition needs at least one client");
  Rng rng = Rng::substream(spec.seed, "partition");
  std::vector<std::vector<std::size_t>> parts(N);

  if (spec.scheme == PartitionScheme::iid) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    for (std::size_t k = 0; k < n; ++k) parts[k * N / n].push_back(idx[k]);
  } else {
    if (data.num_classes == 0) throw ConfigError("label-skewed partitions need a classification dataset");
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.y.classes[i])].push_back(i);

    if (spec.scheme == PartitionScheme::dirichlet) {
      if (!(spec.alpha > 0.0)) throw ConfigError("dirichlet alpha must be positive");
      // One Dir(alpha * 1_N) draw per class, then a categorical draw per sample.
      for (const auto& members : by_class) {
        std::vector<double> p(N);
        double sum = 0.0;
        for (double& v : p) {
          v = rng.gamma(spec.alpha);
          sum += v;
        }
        if (!(sum > 0.0)) {
          p.assign(N, 0.0);
          p[rng.index(N)] = 1.0;
        }
        std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
        for (std::size_t i : members) parts[pick(rng.engine())].push_back(i);
      }
    } else {
      const std::size_t k = spec.shards_per_client;
      if (k == 0) throw ConfigError("shards per client must be positive");
      std::vector<std::size_t> sorted;
      for (const auto& members : by_class) sorted.insert(sorted.end(), members.begin(), members.end());
      const std::size_t shards = N * k;
      if (shards > n) throw ConfigError("more shards than samples");
      std::vector<std::size_t> shard_ids(shards);
      for (std::size_t s = 0; s < shards; ++s) shard_ids[s] = s;
      rng.shuffle(shard_ids);
      for (std::size_t s = 0; s < shards; ++s) {
        const std::size_t sid = shard_ids[s];
        const std::size_t lo = sid * n / shards, hi = (sid + 1) * n / shards;
        for (std::size_t i = lo; i < hi; ++i) parts[s / k].push_back(sorted[i]);
      }
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  return parts;
}

/// Label-skewed (or iid) split over clients, then a per-client train/test split.
/// Clients whose train share cannot fill one batch are excluded.
inline PartitionResult partition(const Dataset& data, const PartitionSpec& spec, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (spec.clients > data.size() / batch_size) {
    throw ConfigError("too many clients: " + std::to_string(spec.clients) + " > n / batch = " +
                      std::to_string(data.size() / batch_size));
  }
  if (spec.test_fraction < 0.0 || spec.test_fraction >= 1.0) throw ConfigError("test fraction must lie in [0, 1)");
  PartitionResult res;
  res.assignment = assign_samples(data, spec);
  Rng rng = Rng::substream(spec.seed, "partition.train-test");
  for (std::size_t src = 0; src < res.assignment.size(); ++src) {
    std::vector<std::size_t> idx = res.assignment[src];
    rng.shuffle(idx);
    const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(idx.size())));
    const std::size_t n_train = idx.size() - n_test;
    if (n_train < batch_size) {
      res.dropped.push_back(src);
      res.warnings.push_back("client " + std::to_string(src) + " dropped: " + std::to_string(n_train) +
                             " training samples cannot fill a batch of " + std::to_string(batch_size));
      continue;
    }
    ClientDataset c;
    c.client_id = res.clients.size();
    c.source_id = src;
    c.train_indices.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    c.test_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(c.train_indices.begin(), c.train_indices.end());
    std::sort(c.test_indices.begin(), c.test_indices.end());
    c.train = data.subset(c.train_indices);
    c.test = data.subset(c.test_indices);
    res.clients.push_back(std::move(c));
  }
  if (res.clients.empty()) throw PartitionError("every client was dropped; lower the batch size or client count");
  return res;
}

/// Per-class sample counts of each source client.
inline std::vector<std::vector<std::size_t>> class_histograms(const Dataset& data,
                                                              const std::vector<std::vector<std::size_t>>& parts) {
  std::vector<std::vector<std::size_t>> h(parts.size(), std::vector<std::size_t>(data.num_classes, 0));
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i : parts[k]) ++h[k][static_cast<std::size_t>(data.y.classes[i])];
  }
  return h;
}

/// CSV manifest: client_id,class,count (one row per source client and class).
inline void write_partition_manifest(std::ostream& out, const Dataset& data, const PartitionResult& p) {
  out << "client_id,class,count\n";
  const auto h = class_histograms(data, p.assignment);
  for (std::size_t k = 0; k < h.size(); ++k) {
    for (std::size_t c = 0; c < h[k].size(); ++c) out << k << ',' << c << ',' << h[k][c] << '\n';
  }
}

// ---------------------------------------------------------------------------
// Participation and local batches

/// Clients per round: round-half-up of rate * N, at least one.
inline std::size_t participants_per_round(std::size_t clients, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("attendance rate must lie in (0, 1]");
  const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(clients) + 0.5));
  return std::clamp<std::size_t>(k, 1, clients);
}

struct ParticipationPlan {
  double rate = 1.0;
  std::size_t per_round = 0;
  std::vector<std::vector<std::size_t>> rounds;  // ascending ids per round
};

/// Uniform sampling without replacement, independently per round.
inline ParticipationPlan sample_participants(std::size_t clients, double rate, std::size_t rounds,
                                             std::uint64_t seed) {
  if (clients == 0) throw ConfigError("participation needs at least one client");
  ParticipationPlan plan;
  plan.rate = rate;
  plan.per_round = participants_per_round(clients, rate);
  plan.rounds.reserve(rounds);
  Rng rng = Rng::substream(seed, "participation");
  std::vector<std::size_t> ids(clients);
  for (std::size_t t = 0; t < rounds; ++t) {
    for (std::size_t i = 0; i < clients; ++i) ids[i] = i;
    // partial Fisher-Yates: the first per_round slots are a uniform sample
    for (std::size_t i = 0; i < plan.per_round; ++i) {
      const std::size_t j = i + rng.index(clients - i);
      std::swap(ids[i], ids[j]);
    }
    std::vector<std::size_t> chosen(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(plan.per_round));
    std::sort(chosen.begin(), chosen.end());
    plan.rounds.push_back(std::move(chosen));
  }
  return plan;
}

/// Epoch-style mini-batch iterator: shuffled passes without replacement,
/// reshuffled once a pass cannot fill another batch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, Rng rng) : n_(n), batch_(batch), rng_(std::move(rng)) {
    if (batch_ == 0 || batch_ > n_) throw ConfigError("batch size must lie in [1, n]");
    order_.resize(n_);
    reshuffle();
  }

  /// The sampler a client uses inside a run; also used by the centralized reference.
  static BatchSampler for_client(std::size_t n, std::size_t batch, std::uint64_t shuffle_seed, std::size_t client) {
    return BatchSampler(n, batch, Rng::substream(shuffle_seed, "client-batches", client));
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > n_) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    rng_.shuffle(order_);
    pos_ = 0;
  }

  std::size_t n_;
  std::size_t batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace splitsim
