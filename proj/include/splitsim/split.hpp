#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "splitsim/nn.hpp"

namespace splitsim {

/// A layer stack cut after `cut` layers: the client owns [0, cut), the server [cut, L).
struct SplitSpec {
  std::vector<LayerSpec> layers;
  std::size_t cut = 1;

  SplitSpec() = default;
  SplitSpec(std::vector<LayerSpec> l, std::size_t c) : layers(std::move(l)), cut(c) { validate(); }

  void validate() const {
    validate_layers(layers);
    if (cut < 1 || cut + 1 > layers.size()) {
      throw ConfigError("cut index " + std::to_string(cut) + " outside [1, " + std::to_string(layers.size() - 1) + "]");
    }
    if (layers.front().kind != LayerKind::dense) throw ConfigError("the client half must start with a dense layer");
    const std::size_t cut_width = validate_layers(client_layers());
    validate_layers(server_layers(), cut_width);
  }

  std::span<const LayerSpec> client_layers() const { return std::span<const LayerSpec>(layers).first(cut); }
  std::span<const LayerSpec> server_layers() const { return std::span<const LayerSpec>(layers).subspan(cut); }

  std::size_t input_dim() const { return layers.front().in_dim; }
  std::size_t cut_dim() const { return validate_layers(client_layers()); }
  std::size_t output_dim() const { return validate_layers(layers); }
};

/// Activations sent from a client to the server, with their labels (label-sharing split learning).
struct SmashedBatch {
  std::size_t client_id = 0;
  std::uint64_t handle = 0;  // names the activation tape the client retains
  Tensor features;
  Targets targets;

  std::size_t size() const { return features.rows(); }
};

/// Gradient of the loss w.r.t. a SmashedBatch's features, returned to its client.
struct CutGradientBatch {
  std::size_t client_id = 0;
  std::uint64_t handle = 0;
  Tensor d_features;
};

class ClientModel {
 public:
  ClientModel() = default;
  ClientModel(std::size_t id, ParamBlock params) : id_(id), params_(std::move(params)) {}

  std::size_t id() const noexcept { return id_; }
  const ParamBlock& params() const noexcept { return params_; }
  ParamBlock& params() noexcept { return params_; }

  /// Replaces the parameters (relay, broadcast). Pending tapes become invalid.
  void assign(ParamBlock p) {
    params_ = std::move(p);
    tapes_.clear();
  }

  std::size_t pending_tapes() const noexcept { return tapes_.size(); }

 private:
  friend SmashedBatch client_forward(ClientModel&, const SplitSpec&, const Tensor&, Targets);
  friend Gradients client_backward_update(ClientModel&, const SplitSpec&, const CutGradientBatch&,
                                          const OptimizerConfig&);

  std::size_t id_ = 0;
  ParamBlock params_;
  std::map<std::uint64_t, Tape> tapes_;
  std::uint64_t next_handle_ = 1;
};

struct ServerModel {
  ParamBlock params;
  bool frozen = false;
};

/// Freezes a server for the lifetime of the guard.
class FreezeGuard {
 public:
  explicit FreezeGuard(ServerModel& s) : server_(s) { server_.frozen = true; }
  ~FreezeGuard() { server_.frozen = false; }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  ServerModel& server_;
};

/// Initializes the unsplit network from `rng` and cuts it, so both halves are
/// exactly the parameters a centralized model would start from.
inline std::pair<ParamBlock, ParamBlock> init_split(const SplitSpec& spec, Rng& rng) {
  spec.validate();
  ParamBlock full = init_params(spec.layers, rng);
  return {slice(full, 0, spec.cut), slice(full, spec.cut, spec.layers.size())};
}

inline SmashedBatch client_forward(ClientModel& model, const SplitSpec& spec, const Tensor& x, Targets y) {
  if (x.rank() != 2 || x.rows() == 0) throw ContractError("client " + std::to_string(model.id_) + ": empty batch");
  if (y.size() != x.rows()) throw DimensionError("client batch: label count differs from sample count");
  auto fwd = forward(model.params_, spec.client_layers(), x);
  SmashedBatch out;
  out.client_id = model.id_;
  out.handle = model.next_handle_++;
  out.features = std::move(fwd.output);
  out.targets = std::move(y);
  model.tapes_.emplace(out.handle, std::move(fwd.tape));
  return out;
}

struct ServerForward {
  double loss = 0.0;
  Tensor output;
  Tape tape;
};

inline void check_cut_width(const SplitSpec& spec, const Tensor& features) {
  if (features.rank() != 2 || features.cols() != spec.cut_dim()) {
    throw DimensionError("cut-dimension mismatch: server expects width " + std::to_string(spec.cut_dim()) +
                         ", features have width " + std::to_string(features.cols()));
  }
}

inline ServerForward server_forward_loss(const ServerModel& server, const SplitSpec& spec, const Tensor& features,
                                         const Targets& targets) {
  check_cut_width(spec, features);
  auto fwd = forward(server.params, spec.server_layers(), features);
  ServerForward out;
  out.loss = loss_and_grad(fwd.output, targets).loss;
  out.output = std::move(fwd.output);
  out.tape = std::move(fwd.tape);
  return out;
}

inline ServerForward server_forward_loss(const ServerModel& server, const SplitSpec& spec, const SmashedBatch& b) {
  return server_forward_loss(server, spec, b.features, b.targets);
}

/// Gradient service of a frozen server: d loss / d features, parameters untouched.
inline CutGradientBatch server_grad_for_client(const ServerModel& server, const SplitSpec& spec,
                                               const SmashedBatch& smashed, double* loss = nullptr) {
  if (!server.frozen) throw ContractError("gradient service requires a frozen server");
  check_cut_width(spec, smashed.features);
  auto fwd = forward(server.params, spec.server_layers(), smashed.features);
  auto lg = loss_and_grad(fwd.output, smashed.targets);
  if (loss) *loss = lg.loss;
  auto bwd = backward(server.params, spec.server_layers(), fwd.tape, lg.d_output, /*param_grads=*/false);
  return {smashed.client_id, smashed.handle, std::move(bwd.d_input)};
}

struct ServerStep {
  double loss = 0.0;
  Tensor d_features;  // computed with the parameters before the step
};

/// One server optimizer step on a feature batch. The returned cut gradient is
/// taken from the same backward pass, i.e. under the pre-step parameters.
inline ServerStep server_step(ServerModel& server, const SplitSpec& spec, const Tensor& features,
                              const Targets& targets, const OptimizerConfig& opt) {
  if (server.frozen) throw ContractError("server is frozen; parameter updates are not permitted");
  check_cut_width(spec, features);
  auto fwd = forward(server.params, spec.server_layers(), features);
  auto lg = loss_and_grad(fwd.output, targets);
  if (!std::isfinite(lg.loss)) throw NumericError("non-finite server loss");
  auto bwd = backward(server.params, spec.server_layers(), fwd.tape, lg.d_output);
  apply_update(server.params, bwd.grads, opt);
  return {lg.loss, std::move(bwd.d_input)};
}

/// Chain rule through the client half for a returned cut gradient, then one
/// optimizer step. Each tape can be consumed once.
inline Gradients client_backward_update(ClientModel& model, const SplitSpec& spec, const CutGradientBatch& cut,
                                        const OptimizerConfig& opt) {
  if (cut.client_id != model.id_) {
    throw ConsistencyError("cut gradient for client " + std::to_string(cut.client_id) + " delivered to client " +
                           std::to_string(model.id_));
  }
  auto it = model.tapes_.find(cut.handle);
  if (it == model.tapes_.end()) {
    throw StaleTapeError("client " + std::to_string(model.id_) + ": tape " + std::to_string(cut.handle) +
                         " already consumed or never recorded");
  }
  Tape tape = std::move(it->second);
  model.tapes_.erase(it);
  if (cut.d_features.shape() != tape.output().shape()) {
    throw DimensionError("cut gradient shape differs from the smashed batch");
  }
  auto bwd = backward(model.params_, spec.client_layers(), tape, cut.d_features);
  apply_update(model.params_, bwd.grads, opt);
  return std::move(bwd.grads);
}

}  // namespace splitsim
