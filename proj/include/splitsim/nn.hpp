#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "splitsim/error.hpp"
#include "splitsim/rng.hpp"
#include "splitsim/tensor.hpp"

namespace splitsim {

// ---------------------------------------------------------------------------
// Layers

enum class LayerKind { dense, relu, tanh, softmax_output };

/// One layer of a feed-forward stack. `softmax_output` is a terminal marker:
/// it passes logits through unchanged and tells the model that outputs are
/// class scores for the fused softmax/cross-entropy loss.
struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;

  static LayerSpec dense(std::size_t in, std::size_t out) { return {LayerKind::dense, in, out}; }
  static LayerSpec relu() { return {LayerKind::relu, 0, 0}; }
  static LayerSpec tanh() { return {LayerKind::tanh, 0, 0}; }
  static LayerSpec softmax_output() { return {LayerKind::softmax_output, 0, 0}; }

  bool has_params() const noexcept { return kind == LayerKind::dense; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::relu: return "relu";
    case LayerKind::tanh: return "tanh";
    case LayerKind::softmax_output: return "softmax-output";
  }
  return "?";
}

/// Checks that dense dimensions compose across activations and that the
/// softmax marker, if present, is last. Returns the output width for an input
/// of width `input_dim` (0 = infer from the first dense layer).
inline std::size_t validate_layers(std::span<const LayerSpec> specs, std::size_t input_dim = 0) {
  if (specs.empty()) throw DimensionError("layer list is empty");
  std::size_t dim = input_dim;
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    if (s.kind == LayerKind::dense) {
      if (s.in_dim == 0 || s.out_dim == 0) {
        throw DimensionError("layer " + std::to_string(k) + ": dense dimensions must be positive");
      }
      if (dim != 0 && dim != s.in_dim) {
        throw DimensionError("layer " + std::to_string(k) + ": expects input width " + std::to_string(s.in_dim) +
                             " but receives " + std::to_string(dim));
      }
      dim = s.out_dim;
    } else if (s.kind == LayerKind::softmax_output && k + 1 != specs.size()) {
      throw DimensionError("layer " + std::to_string(k) + ": softmax-output must be the last layer");
    }
  }
  return dim;
}

// ---------------------------------------------------------------------------
// Parameters

struct LayerParams {
  Tensor weight;  // [out, in]; empty for parameter-free layers
  Tensor bias;    // [out]

  bool empty() const noexcept { return weight.empty(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

using Gradients = std::vector<LayerParams>;

/// Parameters of a contiguous run of layers plus their optimizer state.
struct ParamBlock {
  std::vector<LayerParams> layers;
  std::vector<LayerParams> first_moment;
  std::vector<LayerParams> second_moment;
  std::uint64_t step = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const ParamBlock&, const ParamBlock&) = default;
};

inline Gradients zeros_like(const std::vector<LayerParams>& layers) {
  Gradients g(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (layers[k].empty()) continue;
    g[k].weight = Tensor::zeros(layers[k].weight.shape());
    g[k].bias = Tensor::zeros(layers[k].bias.shape());
  }
  return g;
}

/// Parameters (weights then bias, layer by layer) as one flat vector.
inline std::vector<double> flatten(const std::vector<LayerParams>& layers) {
  std::vector<double> out;
  for (const auto& l : layers) {
    out.insert(out.end(), l.weight.values().begin(), l.weight.values().end());
    out.insert(out.end(), l.bias.values().begin(), l.bias.values().end());
  }
  return out;
}

inline void unflatten_into(std::vector<LayerParams>& layers, std::span<const double> flat) {
  std::size_t i = 0;
  for (auto& l : layers) {
    for (double& v : l.weight.values()) v = flat[i++];
    for (double& v : l.bias.values()) v = flat[i++];
  }
  if (i != flat.size()) throw DimensionError("unflatten: length mismatch");
}

/// Byte-for-byte comparison of values, optimizer state and step counter.
inline bool bit_equal(const std::vector<LayerParams>& a, const std::vector<LayerParams>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!a[k].weight.bit_equal(b[k].weight) || !a[k].bias.bit_equal(b[k].bias)) return false;
  }
  return true;
}

inline bool bit_equal(const ParamBlock& a, const ParamBlock& b) {
  return a.step == b.step && bit_equal(a.layers, b.layers) && bit_equal(a.first_moment, b.first_moment) &&
         bit_equal(a.second_moment, b.second_moment);
}

/// Sub-block covering layers [begin, end).
inline ParamBlock slice(const ParamBlock& p, std::size_t begin, std::size_t end) {
  ParamBlock out;
  out.layers.assign(p.layers.begin() + begin, p.layers.begin() + end);
  out.first_moment.assign(p.first_moment.begin() + begin, p.first_moment.begin() + end);
  out.second_moment.assign(p.second_moment.begin() + begin, p.second_moment.begin() + end);
  out.step = p.step;
  return out;
}

/// Kaiming-uniform for dense layers fed by a relu, Xavier-uniform otherwise; zero bias.
inline ParamBlock init_params(std::span<const LayerSpec> specs, Rng& rng) {
  validate_layers(specs);
  ParamBlock p;
  p.layers.resize(specs.size());
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    if (!s.has_params()) continue;
    const bool after_relu = k > 0 && specs[k - 1].kind == LayerKind::relu;
    const double fan_in = static_cast<double>(s.in_dim);
    const double fan_out = static_cast<double>(s.out_dim);
    const double bound = after_relu ? std::sqrt(6.0 / fan_in) : std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w = Tensor::zeros({s.out_dim, s.in_dim});
    for (double& v : w.values()) v = rng.uniform(-bound, bound);
    p.layers[k].weight = std::move(w);
    p.layers[k].bias = Tensor::zeros({s.out_dim});
  }
  p.first_moment = zeros_like(p.layers);
  p.second_moment = zeros_like(p.layers);
  return p;
}

inline void check_params_match(const ParamBlock& params, std::span<const LayerSpec> specs) {
  if (params.layers.size() != specs.size()) {
    throw ConsistencyError("parameter block has " + std::to_string(params.layers.size()) + " layers, spec has " +
                           std::to_string(specs.size()));
  }
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const auto& s = specs[k];
    const auto& l = params.layers[k];
    if (s.has_params()) {
      if (l.weight.shape() != std::vector<std::size_t>{s.out_dim, s.in_dim} ||
          l.bias.shape() != std::vector<std::size_t>{s.out_dim}) {
        throw ConsistencyError("layer " + std::to_string(k) + ": parameter shapes do not match spec");
      }
    } else if (!l.empty()) {
      throw ConsistencyError("layer " + std::to_string(k) + ": parameter-free layer carries parameters");
    }
  }
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Activation cache of one forward pass: activations[k] is the input of layer k,
/// activations.back() the output.
struct Tape {
  std::vector<Tensor> activations;
  std::uint64_t params_step = 0;

  const Tensor& input() const { return activations.front(); }
  const Tensor& output() const { return activations.back(); }
};

struct ForwardResult {
  Tensor output;
  Tape tape;
};

inline ForwardResult forward(const ParamBlock& params, std::span<const LayerSpec> specs, const Tensor& input) {
  check_params_match(params, specs);
  if (input.rank() != 2 || input.rows() == 0) throw DimensionError("forward: input must be a non-empty [B, d] matrix");
  Tape tape;
  tape.params_step = params.step;
  tape.activations.reserve(specs.size() + 1);
  tape.activations.push_back(input);
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const Tensor& x = tape.activations.back();
    const auto& s = specs[k];
    const std::size_t batch = x.rows();
    Tensor y;
    switch (s.kind) {
      case LayerKind::dense: {
        if (x.cols() != s.in_dim) {
          throw DimensionError("layer " + std::to_string(k) + ": expects input width " + std::to_string(s.in_dim) +
                               " but receives " + std::to_string(x.cols()));
        }
        const Tensor& w = params.layers[k].weight;
        const Tensor& b = params.layers[k].bias;
        y = Tensor::zeros({batch, s.out_dim});
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t o = 0; o < s.out_dim; ++o) {
            double acc = b[o];
            for (std::size_t i = 0; i < s.in_dim; ++i) acc += w.at(o, i) * x.at(r, i);
            y.at(r, o) = acc;
          }
        }
        break;
      }
      case LayerKind::relu:
        y = x;
        for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
        break;
      case LayerKind::tanh:
        y = x;
        for (double& v : y.values()) v = std::tanh(v);
        break;
      case LayerKind::softmax_output:
        y = x;
        break;
    }
    tape.activations.push_back(std::move(y));
  }
  ForwardResult out;
  out.output = tape.activations.back();
  out.tape = std::move(tape);
  return out;
}

struct BackwardResult {
  Gradients grads;  // empty when parameter gradients were not requested
  Tensor d_input;
};

/// Gradients of a scalar loss given its gradient w.r.t. the forward output.
/// With `param_grads == false` only the input gradient is produced; the math
/// for `d_input` is identical either way.
inline BackwardResult backward(const ParamBlock& params, std::span<const LayerSpec> specs, const Tape& tape,
                               const Tensor& d_output, bool param_grads = true) {
  check_params_match(params, specs);
  if (tape.activations.size() != specs.size() + 1) {
    throw ConsistencyError("tape holds " + std::to_string(tape.activations.size()) + " activations for " +
                           std::to_string(specs.size()) + " layers");
  }
  if (tape.params_step != params.step) {
    throw ConsistencyError("tape was recorded at parameter step " + std::to_string(tape.params_step) +
                           ", parameters are at step " + std::to_string(params.step));
  }
  if (d_output.shape() != tape.output().shape()) throw DimensionError("backward: d_output shape differs from output");

  BackwardResult res;
  if (param_grads) res.grads.resize(specs.size());
  Tensor grad = d_output;
  for (std::size_t k = specs.size(); k-- > 0;) {
    const auto& s = specs[k];
    const Tensor& x = tape.activations[k];
    const std::size_t batch = x.rows();
    switch (s.kind) {
      case LayerKind::dense: {
        const Tensor& w = params.layers[k].weight;
        if (param_grads) {
          Tensor dw = Tensor::zeros({s.out_dim, s.in_dim});
          Tensor db = Tensor::zeros({s.out_dim});
          for (std::size_t o = 0; o < s.out_dim; ++o) {
            for (std::size_t i = 0; i < s.in_dim; ++i) {
              double acc = 0.0;
              for (std::size_t r = 0; r < batch; ++r) acc += grad.at(r, o) * x.at(r, i);
              dw.at(o, i) = acc;
            }
            double acc = 0.0;
            for (std::size_t r = 0; r < batch; ++r) acc += grad.at(r, o);
            db[o] = acc;
          }
          res.grads[k].weight = std::move(dw);
          res.grads[k].bias = std::move(db);
        }
        Tensor dx = Tensor::zeros({batch, s.in_dim});
        for (std::size_t r = 0; r < batch; ++r) {
          for (std::size_t i = 0; i < s.in_dim; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < s.out_dim; ++o) acc += grad.at(r, o) * w.at(o, i);
            dx.at(r, i) = acc;
          }
        }
        grad = std::move(dx);
        break;
      }
      case LayerKind::relu:
        for (std::size_t i = 0; i < grad.size(); ++i) {
          if (!(x[i] > 0.0)) grad[i] = 0.0;
        }
        break;
      case LayerKind::tanh: {
        const Tensor& y = tape.activations[k + 1];
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= 1.0 - y[i] * y[i];
        break;
      }
      case LayerKind::softmax_output:
        break;
    }
  }
  res.d_input = std::move(grad);
  return res;
}

// ---------------------------------------------------------------------------
// Losses

enum class LossKind { cross_entropy, mse };

inline const char* to_string(LossKind k) { return k == LossKind::cross_entropy ? "cross-entropy" : "mse"; }

/// Supervision for a batch: class indices for cross-entropy, a target matrix for MSE.
struct Targets {
  LossKind kind = LossKind::cross_entropy;
  std::vector<int> classes;
  Tensor values;

  static Targets classification(std::vector<int> labels) {
    Targets t;
    t.kind = LossKind::cross_entropy;
    t.classes = std::move(labels);
    return t;
  }

  static Targets regression(Tensor target) {
    Targets t;
    t.kind = LossKind::mse;
    t.values = std::move(target);
    return t;
  }

  std::size_t size() const { return kind == LossKind::cross_entropy ? classes.size() : values.rows(); }

  Targets gather(std::span<const std::size_t> idx) const {
    Targets out;
    out.kind = kind;
    if (kind == LossKind::cross_entropy) {
      out.classes.reserve(idx.size());
      for (std::size_t i : idx) out.classes.push_back(classes[i]);
    } else {
      out.values = values.gather_rows(idx);
    }
    return out;
  }

  friend bool operator==(const Targets&, const Targets&) = default;
};

inline Targets concat(std::span<const Targets> parts) {
  if (parts.empty()) return {};
  Targets out;
  out.kind = parts.front().kind;
  if (out.kind == LossKind::cross_entropy) {
    for (const auto& p : parts) out.classes.insert(out.classes.end(), p.classes.begin(), p.classes.end());
  } else {
    std::vector<Tensor> vs;
    for (const auto& p : parts) vs.push_back(p.values);
    out.values = concat_rows(vs);
  }
  return out;
}

struct LossResult {
  double loss = 0.0;
  Tensor d_output;
};

/// Mean-over-batch loss and its gradient w.r.t. `output`.
/// Cross-entropy is fused with softmax (log-sum-exp with max subtraction).
/// MSE is the per-sample sum of squared errors, averaged over the batch.
inline LossResult loss_and_grad(const Tensor& output, const Targets& targets) {
  const std::size_t batch = output.rows();
  const std::size_t width = output.cols();
  if (batch == 0) throw DimensionError("loss: empty batch");
  const double inv_batch = 1.0 / static_cast<double>(batch);
  LossResult res;
  res.d_output = Tensor::zeros(output.shape());
  if (targets.kind == LossKind::cross_entropy) {
    if (targets.classes.size() != batch) throw DimensionError("loss: label count differs from batch size");
    double total = 0.0;
    for (std::size_t r = 0; r < batch; ++r) {
      const int label = targets.classes[r];
      if (label < 0 || static_cast<std::size_t>(label) >= width) {
        throw LabelError("label " + std::to_string(label) + " outside [0, " + std::to_string(width) + ")");
      }
      auto z = output.row(r);
      const double m = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - m);
      const double lse = m + std::log(sum);
      total += lse - z[static_cast<std::size_t>(label)];
      auto d = res.d_output.row(r);
      for (std::size_t c = 0; c < width; ++c) d[c] = std::exp(z[c] - lse) * inv_batch;
      d[static_cast<std::size_t>(label)] -= inv_batch;
    }
    res.loss = total * inv_batch;
  } else {
    if (targets.values.shape() != output.shape()) throw DimensionError("loss: target shape differs from output");
    double total = 0.0;
    for (std::size_t i = 0; i < output.size(); ++i) {
      const double e = output[i] - targets.values[i];
      total += e * e;
      res.d_output[i] = 2.0 * e * inv_batch;
    }
    res.loss = total * inv_batch;
  }
  return res;
}

/// Index of the largest score per row.
inline std::vector<int> argmax_rows(const Tensor& scores) {
  std::vector<int> out(scores.rows());
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    auto z = scores.row(r);
    out[r] = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { sgd, adam };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One optimizer step in place. The step counter advances even for a zero gradient.
inline void apply_update(ParamBlock& params, const Gradients& grads, const OptimizerConfig& opt) {
  if (!(opt.lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (grads.size() != params.layers.size()) throw ConsistencyError("gradient layer count differs from parameters");
  for (std::size_t k = 0; k < grads.size(); ++k) {
    if (grads[k].weight.shape() != params.layers[k].weight.shape() ||
        grads[k].bias.shape() != params.layers[k].bias.shape()) {
      throw ConsistencyError("layer " + std::to_string(k) + ": gradient shape differs from parameters");
    }
    if (!grads[k].weight.all_finite() || !grads[k].bias.all_finite()) {
      throw NumericError("layer " + std::to_string(k) + ": non-finite gradient");
    }
  }
  if (params.first_moment.size() != params.layers.size()) params.first_moment = zeros_like(params.layers);
  if (params.second_moment.size() != params.layers.size()) params.second_moment = zeros_like(params.layers);

  params.step += 1;
  const double t = static_cast<double>(params.step);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);

  auto update = [&](Tensor& theta, const Tensor& g, Tensor& m, Tensor& v) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (opt.kind == OptimizerKind::sgd) {
        theta[i] -= opt.lr * g[i];
      } else {
        m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
        v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
        const double m_hat = m[i] / c1;
        const double v_hat = v[i] / c2;
        theta[i] -= opt.lr * m_hat / (std::sqrt(v_hat) + opt.eps);
      }
    }
  };
  for (std::size_t k = 0; k < grads.size(); ++k) {
    auto& l = params.layers[k];
    if (l.empty()) continue;
    update(l.weight, grads[k].weight, params.first_moment[k].weight, params.second_moment[k].weight);
    update(l.bias, grads[k].bias, params.first_moment[k].bias, params.second_moment[k].bias);
  }
}

}  // namespace splitsim
