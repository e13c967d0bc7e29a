#pragma once

// Reference implementations the protocol code is checked against. Nothing in
// here calls nn-core's backward or loss gradient: the centralized trainer
// carries its own straight-line backpropagation.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "splitsim/data.hpp"
#include "splitsim/nn.hpp"

namespace splitsim::oracle {

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h per coordinate.
inline std::vector<double> finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                                            std::vector<double> theta, double h = 1e-6) {
  if (!(h > 0.0)) throw OracleError("finite differences need h > 0");
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = theta[i];
    theta[i] = orig + h;
    const double up = f(theta);
    theta[i] = orig - h;
    const double down = f(theta);
    theta[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) throw OracleError("objective is not finite near coordinate " + std::to_string(i));
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero components from
/// turning round-off into a large ratio.
inline double relative_error(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-3) {
  if (a.size() != b.size()) throw OracleError("gradient lengths differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, relative_error(a[i], b[i], floor));
  return m;
}

// ---------------------------------------------------------------------------
// Centralized trainer

namespace detail {

struct Matrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> v;
  double& operator()(std::size_t r, std::size_t c) { return v[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

inline Matrix from_tensor(const Tensor& t) { return {t.rows(), t.cols(), std::vector<double>(t.values().begin(), t.values().end())}; }

/// Mean-batch loss gradient w.r.t. the network output.
inline Matrix output_gradient(const Matrix& out, const Targets& y) {
  Matrix d{out.rows, out.cols, std::vector<double>(out.v.size(), 0.0)};
  const double inv = 1.0 / static_cast<double>(out.rows);
  for (std::size_t r = 0; r < out.rows; ++r) {
    if (y.kind == LossKind::cross_entropy) {
      double m = out(r, 0);
      for (std::size_t c = 1; c < out.cols; ++c) m = std::max(m, out(r, c));
      double s = 0.0;
      for (std::size_t c = 0; c < out.cols; ++c) s += std::exp(out(r, c) - m);
      const double lse = m + std::log(s);
      for (std::size_t c = 0; c < out.cols; ++c) d(r, c) = std::exp(out(r, c) - lse) * inv;
      d(r, static_cast<std::size_t>(y.classes[r])) -= inv;
    } else {
      for (std::size_t c = 0; c < out.cols; ++c) d(r, c) = 2.0 * (out(r, c) - y.values.at(r, c)) * inv;
    }
  }
  return d;
}

/// Gradients of the unsplit network for one batch, by hand-written backprop.
inline Gradients reference_gradients(const ParamBlock& p, std::span<const LayerSpec> specs, const Tensor& x,
                                     const Targets& y) {
  std::vector<Matrix> acts{from_tensor(x)};
  for (std::size_t k = 0; k < specs.size(); ++k) {
    const Matrix& in = acts.back();
    Matrix out;
    if (specs[k].kind == LayerKind::dense) {
      const auto& W = p.layers[k].weight;
      const auto& b = p.layers[k].bias;
      out = {in.rows, specs[k].out_dim, std::vector<double>(in.rows * specs[k].out_dim)};
      for (std::size_t r = 0; r < in.rows; ++r)
        for (std::size_t o = 0; o < out.cols; ++o) {
          double s = b[o];
          for (std::size_t i = 0; i < in.cols; ++i) s += W.at(o, i) * in(r, i);
          out(r, o) = s;
        }
    } else {
      out = in;
      for (double& v : out.v) {
        if (specs[k].kind == LayerKind::relu) v = v > 0.0 ? v : 0.0;
        else if (specs[k].kind == LayerKind::tanh) v = std::tanh(v);
      }
    }
    acts.push_back(std::move(out));
  }

  Gradients g(specs.size());
  Matrix delta = output_gradient(acts.back(), y);
  for (std::size_t k = specs.size(); k-- > 0;) {
    const Matrix& in = acts[k];
    if (specs[k].kind == LayerKind::dense) {
      const auto& W = p.layers[k].weight;
      const std::size_t O = specs[k].out_dim, I = specs[k].in_dim;
      std::vector<double> dw(O * I), db(O);
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t i = 0; i < I; ++i) {
          double s = 0.0;
          for (std::size_t r = 0; r < in.rows; ++r) s += delta(r, o) * in(r, i);
          dw[o * I + i] = s;
        }
        double s = 0.0;
        for (std::size_t r = 0; r < in.rows; ++r) s += delta(r, o);
        db[o] = s;
      }
      Matrix next{in.rows, I, std::vector<double>(in.rows * I)};
      for (std::size_t r = 0; r < in.rows; ++r)
        for (std::size_t i = 0; i < I; ++i) {
          double s = 0.0;
          for (std::size_t o = 0; o < O; ++o) s += delta(r, o) * W.at(o, i);
          next(r, i) = s;
        }
      g[k].weight = Tensor({O, I}, std::move(dw));
      g[k].bias = Tensor({O}, std::move(db));
      delta = std::move(next);
    } else if (specs[k].kind == LayerKind::relu) {
      for (std::size_t i = 0; i < delta.v.size(); ++i) {
        if (!(in.v[i] > 0.0)) delta.v[i] = 0.0;
      }
    } else if (specs[k].kind == LayerKind::tanh) {
      const Matrix& out = acts[k + 1];
      for (std::size_t i = 0; i < delta.v.size(); ++i) delta.v[i] *= 1.0 - out.v[i] * out.v[i];
    }
  }
  return g;
}

}  // namespace detail

struct CentralizedConfig {
  std::size_t steps = 0;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 0;
  std::size_t sampler_index = 0;  // which per-client batch stream to replay
};

/// Plain mini-batch training of the unsplit network. Initialization and batch
/// order replay those a run gives client `sampler_index`.
inline ParamBlock centralized_train(std::span<const LayerSpec> specs, const Dataset& data,
                                    const CentralizedConfig& cfg) {
  Rng init = Rng::substream(cfg.init_seed, "init");
  ParamBlock p = init_params(specs, init);
  if (cfg.steps == 0) return p;
  auto sampler = BatchSampler::for_client(data.size(), cfg.batch_size, cfg.shuffle_seed, cfg.sampler_index);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto idx = sampler.next();
    const auto g = detail::reference_gradients(p, specs, data.x.gather_rows(idx), data.y.gather(idx));
    apply_update(p, g, cfg.optimizer);
  }
  return p;
}

// ---------------------------------------------------------------------------
// One-neuron toy model: y_hat = w_s * w_c * x, loss (y - y_hat)^2

struct ToyInstance {
  double w_c = 0.0, w_s = 0.0, x = 0.0, y = 0.0, eta = 0.0;
};

struct ToySteps {
  double end_to_end_client_step = 0.0;  // uses w_s
  double cycle_client_step = 0.0;       // uses the updated w_s
  double w_s_after = 0.0;
};

inline ToySteps toy_steps(const ToyInstance& t) {
  ToySteps s;
  s.w_s_after = t.w_s - 2.0 * t.eta * t.w_c * t.x * (t.w_s * t.w_c * t.x - t.y);
  s.end_to_end_client_step = 2.0 * t.eta * t.w_s * t.x * (t.w_s * t.w_c * t.x - t.y);
  s.cycle_client_step = 2.0 * t.eta * s.w_s_after * t.x * (s.w_s_after * t.w_c * t.x - t.y);
  return s;
}

/// y / (w_c x) < w_s' < w_s: the server step shrinks the residual without overshooting.
inline bool toy_in_regime(const ToyInstance& t, const ToySteps& s) {
  return t.w_c > 0 && t.w_s > 0 && t.x > 0 && t.y > 0 && t.w_s * t.w_c * t.x > t.y &&
         t.y / (t.w_c * t.x) < s.w_s_after && s.w_s_after < t.w_s;
}

struct ToyPoint {
  ToyInstance instance;
  ToySteps steps;
  bool holds = false;  // cycle step < end-to-end step
};

struct ToySweepReport {
  std::size_t grid_points = 0;
  std::size_t excluded = 0;
  std::vector<ToyPoint> points;  // in-regime points only
  std::vector<ToyPoint> violations;

  std::size_t valid() const { return points.size(); }
  bool all_hold() const { return violations.empty() && !points.empty(); }
};

/// w_c, x in {0.5, 1, 2}, y in {0.5, 1}, eta in {1e-3, 1e-2, 1e-1}, and w_s set
/// so the residual w_s w_c x - y takes `residual_points` log-spaced values in
/// [1e-3, 1e-1]. Points outside the near-convergence regime are excluded.
inline ToySweepReport toy_sweep(std::size_t residual_points = 200) {
  ToySweepReport rep;
  const double wcs[] = {0.5, 1.0, 2.0};
  const double xs[] = {0.5, 1.0, 2.0};
  const double ys[] = {0.5, 1.0};
  const double etas[] = {1e-3, 1e-2, 1e-1};
  for (double wc : wcs)
    for (double x : xs)
      for (double y : ys)
        for (double eta : etas)
          for (std::size_t k = 0; k < residual_points; ++k) {
            const double frac = residual_points > 1 ? static_cast<double>(k) / static_cast<double>(residual_points - 1) : 0.0;
            const double residual = std::pow(10.0, -3.0 + 2.0 * frac);
            ToyInstance t{wc, (y + residual) / (wc * x), x, y, eta};
            ++rep.grid_points;
            const auto s = toy_steps(t);
            if (!toy_in_regime(t, s)) {
              ++rep.excluded;
              continue;
            }
            ToyPoint p{t, s, s.cycle_client_step < s.end_to_end_client_step};
            if (!p.holds) rep.violations.push_back(p);
            rep.points.push_back(p);
          }
  return rep;
}

}  // namespace splitsim::oracle
