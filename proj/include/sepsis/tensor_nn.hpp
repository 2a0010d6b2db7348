#pragma once

// Dense-network engine: affine layers, ReLU, inverted dropout, softmax
// cross-entropy, reverse-mode gradients, plain SGD and a finite-difference
// gradient checker. Everything is float64 unless a caller asks otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <fmt/format.h>

#include "sepsis/error.hpp"
#include "sepsis/rng.hpp"

namespace sepsis {

enum class Activation : std::uint8_t { ReLU = 0, Identity = 1 };

struct Layer {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> weights;  // out_dim x in_dim, row-major
  std::vector<double> biases;   // out_dim
  Activation activation = Activation::Identity;
  double dropout_p = 0.0;

  double weight(std::size_t row, std::size_t col) const { return weights[row * in_dim + col]; }
  std::size_t parameter_count() const { return weights.size() + biases.size(); }
  bool operator==(const Layer&) const = default;
};

struct Network {
  std::vector<Layer> layers;
  /// Bumped by every parameter update; caches remember the value they saw.
  std::uint64_t generation = 0;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().in_dim; }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().out_dim; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  std::vector<std::size_t> dims() const {
    std::vector<std::size_t> d;
    if (layers.empty()) return d;
    d.push_back(layers.front().in_dim);
    for (const auto& l : layers) d.push_back(l.out_dim);
    return d;
  }

  /// Parameters compare equal; the generation counter is bookkeeping only.
  bool same_parameters(const Network& other) const { return layers == other.layers; }

  void validate() const {
    if (layers.empty()) throw Error(Errc::BadDims, "network has no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.in_dim == 0 || l.out_dim == 0 || l.weights.size() != l.in_dim * l.out_dim ||
          l.biases.size() != l.out_dim) {
        throw Error(Errc::BadDims, fmt::format("layer {} has inconsistent shapes", k));
      }
      if (!(l.dropout_p >= 0.0 && l.dropout_p < 1.0)) {
        throw Error(Errc::BadDims, fmt::format("layer {} dropout {} outside [0,1)", k, l.dropout_p));
      }
      if (k + 1 < layers.size() && layers[k + 1].in_dim != l.out_dim) {
        throw Error(Errc::BadDims, fmt::format("layer {} output does not chain into layer {}", k, k + 1));
      }
    }
    if (layers.back().activation != Activation::Identity) {
      throw Error(Errc::BadDims, "final layer must be Identity (logits)");
    }
  }
};

/// Glorot-uniform weights, zero biases. Hidden layers get ReLU + `dropout_p`,
/// the output layer Identity with no dropout.
inline Network init_network(std::span<const std::size_t> dims, double dropout_p, std::uint64_t seed) {
  if (dims.size() < 2) throw Error(Errc::BadDims, "need at least input and output dims");
  if (std::any_of(dims.begin(), dims.end(), [](std::size_t d) { return d == 0; })) {
    throw Error(Errc::BadDims, "dims must be positive");
  }
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error(Errc::BadDims, "dropout_p outside [0,1)");
  Rng rng(seed);
  Network net;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    Layer l;
    l.in_dim = dims[k];
    l.out_dim = dims[k + 1];
    const bool last = k + 2 == dims.size();
    l.activation = last ? Activation::Identity : Activation::ReLU;
    l.dropout_p = last ? 0.0 : dropout_p;
    const double bound = std::sqrt(6.0 / static_cast<double>(l.in_dim + l.out_dim));
    l.weights.resize(l.in_dim * l.out_dim);
    for (auto& w : l.weights) w = rng.uniform(-bound, bound);
    l.biases.assign(l.out_dim, 0.0);
    net.layers.push_back(std::move(l));
  }
  return net;
}

inline Network init_network(std::initializer_list<std::size_t> dims, double dropout_p, std::uint64_t seed) {
  return init_network(std::span<const std::size_t>(dims.begin(), dims.size()), dropout_p, seed);
}

/// Per-layer unit multipliers: 0 for dropped units, 1/(1-p) for kept ones.
/// An empty entry means the layer had no dropout applied.
using DropoutMasks = std::vector<std::vector<double>>;

inline DropoutMasks sample_dropout_masks(const Network& net, Rng& rng) {
  DropoutMasks masks(net.layers.size());
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    if (l.dropout_p <= 0.0) continue;
    const double keep = 1.0 - l.dropout_p;
    masks[k].resize(l.out_dim);
    for (auto& m : masks[k]) m = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  }
  return masks;
}

struct ForwardCache {
  std::vector<std::vector<double>> inputs;       // input to each layer
  std::vector<std::vector<double>> pre;          // pre-activation of each layer
  DropoutMasks masks;                            // empty when run in Eval mode
  std::uint64_t generation = 0;
  std::vector<std::size_t> dims;
};

struct ForwardResult {
  std::vector<double> logits;
  ForwardCache cache;
};

namespace detail {

inline void check_input(const Network& net, std::size_t n) {
  if (n != net.input_dim()) {
    throw Error(Errc::DimensionMismatch,
                fmt::format("input has {} values, network expects {}", n, net.input_dim()));
  }
}

inline void check_masks(const Network& net, const DropoutMasks& masks) {
  if (masks.empty()) return;
  if (masks.size() != net.layers.size()) throw Error(Errc::ShapeMismatch, "mask count != layer count");
  for (std::size_t k = 0; k < masks.size(); ++k) {
    if (!masks[k].empty() && masks[k].size() != net.layers[k].out_dim) {
      throw Error(Errc::ShapeMismatch, fmt::format("mask {} has wrong width", k));
    }
  }
}

}  // namespace detail

/// Forward pass with explicit masks (empty = Eval). Keeps what backward needs.
inline ForwardResult forward_with_masks(const Network& net, std::span<const double> input,
                                        DropoutMasks masks) {
  detail::check_input(net, input.size());
  detail::check_masks(net, masks);
  ForwardResult r;
  r.cache.generation = net.generation;
  r.cache.dims = net.dims();
  std::vector<double> a(input.begin(), input.end());
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    std::vector<double> z(l.out_dim);
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      double acc = l.biases[o];
      const double* row = &l.weights[o * l.in_dim];
      for (std::size_t i = 0; i < l.in_dim; ++i) acc += row[i] * a[i];
      z[o] = acc;
    }
    std::vector<double> next(l.out_dim);
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      double v = l.activation == Activation::ReLU ? std::max(z[o], 0.0) : z[o];
      if (!masks.empty() && !masks[k].empty()) v *= masks[k][o];
      next[o] = v;
    }
    r.cache.inputs.push_back(std::move(a));
    r.cache.pre.push_back(std::move(z));
    a = std::move(next);
  }
  r.cache.masks = std::move(masks);
  r.logits = std::move(a);
  return r;
}

/// Eval mode: no dropout, no scaling, never touches an RNG.
inline ForwardResult forward_eval(const Network& net, std::span<const double> input) {
  return forward_with_masks(net, input, {});
}

/// Train mode: draws fresh inverted-dropout masks from `rng`.
inline ForwardResult forward_train(const Network& net, std::span<const double> input, Rng& rng) {
  detail::check_input(net, input.size());
  return forward_with_masks(net, input, sample_dropout_masks(net, rng));
}

/// Logits only, evaluated in `Scalar` arithmetic (used by the gradient checker
/// with long double). `relu_pattern`, if given, receives the sign pattern of
/// every ReLU pre-activation.
template <typename Scalar>
std::vector<Scalar> forward_logits_as(const Network& net, std::span<const double> input,
                                      const DropoutMasks& masks,
                                      std::vector<bool>* relu_pattern = nullptr) {
  detail::check_input(net, input.size());
  if (relu_pattern) relu_pattern->clear();
  std::vector<Scalar> a(input.begin(), input.end());
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    const auto& l = net.layers[k];
    std::vector<Scalar> next(l.out_dim);
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      Scalar acc = static_cast<Scalar>(l.biases[o]);
      for (std::size_t i = 0; i < l.in_dim; ++i) acc += static_cast<Scalar>(l.weights[o * l.in_dim + i]) * a[i];
      if (l.activation == Activation::ReLU) {
        if (relu_pattern) relu_pattern->push_back(acc > Scalar(0));
        acc = acc > Scalar(0) ? acc : Scalar(0);
      }
      if (!masks.empty() && !masks[k].empty()) acc *= static_cast<Scalar>(masks[k][o]);
      next[o] = acc;
    }
    a = std::move(next);
  }
  return a;
}

inline constexpr double kProbClamp = 1e-12;

struct LossResult {
  double loss = 0.0;
  double prob_positive = 0.0;  // softmax probability of class 1
  std::vector<double> dlogits;
};

/// Stable softmax probabilities in `Scalar` arithmetic.
template <typename Scalar>
std::vector<Scalar> softmax_as(std::span<const Scalar> logits) {
  const Scalar m = *std::max_element(logits.begin(), logits.end());
  std::vector<Scalar> p(logits.size());
  Scalar total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

/// -log p(label), evaluated as a log-sum-exp so confident predictions (p near 1)
/// keep full precision. With `clamp`, p is limited to [1e-12, 1-1e-12]; the
/// gradient checker turns it off because backward differentiates the unclamped loss.
template <typename Scalar>
Scalar cross_entropy_as(std::span<const Scalar> logits, int label, bool clamp = true) {
  const auto l = static_cast<std::size_t>(label);
  const Scalar m = *std::max_element(logits.begin(), logits.end());
  Scalar loss = 0;
  if (logits[l] == m) {
    Scalar rest = 0;
    for (std::size_t j = 0; j < logits.size(); ++j) {
      if (j != l) rest += std::exp(logits[j] - m);
    }
    loss = std::log1p(rest);
  } else {
    Scalar total = 0;
    for (Scalar z : logits) total += std::exp(z - m);
    loss = (m - logits[l]) + std::log(total);
  }
  if (!clamp) return loss;
  const Scalar lo = static_cast<Scalar>(kProbClamp);
  return std::clamp(loss, -std::log1p(-lo), -std::log(lo));
}

/// Per-sample softmax cross-entropy; with two logits this is the binary
/// cross-entropy term for y = label and y_hat = softmax(logits)[1].
inline LossResult softmax_cross_entropy(std::span<const double> logits, int label) {
  if (logits.size() < 2) throw Error(Errc::DimensionMismatch, "need at least two logits");
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(Errc::BadDomain, fmt::format("label {} out of range", label));
  }
  for (double z : logits) {
    if (!std::isfinite(z)) throw Error(Errc::NonFiniteInput, "non-finite logit");
  }
  const auto p = softmax_as<double>(logits);
  LossResult r;
  r.prob_positive = p[1];
  r.loss = -std::log(std::clamp(p[static_cast<std::size_t>(label)], kProbClamp, 1.0 - kProbClamp));
  // dlogits = p - onehot; the label entry uses p_label - 1 = -(sum of the other
  // probabilities), which avoids cancellation when p_label is close to 1.
  r.dlogits = p;
  double others = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    if (j != static_cast<std::size_t>(label)) others += p[j];
  }
  r.dlogits[static_cast<std::size_t>(label)] = -others;
  return r;
}

/// Mean squared error over the output vector and its gradient.
inline LossResult mean_squared_error(std::span<const double> output, std::span<const double> target) {
  if (output.size() != target.size() || output.empty()) {
    throw Error(Errc::DimensionMismatch, "output/target width");
  }
  LossResult r;
  r.dlogits.resize(output.size());
  const double n = static_cast<double>(output.size());
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double d = output[i] - target[i];
    r.loss += d * d / n;
    r.dlogits[i] = 2.0 * d / n;
  }
  return r;
}

struct LayerGradient {
  std::vector<double> weights;
  std::vector<double> biases;
  bool operator==(const LayerGradient&) const = default;
};

struct Gradients {
  std::vector<LayerGradient> layers;

  static Gradients zeros_like(const Network& net) {
    Gradients g;
    for (const auto& l : net.layers) {
      g.layers.push_back({std::vector<double>(l.weights.size(), 0.0), std::vector<double>(l.biases.size(), 0.0)});
    }
    return g;
  }

  /// this += scale * other (shapes must already agree).
  void accumulate(const Gradients& other, double scale = 1.0) {
    if (other.layers.size() != layers.size()) throw Error(Errc::ShapeMismatch, "gradient layer count");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      auto& mine = layers[k];
      const auto& theirs = other.layers[k];
      if (mine.weights.size() != theirs.weights.size() || mine.biases.size() != theirs.biases.size()) {
        throw Error(Errc::ShapeMismatch, fmt::format("gradient layer {} shape", k));
      }
      for (std::size_t i = 0; i < mine.weights.size(); ++i) mine.weights[i] += scale * theirs.weights[i];
      for (std::size_t i = 0; i < mine.biases.size(); ++i) mine.biases[i] += scale * theirs.biases[i];
    }
  }

  void scale(double factor) {
    for (auto& l : layers) {
      for (auto& v : l.weights) v *= factor;
      for (auto& v : l.biases) v *= factor;
    }
  }

  bool operator==(const Gradients&) const = default;
};

/// Reverse-mode gradients of a per-sample loss given d(loss)/d(logits).
/// Also returns d(loss)/d(input) through `dinput` when requested.
inline Gradients backward(const Network& net, const ForwardCache& cache, std::span<const double> dlogits,
                          std::vector<double>* dinput = nullptr) {
  if (cache.generation != net.generation || cache.dims != net.dims() ||
      cache.pre.size() != net.layers.size()) {
    throw Error(Errc::StaleCache, "cache was produced by a different network state");
  }
  if (dlogits.size() != net.output_dim()) throw Error(Errc::DimensionMismatch, "dlogits width");

  Gradients g = Gradients::zeros_like(net);
  std::vector<double> delta(dlogits.begin(), dlogits.end());  // d loss / d layer output
  for (std::size_t k = net.layers.size(); k-- > 0;) {
    const auto& l = net.layers[k];
    const auto& z = cache.pre[k];
    const auto& x = cache.inputs[k];
    const bool masked = !cache.masks.empty() && !cache.masks[k].empty();
    std::vector<double> dz(l.out_dim);
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      double d = delta[o];
      if (masked) d *= cache.masks[k][o];
      if (l.activation == Activation::ReLU && !(z[o] > 0.0)) d = 0.0;
      dz[o] = d;
    }
    auto& gl = g.layers[k];
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      gl.biases[o] = dz[o];
      double* row = &gl.weights[o * l.in_dim];
      for (std::size_t i = 0; i < l.in_dim; ++i) row[i] = dz[o] * x[i];
    }
    if (k == 0 && !dinput) break;
    std::vector<double> prev(l.in_dim, 0.0);
    for (std::size_t o = 0; o < l.out_dim; ++o) {
      if (dz[o] == 0.0) continue;
      const double* row = &l.weights[o * l.in_dim];
      for (std::size_t i = 0; i < l.in_dim; ++i) prev[i] += row[i] * dz[o];
    }
    delta = std::move(prev);
  }
  if (dinput) *dinput = std::move(delta);
  return g;
}

/// p := p - lr * g for every parameter.
inline void sgd_step(Network& net, const Gradients& grads, double learning_rate) {
  if (grads.layers.size() != net.layers.size()) throw Error(Errc::ShapeMismatch, "gradient layer count");
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    auto& l = net.layers[k];
    const auto& gl = grads.layers[k];
    if (gl.weights.size() != l.weights.size() || gl.biases.size() != l.biases.size()) {
      throw Error(Errc::ShapeMismatch, fmt::format("gradient layer {} shape", k));
    }
  }
  for (std::size_t k = 0; k < net.layers.size(); ++k) {
    auto& l = net.layers[k];
    const auto& gl = grads.layers[k];
    for (std::size_t i = 0; i < l.weights.size(); ++i) l.weights[i] -= learning_rate * gl.weights[i];
    for (std::size_t i = 0; i < l.biases.size(); ++i) l.biases[i] -= learning_rate * gl.biases[i];
  }
  ++net.generation;
}

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t parameters = 0;
  /// Parameters whose step had to be shrunk because a ReLU changed sign.
  std::size_t shrunk_steps = 0;
};

/// Compares `analytic` against central differences of the cross-entropy of
/// the network under fixed dropout `masks`. Differences are evaluated in long
/// double; the step is divided by 10 (down to 1e-9) whenever a perturbation
/// flips any ReLU, since the loss is not differentiable across that kink.
inline GradCheckReport grad_check_against(const Network& net, std::span<const double> input, int label,
                                          double epsilon, const DropoutMasks& masks,
                                          const Gradients& analytic) {
  using Wide = long double;
  Network probe = net;
  std::vector<bool> base_pattern;
  (void)forward_logits_as<Wide>(probe, input, masks, &base_pattern);

  GradCheckReport report;
  std::vector<bool> pattern;
  auto loss_at = [&](double& param, double value, bool& same_pattern) {
    const double saved = param;
    param = value;
    const auto logits = forward_logits_as<Wide>(probe, input, masks, &pattern);
    param = saved;
    same_pattern = pattern == base_pattern;
    return cross_entropy_as<Wide>(std::span<const Wide>(logits), label, false);
  };
  auto check = [&](double& param, double analytic_value) {
    double step = epsilon;
    Wide numeric = 0;
    bool shrunk = false;
    while (true) {
      bool up_ok = false, down_ok = false;
      // Perturb in long double space via the stored double parameter.
      const Wide up = loss_at(param, param + step, up_ok);
      const Wide down = loss_at(param, param - step, down_ok);
      const Wide actual_step = (static_cast<Wide>(param + step) - static_cast<Wide>(param - step));
      numeric = (up - down) / actual_step;
      if ((up_ok && down_ok) || step <= 1e-9) break;
      step /= 10.0;
      shrunk = true;
    }
    if (shrunk) ++report.shrunk_steps;
    const double num = static_cast<double>(numeric);
    const double denom = std::max({std::abs(analytic_value), std::abs(num), 1e-10});
    report.max_relative_error = std::max(report.max_relative_error, std::abs(analytic_value - num) / denom);
    ++report.parameters;
  };

  if (analytic.layers.size() != net.layers.size()) throw Error(Errc::ShapeMismatch, "gradient layer count");
  for (std::size_t k = 0; k < probe.layers.size(); ++k) {
    auto& l = probe.layers[k];
    for (std::size_t i = 0; i < l.weights.size(); ++i) check(l.weights[i], analytic.layers[k].weights.at(i));
    for (std::size_t i = 0; i < l.biases.size(); ++i) check(l.biases[i], analytic.layers[k].biases.at(i));
  }
  return report;
}

/// Analytic gradients of the cross-entropy under fixed masks.
inline Gradients cross_entropy_gradients(const Network& net, std::span<const double> input, int label,
                                         const DropoutMasks& masks) {
  auto fwd = forward_with_masks(net, input, masks);
  const auto loss = softmax_cross_entropy(fwd.logits, label);
  return backward(net, fwd.cache, loss.dlogits);
}

/// Maximum relative error between backprop and central differences.
inline double grad_check(const Network& net, std::span<const double> input, int label, double epsilon,
                         const DropoutMasks& masks) {
  const auto analytic = cross_entropy_gradients(net, input, label, masks);
  return grad_check_against(net, input, label, epsilon, masks, analytic).max_relative_error;
}

}  // namespace sepsis
