#pragma once

// The encoder-MLP classifier: architecture, mini-batch SGD training on
// cross-entropy, optional reconstruction pretraining, prediction and the
// learning-rate x epochs grid search.

#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "sepsis/error.hpp"
#include "sepsis/evalstats.hpp"
#include "sepsis/pipeline.hpp"
#include "sepsis/rng.hpp"
#include "sepsis/tensor_nn.hpp"

namespace sepsis {

/// Hidden widths after the input: two encoder layers, the head's hidden layer.
inline constexpr std::array<std::size_t, 3> kHiddenWidths{32, 16, 8};
inline constexpr std::size_t kNumClasses = 2;
/// Index of the layer whose (ReLU) output is the 16-dimensional latent code.
inline constexpr std::size_t kLatentLayer = 1;

struct TrainConfig {
  double learning_rate = 7e-4;
  std::size_t epochs = 550;
  std::size_t batch_size = 32;
  double dropout_p = 0.5;
  std::uint64_t seed = 0;
  double threshold = 0.5;
  bool pretrain = false;
  /// Feed [values, mask] instead of values (mirrors the pipeline flag).
  bool append_mask_channels = false;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
      throw Error(Errc::BadConfig, fmt::format("learning rate {} must be > 0", learning_rate));
    }
    if (epochs < 1) throw Error(Errc::BadConfig, "epochs must be >= 1");
    if (batch_size < 1) throw Error(Errc::BadConfig, "batch size must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw Error(Errc::BadConfig, "dropout_p outside [0,1)");
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw Error(Errc::BadConfig, "threshold outside [0,1]");
  }
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean per-sample training loss of each epoch
  std::vector<std::string> warnings;
};

/// Derives an independent seed for a named purpose.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose) {
  Fnv1a h;
  h.update_value(base);
  h.update(purpose);
  return h.digest();
}

/// dims [D, 32, 16, 8, 2]; ReLU + dropout after the three hidden layers.
inline Network build_model(std::size_t input_dim, double dropout_p, std::uint64_t seed) {
  if (input_dim < 1) throw Error(Errc::BadDims, "input dimension must be >= 1");
  const std::array<std::size_t, 5> dims{input_dim, kHiddenWidths[0], kHiddenWidths[1], kHiddenWidths[2], kNumClasses};
  return init_network(dims, dropout_p, seed);
}

/// Eval-mode 16-dimensional bottleneck activation for an input.
inline std::vector<double> latent_code(const Network& net, std::span<const double> input) {
  if (net.layers.size() <= kLatentLayer + 1) throw Error(Errc::BadDims, "network has no latent layer");
  auto fwd = forward_eval(net, input);
  return fwd.cache.inputs[kLatentLayer + 1];
}

struct Prediction {
  double prob_sepsis = 0.0;
  int label = 0;
};

/// Eval-mode prediction; label = 1 iff prob >= threshold (so ties go positive).
inline Prediction predict(const Network& net, std::span<const double> input, double threshold = 0.5) {
  const auto fwd = forward_eval(net, input);
  if (fwd.logits.size() != kNumClasses) throw Error(Errc::DimensionMismatch, "expected two logits");
  const auto p = softmax_as<double>(std::span<const double>(fwd.logits));
  return {p[1], p[1] >= threshold ? 1 : 0};
}

inline Prediction predict(const Network& net, const Sample& sample, double threshold, bool append_mask_channels) {
  const auto x = model_input(sample, append_mask_channels);
  return predict(net, x, threshold);
}

namespace detail {

struct Batchable {
  std::vector<std::vector<double>> inputs;
  std::vector<int> labels;
};

inline Batchable to_inputs(const std::vector<Sample>& samples, bool append_mask) {
  Batchable b;
  b.inputs.reserve(samples.size());
  for (const auto& s : samples) {
    b.inputs.push_back(model_input(s, append_mask));
    b.labels.push_back(s.label);
    if (b.inputs.back().size() != b.inputs.front().size()) {
      throw Error(Errc::DimensionMismatch, "samples of differing width");
    }
  }
  return b;
}

/// Shared mini-batch SGD loop. `sample_step` returns the loss of one sample
/// and accumulates its gradient into the batch gradient.
template <typename SampleStep>
std::vector<double> run_sgd(Network& net, std::size_t n, const TrainConfig& cfg, Rng& rng, SampleStep&& sample_step) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<double> epoch_loss;
  epoch_loss.reserve(cfg.epochs);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    double total = 0.0;
    for (std::size_t start = 0, batch = 0; start < n; start += cfg.batch_size, ++batch) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      auto grads = Gradients::zeros_like(net);
      double batch_loss = 0.0;
      try {
        for (std::size_t i = start; i < end; ++i) batch_loss += sample_step(order[i], grads);
      } catch (const Error& e) {
        if (e.code() != Errc::NonFiniteInput) throw;
        batch_loss = std::numeric_limits<double>::quiet_NaN();
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(Errc::NonFiniteLoss, fmt::format("non-finite loss at epoch {}, batch {}", epoch, batch));
      }
      grads.scale(1.0 / static_cast<double>(end - start));
      sgd_step(net, grads, cfg.learning_rate);
      total += batch_loss;
    }
    epoch_loss.push_back(total / static_cast<double>(n));
  }
  return epoch_loss;
}

}  // namespace detail

struct PretrainResult {
  std::vector<Layer> encoder;         // D -> 32 -> 16
  std::vector<double> epoch_mse;
};

/// Trains the D -> 32 -> 16 -> 32 -> D autoencoder on mean squared
/// reconstruction error (no dropout) and returns its encoder half.
inline PretrainResult pretrain_reconstruction(const std::vector<Sample>& samples, const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw Error(Errc::EmptyInput, "no samples to pretrain on");
  const auto data = detail::to_inputs(samples, cfg.append_mask_channels);
  const std::size_t dim = data.inputs.front().size();
  const std::array<std::size_t, 5> dims{dim, kHiddenWidths[0], kHiddenWidths[1], kHiddenWidths[0], dim};
  Network ae = init_network(dims, 0.0, derive_seed(cfg.seed, "pretrain-init"));
  Rng rng(derive_seed(cfg.seed, "pretrain-order"));

  PretrainResult out;
  out.epoch_mse = detail::run_sgd(ae, data.inputs.size(), cfg, rng, [&](std::size_t i, Gradients& acc) {
    auto fwd = forward_eval(ae, data.inputs[i]);
    const auto loss = mean_squared_error(fwd.logits, data.inputs[i]);
    acc.accumulate(backward(ae, fwd.cache, loss.dlogits));
    return loss.loss;
  });
  out.encoder.assign(ae.layers.begin(), ae.layers.begin() + 2);
  for (auto& l : out.encoder) l.dropout_p = cfg.dropout_p;
  return out;
}

struct TrainResult {
  Network network;
  TrainHistory history;
};

/// End-to-end training on cross-entropy. Each epoch shuffles with the seeded
/// RNG, walks mini-batches, averages per-sample gradients and takes one SGD step.
/// `encoder_init`, when given, replaces the first two layers' initial weights.
inline TrainResult train(const std::vector<Sample>& samples, const TrainConfig& cfg,
                         const std::vector<Layer>* encoder_init = nullptr) {
  cfg.validate();
  if (samples.empty()) throw Error(Errc::EmptyInput, "no training samples");
  const auto data = detail::to_inputs(samples, cfg.append_mask_channels);

  TrainResult out;
  const auto classes = count_classes(samples);
  if (classes.positive == 0 || classes.negative == 0) {
    out.history.warnings.push_back(fmt::format("training set has a single class ({} positive, {} negative)",
                                               classes.positive, classes.negative));
  }

  out.network = build_model(data.inputs.front().size(), cfg.dropout_p, derive_seed(cfg.seed, "init"));
  std::optional<PretrainResult> pretrained;
  if (!encoder_init && cfg.pretrain) {
    pretrained = pretrain_reconstruction(samples, cfg);
    encoder_init = &pretrained->encoder;
  }
  if (encoder_init) {
    if (encoder_init->size() != 2 || (*encoder_init)[0].in_dim != out.network.input_dim() ||
        (*encoder_init)[1].out_dim != kHiddenWidths[1]) {
      throw Error(Errc::ShapeMismatch, "encoder weights do not fit the model");
    }
    for (std::size_t k = 0; k < 2; ++k) {
      out.network.layers[k].weights = (*encoder_init)[k].weights;
      out.network.layers[k].biases = (*encoder_init)[k].biases;
    }
  }

  Rng rng(derive_seed(cfg.seed, "train-order"));
  Network& net = out.network;
  out.history.epoch_loss = detail::run_sgd(net, data.inputs.size(), cfg, rng, [&](std::size_t i, Gradients& acc) {
    auto fwd = forward_train(net, data.inputs[i], rng);
    const auto loss = softmax_cross_entropy(fwd.logits, data.labels[i]);
    acc.accumulate(backward(net, fwd.cache, loss.dlogits));
    return loss.loss;
  });
  return out;
}

struct Evaluation {
  std::vector<Prediction> predictions;
  ConfusionMatrix confusion;
  Metrics metrics;
};

inline Evaluation evaluate(const Network& net, const std::vector<Sample>& samples, double threshold,
                           bool append_mask_channels) {
  if (samples.empty()) throw Error(Errc::EmptyInput, "no samples to evaluate");
  Evaluation e;
  std::vector<int> predicted, labels;
  for (const auto& s : samples) {
    e.predictions.push_back(predict(net, s, threshold, append_mask_channels));
    predicted.push_back(e.predictions.back().label);
    labels.push_back(s.label);
  }
  e.confusion = confusion(predicted, labels);
  e.metrics = metrics(e.confusion);
  return e;
}

// ---- grid search ---------------------------------------------------------------------

enum class SelectionRule { SensitivityPlusPpv, Accuracy, Sensitivity, Ppv };

inline SelectionRule parse_selection_rule(std::string_view name) {
  if (name == "sensitivity_plus_ppv") return SelectionRule::SensitivityPlusPpv;
  if (name == "accuracy") return SelectionRule::Accuracy;
  if (name == "sensitivity") return SelectionRule::Sensitivity;
  if (name == "ppv") return SelectionRule::Ppv;
  throw Error(Errc::BadConfig, fmt::format("unknown selection rule '{}'", name));
}

/// Score in [0, 2] (fractions, not percent); undefined rates count as 0.
inline double selection_score(const Metrics& m, SelectionRule rule) {
  auto frac = [](double percent) { return std::isnan(percent) ? 0.0 : percent / 100.0; };
  switch (rule) {
    case SelectionRule::SensitivityPlusPpv: return frac(m.sensitivity) + frac(m.ppv);
    case SelectionRule::Accuracy: return frac(m.accuracy);
    case SelectionRule::Sensitivity: return frac(m.sensitivity);
    case SelectionRule::Ppv: return frac(m.ppv);
  }
  return 0.0;
}

struct GridSpec {
  std::vector<double> learning_rates{7e-4, 1e-3};
  std::vector<std::size_t> epoch_counts{550};
  SelectionRule selection = SelectionRule::SensitivityPlusPpv;
};

struct GridCell {
  double learning_rate = 0.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  Metrics validation;
  double score = 0.0;
};

struct GridResult {
  TrainConfig best;
  std::vector<GridCell> cells;  // sorted by (learning rate, epochs)
};

/// Seed for one grid cell: hash(base seed, learning rate bits, epochs).
inline std::uint64_t grid_cell_seed(std::uint64_t base, double learning_rate, std::size_t epochs) {
  Fnv1a h;
  h.update_value(base);
  h.update_value(std::bit_cast<std::uint64_t>(learning_rate));
  h.update_value(static_cast<std::uint64_t>(epochs));
  return h.digest();
}

/// Trains one model per (learning rate, epochs) cell and keeps the best
/// validation score; ties resolve to the lowest learning rate, then fewest epochs.
inline GridResult grid_search(const std::vector<Sample>& train_samples, const std::vector<Sample>& val_samples,
                              const GridSpec& grid, const TrainConfig& base) {
  if (grid.learning_rates.empty() || grid.epoch_counts.empty()) throw Error(Errc::EmptyGrid, "empty grid");
  if (val_samples.empty()) throw Error(Errc::EmptyInput, "no validation samples");
  auto lrs = grid.learning_rates;
  auto epochs = grid.epoch_counts;
  std::sort(lrs.begin(), lrs.end());
  lrs.erase(std::unique(lrs.begin(), lrs.end()), lrs.end());
  std::sort(epochs.begin(), epochs.end());
  epochs.erase(std::unique(epochs.begin(), epochs.end()), epochs.end());

  GridResult result;
  std::optional<std::size_t> best;
  for (double lr : lrs) {
    for (std::size_t ep : epochs) {
      TrainConfig cfg = base;
      cfg.learning_rate = lr;
      cfg.epochs = ep;
      cfg.seed = grid_cell_seed(base.seed, lr, ep);
      const auto trained = train(train_samples, cfg);
      const auto eval = evaluate(trained.network, val_samples, cfg.threshold, cfg.append_mask_channels);
      GridCell cell{lr, ep, cfg.seed, eval.metrics, selection_score(eval.metrics, grid.selection)};
      result.cells.push_back(cell);
      if (!best || cell.score > result.cells[*best].score) best = result.cells.size() - 1;
    }
  }
  result.best = base;
  result.best.learning_rate = result.cells[*best].learning_rate;
  result.best.epochs = result.cells[*best].epochs;
  result.best.seed = result.cells[*best].seed;
  return result;
}

}  // namespace sepsis
