#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mct/data.hpp"
#include "mct/model.hpp"

namespace mct {

struct TrainConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 30;
  std::size_t lr_decay_every = 10;  // 0 disables the schedule
  double lr_decay_factor = 0.5;
  std::size_t batch_size = 50;
  std::uint64_t seed = 1;
  Mode mode = Mode::kMct;
  double clip_norm = 5.0;      // global L2 norm; <= 0 disables clipping
  double stop_below = 0.0;     // stop once an epoch's mean loss drops below this; 0 disables
  std::size_t threads = 1;

  /// Small batches and no decay, tuned for overfitting the toy dataset.
  static TrainConfig toy();
  void validate() const;
  /// Learning rate in effect during `epoch` (0-based).
  double lr_at(std::size_t epoch) const;
};

/// Mean over non-pad positions of −log softmax(logits)[target].
/// `pad` is true (non-zero) at positions to ignore.
Tensor cross_entropy_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> pad);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

/// Bias-corrected Adam update, in place. The state is sized lazily on the
/// first call.
void adam_step(std::span<Tensor* const> params, std::span<const std::vector<double>> grads, AdamState& state,
               const TrainConfig& cfg, double lr);
void adam_step(std::span<Tensor* const> params, std::span<const std::vector<double>> grads, AdamState& state,
               const TrainConfig& cfg);

/// Scales the gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<std::vector<double>>& grads, double max_norm);

/// Teacher-forced loss for one (bos ... eos) token sequence.
Tensor example_loss(const Tensor& regions, std::span<const int> tokens, const ModelParams& params,
                    const DecodeContext& ctx);

/// Mean example loss and its gradient (one flat vector per parameter, in
/// visit order) over the given examples.
struct LossAndGradient {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;
};
LossAndGradient loss_and_gradient(const CaptionModel& model, const Batch& batch, std::size_t threads = 1);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains model.params in place and returns the per-epoch history. The
/// model's mode must match cfg.mode.
std::vector<EpochRecord> train(CaptionModel& model, const FeatureFile& features, std::span<const Example> examples,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace mct
