#pragma once

// Optimization harness: loss, L2 penalty, learning-rate schedule, Adam and the
// epoch loop.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dhseg/data_pipeline.hpp"
#include "dhseg/network.hpp"

namespace dhseg {

enum class LossMode { softmax_ce, sigmoid_bce };

std::string_view to_string(LossMode mode);
LossMode loss_mode_from_string(std::string_view name);
OutputActivation activation_for(LossMode mode);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  double initial_lr = 1e-4;
  /// Allows initial_lr outside [1e-5, 1e-4].
  bool lr_override = false;
  double lr_decay_rate = 0.95;
  int lr_decay_period = 200;
  double weight_decay = 1e-6;
  AdamSettings adam;
  BatchRenormSettings batch_renorm;
  int epochs = 1;
  int batch_size = 1;
  LossMode loss_mode = LossMode::softmax_ce;
  std::uint64_t seed = 0;

  /// Pixel budget applied when samples are loaded; 0 keeps the native size.
  double resize_budget = 0.0;
  std::optional<PatchSpec> patches;
  bool augment = true;
  AugmentParams augment_params;
  /// When false only reductions, decoder and head are updated.
  bool train_encoder = true;
  int prefetch = 4;
};

/// Throws std::invalid_argument naming the offending field. `allow_zero_epochs`
/// admits the no-op run used to check that weights stay untouched.
void validate(const TrainConfig& config, bool allow_zero_epochs = false);

/// initial_lr * decay_rate^(step / decay_period), continuous exponent.
double lr_schedule(long long step, const TrainConfig& config);

struct LossResult {
  double loss = 0.0;
  /// d(loss)/d(logits), same shape as the logits.
  Tensor grad;
  long long counted_pixels = 0;
};

/// Mean cross-entropy (softmax mode) or mean per-channel binary cross-entropy
/// (sigmoid mode) over pixels whose ignore flag is 0. `target` has the logits'
/// shape; `ignore` holds n*h*w flags or is empty. Throws when nothing is counted.
LossResult pixel_loss(const Tensor& logits, const Tensor& target, std::span<const std::uint8_t> ignore, LossMode mode);

/// weight_decay * sum of squared trainable convolution kernels.
double l2_penalty(const WeightStore& weights, const std::vector<ParamSlot>& slots, double weight_decay);
/// Adds 2 * weight_decay * w to the kernel gradients.
void add_l2_gradient(const WeightStore& weights, const std::vector<ParamSlot>& slots, double weight_decay,
                     WeightStore& grads);

class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  /// One update of every tensor in `names`.
  void step(WeightStore& weights, const WeightStore& grads, double lr, const std::vector<std::string>& names);
  long long steps() const { return t_; }

 private:
  AdamSettings settings_;
  std::map<std::string, Tensor> m_, v_;
  long long t_ = 0;
};

/// Names the optimizer updates under `config`.
std::vector<std::string> optimized_parameters(const std::vector<ParamSlot>& slots, const TrainConfig& config);

struct Batch {
  Tensor input;                      // (n, 3, H, W), H and W multiples of 32
  Tensor target;                     // (n, classes, H, W)
  std::vector<std::uint8_t> ignore;  // n * H * W
};

/// Stacks samples, zero-padding each to the batch's largest size rounded up
/// to a multiple of 32. Padding is ignored by the loss.
Batch assemble_batch(const std::vector<Sample>& samples);

struct StepInfo {
  long long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct FitCallbacks {
  std::function<void(const StepInfo&)> on_step;
  std::function<void(int epoch, long long step, const WeightStore& weights)> on_epoch;
};

struct FitResult {
  std::vector<double> history;  // mean loss per epoch
  long long steps = 0;
};

/// Adam on pixel_loss + l2_penalty, batch renormalization in the decoder.
/// Deterministic given config.seed. Throws on an empty dataset or a
/// non-finite loss.
FitResult fit(const NetworkGraph& graph, WeightStore& weights, const std::vector<Sample>& dataset,
              const TrainConfig& config, const FitCallbacks& callbacks = {});

/// Number of optimizer steps one epoch takes.
long long steps_per_epoch(const std::vector<Sample>& dataset, const TrainConfig& config);

}  // namespace dhseg
