#pragma once

#include <memory>
#include <vector>

#include "dhseg/backend.hpp"
#include "dhseg/image.hpp"
#include "dhseg/netgraph.hpp"
#include "dhseg/tensor.hpp"
#include "dhseg/weights.hpp"

namespace dhseg {

enum class OutputActivation { softmax, sigmoid };

/// Batch renormalization clamps and moving-average settings. r is clipped to
/// [r_min, r_max] and d to [-d_max, d_max].
struct BatchRenormSettings {
  float r_min = 0.1f;
  float r_max = 100.0f;
  float d_max = 1.0f;
  float momentum = 0.99f;
};

/// Forward/backward executor for a NetworkGraph. Holds references only; the
/// graph, weights and backend must outlive it. Inference never mutates the
/// weights, so one WeightStore can serve several executors concurrently.
class Network {
 public:
  Network(const NetworkGraph& graph, const WeightStore& weights, const Backend& backend = default_backend());
  ~Network();
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  const NetworkGraph& graph() const { return graph_; }

  /// Raw class scores for a (n, c, h, w) batch; h and w must be multiples of 32.
  Tensor logits(const Tensor& input) const;

  /// Everything the backward pass needs from one training-mode forward pass.
  struct Trace;

  /// Training-mode forward: decoder normalization uses batch statistics with
  /// renormalization clamps; encoder normalization keeps its stored statistics.
  Tensor forward_train(const Tensor& input, const BatchRenormSettings& renorm, Trace& trace) const;

  /// Accumulates d(loss)/d(parameter) into `grads` (shaped like the weights).
  void backward(const Trace& trace, const Tensor& dlogits, WeightStore& grads) const;

  /// Folds the batch statistics recorded in `trace` into the moving averages.
  static void update_moving_statistics(const Trace& trace, float momentum, WeightStore& weights);

  struct TraceDeleter {
    void operator()(Trace* t) const;
  };
  using TracePtr = std::unique_ptr<Trace, TraceDeleter>;
  static TracePtr make_trace();

 private:
  Tensor run(const Tensor& input, const BatchRenormSettings* renorm, Trace* trace) const;

  const NetworkGraph& graph_;
  const WeightStore& weights_;
  const Backend& backend_;
};

/// Applies softmax over channels or an element-wise sigmoid, in place.
void apply_activation(Tensor& scores, OutputActivation activation);

/// Full inference: accepts any spatial size by zero-padding symmetrically to
/// the next multiple of 32 and cropping the result back. Returns probabilities.
Tensor forward(const NetworkGraph& graph, const WeightStore& weights, const Tensor& batch,
               OutputActivation activation, const Backend& backend = default_backend());

/// Splits a (n, c, h, w) tensor into n interleaved probability maps.
std::vector<ProbabilityMap> to_probability_maps(const Tensor& probabilities);

}  // namespace dhseg
