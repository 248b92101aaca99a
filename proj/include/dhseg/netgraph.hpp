#pragma once

// Symbolic description of the segmentation network: a ResNet-50 contracting
// path, two 1x1 dimensionality reductions, a five-step bilinear expanding path
// and a 1x1 classifier. The graph is pure data; `Network` (network.hpp)
// executes it.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dhseg {

struct ArchConfig {
  int n_classes = 2;
  int input_channels = 3;
  int reduction_channels = 512;
  /// Output channels of the five expanding steps, deepest first.
  std::array<int, 5> decoder_channels{512, 256, 128, 64, 32};
  bool pretrained_encoder = true;
};

/// Throws std::invalid_argument on a violated invariant.
void validate(const ArchConfig& config);
/// Overload for configs read from files, where the decoder width list can have any length.
ArchConfig make_arch_config(int n_classes, int input_channels, int reduction_channels,
                            const std::vector<int>& decoder_channels, bool pretrained_encoder);

enum class LayerKind {
  input,
  conv,
  bottleneck_block,
  downsample_bottleneck,
  max_pool,
  bilinear_upsample,
  concat,
  relu,
  final_conv,
};

enum class NormKind { none, frozen_batch_norm, batch_renorm };

enum class Section { input, encoder, reduction, decoder, head };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Section section);

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  Section section = Section::encoder;
  std::vector<int> inputs;  // producer layer indices
  int kernel_h = 0;
  int kernel_w = 0;
  int in_channels = 0;
  int out_channels = 0;
  /// Bottleneck width for the two residual block kinds.
  int mid_channels = 0;
  int stride = 1;
  NormKind norm = NormKind::none;
  bool bias = false;
  bool trainable = true;
  bool pretrained = false;
  /// log2 of the downsampling factor of this layer's output.
  int level = 0;
};

struct SkipLink {
  int source_layer = 0;
  int decoder_step = 0;  // 1 = deepest
};

struct NetworkGraph {
  ArchConfig config;
  std::vector<LayerSpec> layers;
  std::vector<SkipLink> skip_links;
  int output_layer = 0;

  int index_of(std::string_view name) const;
  const LayerSpec& layer(std::string_view name) const { return layers.at(static_cast<size_t>(index_of(name))); }
};

/// Total downsampling factor of the contracting path.
inline constexpr int kEncoderStride = 32;

NetworkGraph build_graph(const ArchConfig& config);

struct ParamReport {
  std::int64_t total = 0;
  std::int64_t pretrained = 0;
  std::int64_t fully_trainable = 0;
  std::int64_t reduction_block = 0;
  std::int64_t decoder_only = 0;
  std::int64_t final_conv = 0;
  std::vector<std::pair<std::string, std::int64_t>> per_layer;
};

/// Trainable weights and biases, including normalization scale/offset.
/// Moving statistics are not parameters.
std::int64_t layer_parameter_count(const LayerSpec& layer);
ParamReport count_parameters(const NetworkGraph& graph);

struct Shape4 {
  int batch = 0, height = 0, width = 0, channels = 0;
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

/// Output shape in (batch, height, width, channels) order. Requires spatial
/// extents divisible by 32 and the configured channel count.
Shape4 forward_shape(const NetworkGraph& graph, Shape4 input);

/// Per-layer output shapes for an input of the given extent (checked as in
/// forward_shape).
std::vector<Shape4> infer_shapes(const NetworkGraph& graph, Shape4 input);

/// Fixed-width per-layer table: name, kind, channels, output shape, params,
/// pretrained flag.
std::string format_graph_report(const NetworkGraph& graph, Shape4 input);

}  // namespace dhseg
