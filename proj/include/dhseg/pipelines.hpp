#pragma once

// Task pipelines: the post-processing operator registry and the predict,
// train and evaluate drivers used by the command-line tool.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dhseg/evalmetrics.hpp"
#include "dhseg/postproc.hpp"
#include "dhseg/task_config.hpp"

namespace dhseg {

/// What a post-processing track holds between operators.
enum class TrackKind { probability, mask, components, quads, boxes, polylines };
std::string_view to_string(TrackKind kind);

/// Operator names accepted in a chain.
std::vector<std::string> operator_names();

/// Throws std::invalid_argument when an operator is unknown, receives a
/// value it cannot consume, or has missing, unknown or ill-typed parameters.
void check_chain(const TaskConfig& task);

/// The outcome of the chain for one processed class.
struct TrackResult {
  int class_index = 0;
  std::string class_name;
  TrackKind kind = TrackKind::probability;
  ProbabilityMap probability;
  BinaryMask mask;  // last mask the chain produced
  std::vector<Quad> quads;
  std::vector<AxisAlignedBox> boxes;
  std::vector<PolyLine> polylines;
};

struct PostprocessContext {
  /// Page mask at the processed resolution; used by intersect_page_mask.
  const BinaryMask* page_mask = nullptr;
};

/// Applies the task chain to a full probability map (one channel per class).
std::vector<TrackResult> run_postprocess(const TaskConfig& task, const ProbabilityMap& probabilities,
                                         const PostprocessContext& context = {});

/// Mask to write for a track: rasterized geometry for quads and boxes,
/// otherwise the chain's last mask.
BinaryMask track_mask(const TrackResult& track, Size2 size);

/// Rescales geometry from `from` to `to` pixel grids: box edges scale
/// directly, point coordinates use pixel centers.
TrackResult rescale_geometry(const TrackResult& track, Size2 from, Size2 to);

/// Geometry document for one image (see docs/schemas/geometry.schema.json).
std::string geometry_json(const std::string& task, const std::string& image, Size2 size,
                          const std::vector<TrackResult>& tracks);

/// Network probabilities for an image already at processing resolution:
/// patch-wise with stitching when the task patches, otherwise one pass.
ProbabilityMap predict_probabilities(const TaskConfig& task, const NetworkGraph& graph, const WeightStore& weights,
                                     const RgbImage& image);

struct ImagePrediction {
  std::string stem;
  Size2 original_size;
  Size2 processed_size;
  std::vector<TrackResult> tracks;  // geometry in original coordinates
};

/// resize -> probabilities -> chain -> geometry mapped back to the original scale.
ImagePrediction predict_image(const TaskConfig& task, const NetworkGraph& graph, const WeightStore& weights,
                              const RgbImage& image, const std::string& stem,
                              const std::function<BinaryMask(const RgbImage&)>& page_mask_fn = {});

struct PredictOptions {
  std::filesystem::path output_dir;
  int jobs = 1;
  /// Page model used by intersect_page_mask; skipped when absent.
  std::optional<std::filesystem::path> page_weights;
};

/// Writes <stem>.<class>.png masks (at the original size) and <stem>.json per image.
std::vector<ImagePrediction> run_predict(const TaskConfig& task, const WeightStore& weights,
                                         const std::vector<std::filesystem::path>& images, const PredictOptions& options);

/// Expands directories to the image files they contain (sorted).
std::vector<std::filesystem::path> collect_images(const std::vector<std::filesystem::path>& inputs);

struct TrainRunOptions {
  std::filesystem::path dataset_dir;
  std::filesystem::path output_dir;
  std::optional<std::uint64_t> seed;
  /// Initial weights (e.g. a converted pretrained encoder); Xavier otherwise.
  std::optional<std::filesystem::path> init_weights;
  std::function<void(const StepInfo&)> on_step;
};

struct TrainRunResult {
  FitResult fit;
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
};

/// Loads the dataset, trains with the task's overrides and writes
/// checkpoints (epoch_NNN.dhsw + .json sidecar), final.dhsw and train_log.csv.
TrainRunResult run_train(const TaskConfig& task, const TrainRunOptions& options);

/// Compares predictions (masks and geometry JSON) with ground-truth labels.
MetricsReport run_evaluate(const TaskConfig& task, const std::filesystem::path& predictions_dir,
                           const std::filesystem::path& ground_truth_dir);

/// Graph for a task's class count.
NetworkGraph task_graph(const TaskConfig& task);

}  // namespace dhseg
