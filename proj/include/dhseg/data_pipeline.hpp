#pragma once

// Annotation codecs, resizing, patching, augmentation and the prefetch queue
// that feeds the training loop.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dhseg/geometry.hpp"
#include "dhseg/image.hpp"
#include "dhseg/tensor.hpp"

namespace dhseg {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend auto operator<=>(const Rgb&, const Rgb&) = default;
};

std::string to_string(Rgb c);

struct ClassEntry {
  std::string name;
  Rgb color;
};

/// A label color standing for several classes at once (multilabel mode only).
struct CompositeColor {
  Rgb color;
  std::vector<int> classes;
};

struct ClassMap {
  std::vector<ClassEntry> classes;
  std::vector<CompositeColor> composites;
  bool multilabel = false;

  int size() const { return static_cast<int>(classes.size()); }
  int index_of(const std::string& name) const;
};

/// Throws when colors repeat, composites reference unknown classes, or
/// composites appear in exclusive mode.
void validate(const ClassMap& classmap);

/// Per-class 0/1 planes (h, w, n_classes). Exclusive mode yields exactly one 1
/// per pixel. Unknown colors raise std::invalid_argument listing each color
/// and its pixel count.
Image<std::uint8_t> encode_mask(const RgbImage& label, const ClassMap& classmap);

/// Class index per pixel -> color raster. Throws on an index outside [0, n).
RgbImage decode_mask(const LabelMap& class_indices, const ClassMap& classmap);

/// Index of the first set channel of an exclusive target (argmax).
LabelMap class_indices(const Image<std::uint8_t>& target);

/// Pixel is 1 iff its distance to some polyline segment is <= radius.
/// Radius 0 draws the 1-pixel Bresenham line. Vertices are rounded to integers.
BinaryMask render_baselines(const std::vector<PolyLine>& polylines, Size2 size, double radius = 5.0);

/// Reads [[[x, y], ...], ...] from a JSON file.
std::vector<PolyLine> read_baselines_json(const std::filesystem::path& path);

// --- resizing ---------------------------------------------------------------

/// Output size for a pixel budget: both sides scaled by sqrt(budget / area),
/// rounded, then shrunk until the product fits. Sizes within budget are kept.
Size2 budget_size(Size2 size, double budget);

RgbImage resize_image(const RgbImage& image, Size2 size);
/// Nearest-neighbour resize for label planes and masks.
Image<std::uint8_t> resize_nearest(const Image<std::uint8_t>& labels, Size2 size);
ProbabilityMap resize_probabilities(const ProbabilityMap& map, Size2 size);

RgbImage resize_to_pixel_budget(const RgbImage& image, double budget);

// --- training samples -------------------------------------------------------

struct Sample {
  RgbImage image;                // (h, w, 3)
  Image<std::uint8_t> target;    // (h, w, n_classes), 0/1
  BinaryMask ignore;             // 1 where the loss skips the pixel
  std::string stem;
};

Sample make_sample(RgbImage image, Image<std::uint8_t> target, std::string stem = {});
Sample resize_sample(const Sample& sample, double budget);

// --- patches ----------------------------------------------------------------

struct PatchSpec {
  int height = 300;
  int width = 300;
  int margin = 75;
};

void validate(const PatchSpec& spec);

struct PatchOrigin {
  int y = 0, x = 0;
  friend auto operator<=>(const PatchOrigin&, const PatchOrigin&) = default;
};

/// Start offsets along one axis: stride size - 2 * margin, last patch flush
/// with the end, a single start when the extent fits in one patch.
std::vector<int> patch_starts(int extent, int size, int margin);
std::vector<PatchOrigin> patch_grid(Size2 image, const PatchSpec& spec);

struct Patch {
  Sample sample;
  PatchOrigin origin;
};

/// Crops every grid patch. Areas beyond the image are zero-filled and ignored.
std::vector<Patch> extract_patches(const Sample& sample, const PatchSpec& spec);

template <typename T>
Image<T> crop_padded(const Image<T>& image, int y0, int x0, int height, int width, T fill = T{}) {
  Image<T> out(height, width, image.channels(), fill);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (image.contains(y0 + y, x0 + x))
        for (int c = 0; c < image.channels(); ++c) out(y, x, c) = image(y0 + y, x0 + x, c);
  return out;
}

struct PredictedPatch {
  ProbabilityMap map;
  PatchOrigin origin;
};

/// Each output pixel takes the value of the patch in which it lies farthest
/// from the patch border (ties: smaller origin). Throws on a coverage gap.
ProbabilityMap stitch_predictions(const std::vector<PredictedPatch>& patches, Size2 full_size);

// --- augmentation -----------------------------------------------------------

struct AugmentParams {
  double rotation_min = -0.2, rotation_max = 0.2;  // radians
  double scale_min = 0.8, scale_max = 1.2;
  bool mirror = true;
  std::uint64_t seed = 0;
};

void validate(const AugmentParams& params);

struct AugmentTransform {
  double rotation = 0.0;
  double scale = 1.0;
  bool mirror = false;

  bool is_identity() const { return rotation == 0.0 && scale == 1.0 && !mirror; }
};

AugmentTransform sample_transform(const AugmentParams& params, std::mt19937_64& rng);

/// Rotates and scales about the image center, then mirrors horizontally,
/// keeping the canvas. Images are bilinear, targets and the ignore mask
/// nearest-neighbour; exposed canvas is marked ignore.
Sample apply_transform(const Sample& sample, const AugmentTransform& t);

/// sample_transform seeded by params.seed, then apply_transform.
Sample augment(const Sample& sample, const AugmentParams& params);

// --- network input ----------------------------------------------------------

inline constexpr float kImageMean[3] = {0.485f, 0.456f, 0.406f};
inline constexpr float kImageStd[3] = {0.229f, 0.224f, 0.225f};

/// Stacks equally sized RGB images into a normalized (n, 3, h, w) tensor.
Tensor to_input_tensor(const std::vector<const RgbImage*>& images);

// --- datasets ---------------------------------------------------------------

struct DatasetEntry {
  std::string stem;
  std::filesystem::path image;
  std::filesystem::path label;
};

/// Pairs images/<stem>.* with labels/<stem>.* (PNG color labels or JSON
/// baselines). Throws when either directory is missing, empty or a stem is
/// unmatched; the message lists the unmatched stems.
std::vector<DatasetEntry> list_dataset(const std::filesystem::path& root);

/// Loads one entry; JSON labels are rendered as baselines into class 1 of a
/// 2-class target.
Sample load_sample(const DatasetEntry& entry, const ClassMap& classmap, double baseline_radius = 5.0);

/// Bounded multi-producer single-consumer queue.
template <typename T>
class PrefetchQueue {
 public:
  explicit PrefetchQueue(std::size_t capacity) : capacity_(capacity ? capacity : 1) {}

  /// Blocks while full. Returns false once the queue is closed.
  bool push(T item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// Blocks while empty; nullopt once closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_full_.notify_all();
    not_empty_.notify_all();
  }

 private:
  std::size_t capacity_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mutex_;
  std::condition_variable not_full_, not_empty_;
};

}  // namespace dhseg
