#pragma once

// IoU-family metrics and the report container written by the evaluate command.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dhseg/geometry.hpp"
#include "dhseg/image.hpp"

namespace dhseg {

/// |a & b| / |a | b|; 1 when both are empty. Throws on a size mismatch.
double mask_iou(const BinaryMask& a, const BinaryMask& b);

double box_iou(const AxisAlignedBox& a, const AxisAlignedBox& b);

/// IoU of two convex quadrilaterals (polygon intersection).
double quad_iou(const Quad& a, const Quad& b);

/// Arithmetic mean; throws on an empty list.
double mean_iou(const std::vector<double>& values);

/// Per-class IoU between two class-index maps (classes absent from both
/// count as 1).
std::vector<double> per_class_iou(const LabelMap& prediction, const LabelMap& truth, int n_classes);

struct MatchPair {
  int prediction = 0;
  int truth = 0;
  double iou = 0.0;
};

struct DetectionMatch {
  std::vector<MatchPair> pairs;
  std::vector<int> unmatched_predictions;
  std::vector<int> unmatched_truths;
};

struct DetectionScore {
  double precision = 0.0;
  double recall = 0.0;
  double f_measure = 0.0;
  DetectionMatch match;
};

/// Greedy one-to-one matching in descending IoU order over pairs with
/// IoU >= threshold. `iou` is predictions x n_truths. Ties break on
/// (prediction, truth) index.
DetectionMatch greedy_match(const std::vector<std::vector<double>>& iou, std::size_t n_truths, double threshold);

/// P = matched / |pred| (0 when there are none), R = matched / |truth|
/// (0 when there are none), F = harmonic mean or 0.
DetectionScore score_matches(DetectionMatch match, std::size_t n_predictions, std::size_t n_truths);

DetectionScore detection_prf(const std::vector<AxisAlignedBox>& predictions, const std::vector<AxisAlignedBox>& truth,
                             double iou_threshold);
DetectionScore detection_prf(const std::vector<Quad>& predictions, const std::vector<Quad>& truth,
                             double iou_threshold);

/// Metrics report: named values per image, per class and in aggregate.
struct MetricsReport {
  std::string task;
  std::map<std::string, std::map<std::string, double>> per_image;
  std::map<std::string, std::map<std::string, double>> per_class;
  std::map<std::string, double> aggregate;
  std::string aggregation;

  std::string to_json() const;
  /// One row per aggregate metric: metric,value
  std::string to_csv() const;
  void write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const;
};

}  // namespace dhseg
