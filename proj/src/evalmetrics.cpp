#include "dhseg/evalmetrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace dhseg {

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.size2() != b.size2() || a.channels() != b.channels()) throw std::invalid_argument("mask_iou: mask sizes differ");
  long long inter = 0, uni = 0;
  auto va = a.values(), vb = b.values();
  for (size_t i = 0; i < va.size(); ++i) {
    const bool x = va[i] != 0, y = vb[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double box_iou(const AxisAlignedBox& a, const AxisAlignedBox& b) {
  const long long iw = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const long long ih = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const long long inter = iw * ih;
  const long long uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double quad_iou(const Quad& a, const Quad& b) {
  const auto pa = to_polygon(a), pb = to_polygon(b);
  const double inter = polygon_area(convex_intersection(pa, pb));
  const double uni = polygon_area(pa) + polygon_area(pb) - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

double mean_iou(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("mean_iou: empty list");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

std::vector<double> per_class_iou(const LabelMap& prediction, const LabelMap& truth, int n_classes) {
  if (prediction.size2() != truth.size2()) throw std::invalid_argument("per_class_iou: size mismatch");
  std::vector<long long> inter(static_cast<size_t>(n_classes)), uni(static_cast<size_t>(n_classes));
  auto p = prediction.values(), t = truth.values();
  for (size_t i = 0; i < p.size(); ++i) {
    if (t[i] < 0) continue;
    for (int k = 0; k < n_classes; ++k) {
      const bool a = p[i] == k, b = t[i] == k;
      inter[static_cast<size_t>(k)] += a && b;
      uni[static_cast<size_t>(k)] += a || b;
    }
  }
  std::vector<double> out(static_cast<size_t>(n_classes));
  for (size_t k = 0; k < out.size(); ++k) out[k] = uni[k] ? static_cast<double>(inter[k]) / uni[k] : 1.0;
  return out;
}

DetectionMatch greedy_match(const std::vector<std::vector<double>>& iou, std::size_t nt, double threshold) {
  if (!(threshold > 0 && threshold <= 1)) throw std::invalid_argument("detection IoU threshold must be in (0, 1]");
  const size_t np = iou.size();
  for (const auto& row : iou)
    if (row.size() != nt) throw std::invalid_argument("greedy_match: IoU row length differs from the truth count");
  std::vector<MatchPair> candidates;
  for (size_t i = 0; i < np; ++i)
    for (size_t j = 0; j < nt; ++j)
      if (iou[i][j] >= threshold) candidates.push_back({static_cast<int>(i), static_cast<int>(j), iou[i][j]});
  std::stable_sort(candidates.begin(), candidates.end(), [](const MatchPair& a, const MatchPair& b) { return a.iou > b.iou; });
  std::vector<char> used_p(np), used_t(nt);
  DetectionMatch m;
  for (const auto& c : candidates) {
    if (used_p[static_cast<size_t>(c.prediction)] || used_t[static_cast<size_t>(c.truth)]) continue;
    used_p[static_cast<size_t>(c.prediction)] = used_t[static_cast<size_t>(c.truth)] = 1;
    m.pairs.push_back(c);
  }
  for (size_t i = 0; i < np; ++i)
    if (!used_p[i]) m.unmatched_predictions.push_back(static_cast<int>(i));
  for (size_t j = 0; j < nt; ++j)
    if (!used_t[j]) m.unmatched_truths.push_back(static_cast<int>(j));
  return m;
}

DetectionScore score_matches(DetectionMatch match, std::size_t np, std::size_t nt) {
  DetectionScore s;
  const double matched = static_cast<double>(match.pairs.size());
  s.precision = np ? matched / static_cast<double>(np) : 0.0;
  s.recall = nt ? matched / static_cast<double>(nt) : 0.0;
  s.f_measure = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  s.match = std::move(match);
  return s;
}

namespace {

template <typename Shape, typename IouFn>
DetectionScore prf(const std::vector<Shape>& pred, const std::vector<Shape>& truth, double threshold, IouFn fn) {
  std::vector<std::vector<double>> iou(pred.size(), std::vector<double>(truth.size()));
  for (size_t i = 0; i < pred.size(); ++i)
    for (size_t j = 0; j < truth.size(); ++j) iou[i][j] = fn(pred[i], truth[j]);
  return score_matches(greedy_match(iou, truth.size(), threshold), pred.size(), truth.size());
}

}  // namespace

DetectionScore detection_prf(const std::vector<AxisAlignedBox>& p, const std::vector<AxisAlignedBox>& t, double th) {
  return prf(p, t, th, box_iou);
}

DetectionScore detection_prf(const std::vector<Quad>& p, const std::vector<Quad>& t, double th) {
  return prf(p, t, th, quad_iou);
}

std::string MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["aggregation"] = aggregation;
  j["per_image"] = nlohmann::json::object();
  for (const auto& [k, v] : per_image) j["per_image"][k] = v;
  j["per_class"] = nlohmann::json::object();
  for (const auto& [k, v] : per_class) j["per_class"][k] = v;
  j["aggregate"] = aggregate;
  return j.dump(2);
}

std::string MetricsReport::to_csv() const {
  std::ostringstream os;
  os << "metric,value\n";
  os.precision(10);
  for (const auto& [k, v] : aggregate) os << k << ',' << v << '\n';
  return os.str();
}

void MetricsReport::write(const std::filesystem::path& json_path, const std::filesystem::path& csv_path) const {
  for (const auto& p : {json_path, csv_path})
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream(json_path) << to_json() << '\n';
  std::ofstream(csv_path) << to_csv();
}

}  // namespace dhseg
