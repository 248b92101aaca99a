#include "dhseg/pipelines.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "dhseg/image_io.hpp"

namespace dhseg {

using nlohmann::json;

std::string_view to_string(TrackKind kind) {
  switch (kind) {
    case TrackKind::probability: return "probability";
    case TrackKind::mask: return "mask";
    case TrackKind::components: return "components";
    case TrackKind::quads: return "quads";
    case TrackKind::boxes: return "boxes";
    case TrackKind::polylines: return "polylines";
  }
  return "?";
}

namespace {

struct Track {
  TrackResult result;
  Components components;
};

struct RunState {
  const TaskConfig& task;
  const ProbabilityMap& full;
  const PostprocessContext& context;
  std::vector<Track>& tracks;
};

struct ParamDef {
  std::string name;
  bool numeric = true;
  std::optional<OpParam> fallback;  // nullopt = required
};

struct OpDef {
  std::vector<TrackKind> accepts;
  TrackKind produces;
  std::vector<ParamDef> params;
  /// Extra value checks beyond types.
  std::function<void(const PostprocStep&, const TaskConfig&)> check;
  /// Per-track application (null for chain-wide operators).
  std::function<void(Track&, const PostprocStep&, const RunState&)> apply;
  /// Chain-wide application across all tracks.
  std::function<void(const PostprocStep&, const RunState&)> apply_all;
};

PostprocStep with_defaults(const PostprocStep& s, const OpDef& def) {
  PostprocStep out = s;
  for (const auto& p : def.params)
    if (!out.has(p.name) && p.fallback) out.params[p.name] = *p.fallback;
  return out;
}

StructuringElement selem_of(const PostprocStep& s) {
  const std::string& shape = s.text("shape");
  return {shape == "disk" ? SelemShape::disk : SelemShape::square, static_cast<int>(s.number("radius"))};
}

void require(bool ok, const PostprocStep& s, const std::string& what) {
  if (!ok) throw std::invalid_argument("postprocessing op '" + s.op + "': " + what);
}

bool is_integer(double v) { return std::floor(v) == v; }

const Components& components_of(Track& t, int connectivity) {
  if (t.result.kind == TrackKind::mask) {
    t.components = connected_components(t.result.mask, connectivity);
    t.result.kind = TrackKind::components;
  }
  return t.components;
}

void set_mask(Track& t, BinaryMask m) {
  t.result.mask = std::move(m);
  t.result.kind = TrackKind::mask;
}

const std::map<std::string, OpDef>& registry() {
  using K = TrackKind;
  static const std::map<std::string, OpDef> ops = [] {
    std::map<std::string, OpDef> r;
    const ParamDef shape{"shape", false, OpParam{std::string("square")}};
    const ParamDef radius{"radius", true, OpParam{1.0}};
    const ParamDef connectivity{"connectivity", true, OpParam{8.0}};
    auto check_selem = [](const PostprocStep& s, const TaskConfig&) {
      const std::string& sh = s.text("shape");
      require(sh == "square" || sh == "disk", s, "shape must be 'square' or 'disk'");
      require(s.number("radius") >= 1 && is_integer(s.number("radius")), s, "radius must be an integer >= 1");
    };
    auto check_conn = [](const PostprocStep& s, const TaskConfig&) {
      const double c = s.number("connectivity");
      require(c == 4 || c == 8, s, "connectivity must be 4 or 8");
    };

    r["threshold_fixed"] = {{K::probability}, K::mask, {{"t"}},
                            [](const PostprocStep& s, const TaskConfig&) {
                              require(s.number("t") >= 0 && s.number("t") <= 1, s, "t must lie in [0, 1]");
                            },
                            [](Track& t, const PostprocStep& s, const RunState&) {
                              set_mask(t, threshold_fixed(t.result.probability, static_cast<float>(s.number("t"))));
                            },
                            {}};
    r["threshold_otsu"] = {{K::probability}, K::mask, {}, {},
                           [](Track& t, const PostprocStep&, const RunState&) {
                             const auto& p = t.result.probability;
                             // A map without two intensity levels has nothing to separate.
                             const float first = p.values().empty() ? 0.0f : p.values()[0];
                             const bool single_bin = std::all_of(p.values().begin(), p.values().end(),
                                                                 [&](float v) { return otsu_bin(v) == otsu_bin(first); });
                             set_mask(t, single_bin ? BinaryMask(p.height(), p.width()) : threshold_otsu(p).mask);
                           },
                           {}};
    r["gaussian_filter"] = {{K::probability}, K::probability, {{"sigma"}},
                            [](const PostprocStep& s, const TaskConfig&) { require(s.number("sigma") > 0, s, "sigma must be positive"); },
                            [](Track& t, const PostprocStep& s, const RunState&) {
                              t.result.probability = gaussian_filter(t.result.probability, s.number("sigma"));
                            },
                            {}};
    r["hysteresis_threshold"] = {{K::probability}, K::mask, {{"p_low"}, {"p_high"}},
                                 [](const PostprocStep& s, const TaskConfig&) {
                                   const double lo = s.number("p_low"), hi = s.number("p_high");
                                   require(0 <= lo && lo <= hi && hi <= 1, s, "need 0 <= p_low <= p_high <= 1");
                                 },
                                 [](Track& t, const PostprocStep& s, const RunState&) {
                                   set_mask(t, hysteresis_threshold(t.result.probability, static_cast<float>(s.number("p_low")),
                                                                    static_cast<float>(s.number("p_high"))));
                                 },
                                 {}};
    r["argmax_mask"] = {{K::probability}, K::mask, {}, {},
                        [](Track& t, const PostprocStep&, const RunState& st) {
                          const auto& f = st.full;
                          BinaryMask m(f.height(), f.width());
                          for (int y = 0; y < f.height(); ++y)
                            for (int x = 0; x < f.width(); ++x) {
                              int best = 0;
                              for (int c = 1; c < f.channels(); ++c)
                                if (f(y, x, c) > f(y, x, best)) best = c;
                              m(y, x) = best == t.result.class_index;
                            }
                          set_mask(t, std::move(m));
                        },
                        {}};
    const std::pair<const char*, MorphOp> morphs[] = {
        {"erode", MorphOp::erode}, {"dilate", MorphOp::dilate}, {"open", MorphOp::open}, {"close", MorphOp::close}};
    for (const auto& [name, op] : morphs) {
      const MorphOp mop = op;
      r[name] = {{K::mask}, K::mask, {shape, radius}, check_selem,
                 [mop](Track& t, const PostprocStep& s, const RunState&) { set_mask(t, morph(t.result.mask, mop, selem_of(s))); },
                 {}};
    }
    r["connected_components"] = {{K::mask}, K::components, {connectivity}, check_conn,
                                 [](Track& t, const PostprocStep& s, const RunState&) {
                                   components_of(t, static_cast<int>(s.number("connectivity")));
                                 },
                                 {}};
    r["filter_small_components"] = {{K::mask, K::components}, K::mask, {{"min_size"}, connectivity},
                                    [check_conn](const PostprocStep& s, const TaskConfig& task) {
                                      check_conn(s, task);
                                      require(s.number("min_size") >= 0, s, "min_size must be non-negative");
                                    },
                                    [](Track& t, const PostprocStep& s, const RunState&) {
                                      const auto& c = components_of(t, static_cast<int>(s.number("connectivity")));
                                      set_mask(t, filter_small_components(c, static_cast<long long>(std::ceil(s.number("min_size")))));
                                    },
                                    {}};
    r["largest_component"] = {{K::mask, K::components}, K::mask, {connectivity}, check_conn,
                              [](Track& t, const PostprocStep& s, const RunState&) {
                                set_mask(t, largest_component(components_of(t, static_cast<int>(s.number("connectivity")))));
                              },
                              {}};
    r["extract_extreme_quad"] = {{K::mask}, K::quads, {}, {},
                                 [](Track& t, const PostprocStep&, const RunState&) {
                                   t.result.quads.clear();
                                   // Empty or degenerate masks yield no quad.
                                   if (count_foreground(t.result.mask) > 0) {
                                     try {
                                       t.result.quads.push_back(extract_extreme_quad(t.result.mask));
                                     } catch (const std::invalid_argument&) {
                                     }
                                   }
                                   t.result.kind = TrackKind::quads;
                                 },
                                 {}};
    r["min_enclosing_box"] = {{K::mask, K::components}, K::boxes, {}, {},
                              [](Track& t, const PostprocStep&, const RunState&) {
                                t.result.boxes.clear();
                                if (t.result.kind == TrackKind::mask) {
                                  const auto px = foreground_pixels(t.result.mask);
                                  if (!px.empty()) t.result.boxes.push_back(min_enclosing_box(px));
                                } else {
                                  for (const auto& info : t.components.table) t.result.boxes.push_back(info.bbox);
                                }
                                t.result.kind = TrackKind::boxes;
                              },
                              {}};
    r["vectorize_polyline"] = {{K::components}, K::polylines, {{"epsilon", true, OpParam{2.0}}},
                               [](const PostprocStep& s, const TaskConfig&) {
                                 require(s.number("epsilon") >= 0, s, "epsilon must be non-negative");
                               },
                               [](Track& t, const PostprocStep& s, const RunState&) {
                                 t.result.polylines.clear();
                                 for (const auto& info : t.components.table) {
                                   const auto px = component_pixels(t.components.labels, info.label);
                                   // Components spanning a single column cannot form a line.
                                   if (centroid_path(px).size() < 2) continue;
                                   t.result.polylines.push_back(vectorize_polyline(px, s.number("epsilon")));
                                 }
                                 t.result.kind = TrackKind::polylines;
                               },
                               {}};
    r["filter_small_boxes"] = {{K::boxes}, K::boxes, {{"min_area_fraction", true, OpParam{0.005}}},
                               [](const PostprocStep& s, const TaskConfig&) {
                                 require(s.number("min_area_fraction") >= 0, s, "min_area_fraction must be non-negative");
                               },
                               [](Track& t, const PostprocStep& s, const RunState& st) {
                                 t.result.boxes = filter_small_boxes(t.result.boxes, st.full.size2(), s.number("min_area_fraction"));
                               },
                               {}};
    r["enforce_enclosure"] = {{K::boxes}, K::boxes, {{"inner", false, {}}, {"outer", false, {}}},
                              [](const PostprocStep& s, const TaskConfig& task) {
                                for (const char* key : {"inner", "outer"}) {
                                  const int k = task.classmap.index_of(s.text(key));
                                  require(k >= 0, s, std::string(key) + " names an unknown class");
                                  require(std::find(task.postprocess_classes.begin(), task.postprocess_classes.end(), k) !=
                                              task.postprocess_classes.end(),
                                          s, std::string(key) + " class is not processed by the chain");
                                }
                                require(s.text("inner") != s.text("outer"), s, "inner and outer must differ");
                              },
                              {},
                              [](const PostprocStep& s, const RunState& st) {
                                const int ki = st.task.classmap.index_of(s.text("inner"));
                                const int ko = st.task.classmap.index_of(s.text("outer"));
                                Track* inner = nullptr;
                                const Track* outer = nullptr;
                                for (auto& t : st.tracks) {
                                  if (t.result.class_index == ki) inner = &t;
                                  if (t.result.class_index == ko) outer = &t;
                                }
                                if (!inner || !outer || outer->result.boxes.empty()) return;
                                const AxisAlignedBox& container = outer->result.boxes.front();
                                std::vector<AxisAlignedBox> kept;
                                for (const auto& b : inner->result.boxes) {
                                  // Boxes entirely outside the container are dropped.
                                  try {
                                    kept.push_back(enforce_enclosure(b, container));
                                  } catch (const std::invalid_argument&) {
                                  }
                                }
                                inner->result.boxes = std::move(kept);
                              }};
    r["intersect_page_mask"] = {{K::mask}, K::mask, {}, {},
                                [](Track& t, const PostprocStep&, const RunState& st) {
                                  if (!st.context.page_mask) return;
                                  set_mask(t, mask_and(t.result.mask, *st.context.page_mask));
                                },
                                {}};
    return r;
  }();
  return ops;
}

const OpDef& lookup(const std::string& name) {
  const auto& r = registry();
  auto it = r.find(name);
  if (it == r.end()) {
    std::string known;
    for (const auto& [k, v] : r) known += " " + k;
    throw std::invalid_argument("unknown postprocessing op '" + name + "'; available:" + known);
  }
  return it->second;
}

}  // namespace

std::vector<std::string> operator_names() {
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

void check_chain(const TaskConfig& task) {
  TrackKind kind = TrackKind::probability;
  for (const auto& raw : task.postprocessing) {
    const OpDef& def = lookup(raw.op);
    if (std::find(def.accepts.begin(), def.accepts.end(), kind) == def.accepts.end()) {
      throw std::invalid_argument("postprocessing op '" + raw.op + "' cannot consume " + std::string(to_string(kind)));
    }
    for (const auto& [k, v] : raw.params) {
      auto it = std::find_if(def.params.begin(), def.params.end(), [&](const ParamDef& p) { return p.name == k; });
      if (it == def.params.end()) throw std::invalid_argument("postprocessing op '" + raw.op + "': unknown parameter '" + k + "'");
      if (it->numeric != std::holds_alternative<double>(v)) {
        throw std::invalid_argument("postprocessing op '" + raw.op + "': parameter '" + k + "' must be a " +
                                    (it->numeric ? "number" : "string"));
      }
    }
    const PostprocStep s = with_defaults(raw, def);
    for (const auto& p : def.params)
      if (!s.has(p.name)) throw std::invalid_argument("postprocessing op '" + raw.op + "': missing parameter '" + p.name + "'");
    if (def.check) def.check(s, task);
    kind = def.produces;
  }
}

std::vector<TrackResult> run_postprocess(const TaskConfig& task, const ProbabilityMap& probs, const PostprocessContext& ctx) {
  check_chain(task);
  if (probs.channels() != task.n_classes()) {
    throw std::invalid_argument("run_postprocess: probability map has " + std::to_string(probs.channels()) +
                                " channels, task has " + std::to_string(task.n_classes()) + " classes");
  }
  if (ctx.page_mask && ctx.page_mask->size2() != probs.size2()) throw std::invalid_argument("run_postprocess: page mask size differs");
  std::vector<Track> tracks;
  for (int k : task.postprocess_classes) {
    Track t;
    t.result.class_index = k;
    t.result.class_name = task.classmap.classes[static_cast<size_t>(k)].name;
    t.result.probability = channel_of(probs, k);
    tracks.push_back(std::move(t));
  }
  const RunState state{task, probs, ctx, tracks};
  for (const auto& raw : task.postprocessing) {
    const OpDef& def = lookup(raw.op);
    const PostprocStep s = with_defaults(raw, def);
    if (def.apply) {
      for (auto& t : tracks) def.apply(t, s, state);
    } else {
      def.apply_all(s, state);
    }
    for (auto& t : tracks) {
      // Geometry operators keep the mask they started from; components keep theirs too.
      t.result.kind = def.produces;
    }
  }
  std::vector<TrackResult> out;
  for (auto& t : tracks) {
    if (t.result.kind == TrackKind::components) t.result.mask = filter_small_components(t.components, 0);
    out.push_back(std::move(t.result));
  }
  return out;
}

BinaryMask track_mask(const TrackResult& t, Size2 size) {
  switch (t.kind) {
    case TrackKind::quads: {
      BinaryMask m(size.height, size.width);
      for (const auto& q : t.quads) {
        const BinaryMask r = rasterize_polygon(to_polygon(q), size);
        for (size_t i = 0; i < m.values().size(); ++i) m.values()[i] |= r.values()[i];
      }
      return m;
    }
    case TrackKind::boxes: {
      BinaryMask m(size.height, size.width);
      for (const auto& b : t.boxes) {
        const BinaryMask r = rasterize_box(b, size);
        for (size_t i = 0; i < m.values().size(); ++i) m.values()[i] |= r.values()[i];
      }
      return m;
    }
    case TrackKind::probability: {
      const BinaryMask m = threshold_fixed(t.probability, 0.5f);
      return m.size2() == size ? m : resize_nearest(m, size);
    }
    default:
      if (t.mask.empty()) return BinaryMask(size.height, size.width);
      return t.mask.size2() == size ? t.mask : resize_nearest(t.mask, size);
  }
}

TrackResult rescale_geometry(const TrackResult& t, Size2 from, Size2 to) {
  TrackResult out = t;
  if (from == to) return out;
  const double sx = static_cast<double>(to.width) / from.width;
  const double sy = static_cast<double>(to.height) / from.height;
  auto point = [&](Point2 p) { return Point2{(p.x + 0.5) * sx - 0.5, (p.y + 0.5) * sy - 0.5}; };
  for (auto& q : out.quads)
    for (auto& c : q.corners) c = point(c);
  for (auto& pl : out.polylines)
    for (auto& v : pl.vertices) v = point(v);
  for (auto& b : out.boxes) {
    AxisAlignedBox s{static_cast<int>(std::lround(b.x_min * sx)), static_cast<int>(std::lround(b.y_min * sy)),
                     static_cast<int>(std::lround(b.x_max * sx)), static_cast<int>(std::lround(b.y_max * sy))};
    s.x_max = std::max(s.x_max, s.x_min + 1);
    s.y_max = std::max(s.y_max, s.y_min + 1);
    b = s;
  }
  if (!out.mask.empty()) out.mask = resize_nearest(out.mask, to);
  out.probability = ProbabilityMap();
  return out;
}

namespace {

json point_json(Point2 p) {
  auto r = [](double v) { return std::round(v * 1000.0) / 1000.0; };
  return json::array({r(p.x), r(p.y)});
}

}  // namespace

std::string geometry_json(const std::string& task, const std::string& image, Size2 size,
                          const std::vector<TrackResult>& tracks) {
  json j;
  j["task"] = task;
  j["image"] = image;
  j["width"] = size.width;
  j["height"] = size.height;
  j["classes"] = json::array();
  for (const auto& t : tracks) {
    json c;
    c["class"] = t.class_name;
    c["index"] = t.class_index;
    c["quads"] = json::array();
    for (const auto& q : t.quads) {
      json qj = json::array();
      for (const auto& p : q.corners) qj.push_back(point_json(p));
      c["quads"].push_back(qj);
    }
    c["boxes"] = json::array();
    for (const auto& b : t.boxes) c["boxes"].push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    c["polylines"] = json::array();
    for (const auto& pl : t.polylines) {
      json pj = json::array();
      for (const auto& p : pl.vertices) pj.push_back(point_json(p));
      c["polylines"].push_back(pj);
    }
    j["classes"].push_back(c);
  }
  return j.dump(2);
}

NetworkGraph task_graph(const TaskConfig& task) {
  ArchConfig a;
  a.n_classes = task.n_classes();
  return build_graph(a);
}

ProbabilityMap predict_probabilities(const TaskConfig& task, const NetworkGraph& graph, const WeightStore& weights,
                                     const RgbImage& image) {
  const OutputActivation act = activation_for(task.train.loss_mode);
  if (!task.patches) {
    const Tensor probs = forward(graph, weights, to_input_tensor({&image}), act);
    return to_probability_maps(probs).front();
  }
  const PatchSpec& spec = *task.patches;
  std::vector<PredictedPatch> parts;
  for (const auto& o : patch_grid(image.size2(), spec)) {
    const RgbImage crop = crop_padded(image, o.y, o.x, spec.height, spec.width);
    const Tensor probs = forward(graph, weights, to_input_tensor({&crop}), act);
    parts.push_back({to_probability_maps(probs).front(), o});
  }
  return stitch_predictions(parts, image.size2());
}

ImagePrediction predict_image(const TaskConfig& task, const NetworkGraph& graph, const WeightStore& weights,
                              const RgbImage& image, const std::string& stem,
                              const std::function<BinaryMask(const RgbImage&)>& page_mask_fn) {
  ImagePrediction out;
  out.stem = stem;
  out.original_size = image.size2();
  const RgbImage processed = task.resize_budget > 0 ? resize_to_pixel_budget(image, task.resize_budget) : image;
  out.processed_size = processed.size2();
  const ProbabilityMap probs = predict_probabilities(task, graph, weights, processed);
  std::optional<BinaryMask> page;
  PostprocessContext ctx;
  if (page_mask_fn) {
    page = page_mask_fn(image);
    if (page->size2() != processed.size2()) page = resize_nearest(*page, processed.size2());
    ctx.page_mask = &*page;
  }
  for (const auto& t : run_postprocess(task, probs, ctx))
    out.tracks.push_back(rescale_geometry(t, out.processed_size, out.original_size));
  return out;
}

std::vector<std::filesystem::path> collect_images(const std::vector<std::filesystem::path>& inputs) {
  static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp"};
  std::vector<std::filesystem::path> out;
  for (const auto& in : inputs) {
    if (std::filesystem::is_directory(in)) {
      std::vector<std::filesystem::path> found;
      for (const auto& e : std::filesystem::directory_iterator(in)) {
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        if (e.is_regular_file() && exts.count(ext)) found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      out.insert(out.end(), found.begin(), found.end());
    } else {
      out.push_back(in);
    }
  }
  return out;
}

std::vector<ImagePrediction> run_predict(const TaskConfig& task, const WeightStore& weights,
                                         const std::vector<std::filesystem::path>& images, const PredictOptions& options) {
  validate(task);
  const NetworkGraph graph = task_graph(task);
  check_weights(graph, weights);

  std::function<BinaryMask(const RgbImage&)> page_fn;
  std::optional<TaskConfig> page_task;
  std::optional<NetworkGraph> page_graph;
  std::optional<WeightStore> page_weights;
  const bool wants_page = std::any_of(task.postprocessing.begin(), task.postprocessing.end(),
                                      [](const PostprocStep& s) { return s.op == "intersect_page_mask"; });
  if (wants_page && options.page_weights) {
    page_task = builtin_task("page");
    page_graph = task_graph(*page_task);
    page_weights = load_weights(*options.page_weights);
    check_weights(*page_graph, *page_weights);
    page_fn = [&](const RgbImage& img) {
      const ImagePrediction p = predict_image(*page_task, *page_graph, *page_weights, img, "page");
      return track_mask(p.tracks.front(), img.size2());
    };
  }

  std::filesystem::create_directories(options.output_dir);
  std::vector<ImagePrediction> results(images.size());
  std::atomic<size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (;;) {
      const size_t i = next++;
      if (i >= images.size()) return;
      {
        std::lock_guard lock(error_mutex);
        if (error) return;
      }
      try {
        const RgbImage img = read_rgb(images[i]);
        const std::string stem = images[i].stem().string();
        ImagePrediction p = predict_image(task, graph, weights, img, stem, page_fn);
        for (const auto& t : p.tracks) write_mask(options.output_dir / (stem + "." + t.class_name + ".png"), track_mask(t, p.original_size));
        std::ofstream(options.output_dir / (stem + ".json")) << geometry_json(task.name, stem, p.original_size, p.tracks) << '\n';
        results[i] = std::move(p);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(std::max<size_t>(1, images.size()))));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return results;
}

namespace {

void write_sidecar(const std::filesystem::path& path, long long step, int epoch, const std::string& hash) {
  json j{{"step", step}, {"epoch", epoch}, {"config_hash", hash}};
  std::ofstream(path) << j.dump(2) << '\n';
}

}  // namespace

TrainRunResult run_train(const TaskConfig& task, const TrainRunOptions& options) {
  validate(task);
  const auto entries = list_dataset(options.dataset_dir);
  std::vector<Sample> samples;
  for (const auto& e : entries) samples.push_back(load_sample(e, task.classmap, task.baseline_radius));

  TrainConfig cfg = task.train;
  cfg.resize_budget = task.resize_budget;
  cfg.patches = task.patches;
  if (options.seed) cfg.seed = *options.seed;
  validate(cfg);

  const NetworkGraph graph = task_graph(task);
  WeightStore weights = init_weights(graph, cfg.seed);
  if (options.init_weights) {
    const WeightStore src = load_weights(*options.init_weights);
    bool complete = true;
    for (const auto& s : parameter_slots(graph)) complete = complete && src.contains(s.name);
    if (complete) {
      check_weights(graph, src);
      weights = src;
    } else if (import_encoder(graph, src, weights) == 0) {
      throw std::invalid_argument("initial weights contain no tensor of this network: " + options.init_weights->string());
    }
  }

  std::filesystem::create_directories(options.output_dir);
  TrainRunResult result;
  result.log_path = options.output_dir / "train_log.csv";
  std::ofstream log(result.log_path);
  log << "step,lr,loss\n";
  log << std::setprecision(10);
  const std::string hash = config_hash(task);
  std::filesystem::path previous;

  FitCallbacks cb;
  cb.on_step = [&](const StepInfo& s) {
    log << s.step << ',' << s.lr << ',' << s.loss << '\n';
    if (options.on_step) options.on_step(s);
  };
  cb.on_epoch = [&](int epoch, long long step, const WeightStore& w) {
    std::ostringstream name;
    name << "epoch_" << std::setw(3) << std::setfill('0') << epoch + 1;
    const auto path = options.output_dir / (name.str() + ".dhsw");
    save_weights(w, path);
    write_sidecar(options.output_dir / (name.str() + ".json"), step, epoch + 1, hash);
    // Only the newest epoch checkpoint is kept.
    if (!previous.empty()) {
      std::filesystem::remove(previous);
      std::filesystem::remove(std::filesystem::path(previous).replace_extension(".json"));
    }
    previous = path;
  };
  result.fit = fit(graph, weights, samples, cfg, cb);
  result.final_checkpoint = options.output_dir / "final.dhsw";
  save_weights(weights, result.final_checkpoint);
  write_sidecar(options.output_dir / "final.json", result.fit.steps, cfg.epochs, hash);
  return result;
}

namespace {

std::map<std::string, std::filesystem::path> files_by_stem(const std::filesystem::path& dir, const std::set<std::string>& exts) {
  std::map<std::string, std::filesystem::path> out;
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto& p = e.path();
    if (!exts.count(p.extension().string())) continue;
    // Mask files "<stem>.<class>.png" are read per class, not listed here.
    if (p.stem().has_extension()) continue;
    out[p.stem().string()] = p;
  }
  return out;
}

std::vector<AxisAlignedBox> boxes_from_json(const std::filesystem::path& path, const std::string& cls) {
  std::ifstream in(path);
  json j;
  in >> j;
  std::vector<AxisAlignedBox> out;
  for (const auto& c : j.at("classes")) {
    if (c.at("class").get<std::string>() != cls) continue;
    for (const auto& b : c.at("boxes")) out.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
  }
  return out;
}

Image<std::uint8_t> truth_planes(const TaskConfig& task, const std::filesystem::path& gt, Size2 expected_size) {
  if (gt.extension() == ".json") {
    const BinaryMask lines = render_baselines(read_baselines_json(gt), expected_size, task.baseline_radius);
    Image<std::uint8_t> planes(expected_size.height, expected_size.width, task.n_classes());
    for (int y = 0; y < expected_size.height; ++y)
      for (int x = 0; x < expected_size.width; ++x) {
        planes(y, x, 0) = !lines(y, x);
        if (task.n_classes() > 1) planes(y, x, 1) = lines(y, x);
      }
    return planes;
  }
  return encode_mask(read_rgb(gt), task.classmap);
}

}  // namespace

MetricsReport run_evaluate(const TaskConfig& task, const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir) {
  validate(task);
  const auto preds = files_by_stem(pred_dir, {".json"});
  const auto truths = files_by_stem(gt_dir, {".png", ".json"});
  std::vector<std::string> unmatched;
  for (const auto& [s, p] : preds)
    if (!truths.count(s)) unmatched.push_back("prediction " + s);
  for (const auto& [s, p] : truths)
    if (!preds.count(s)) unmatched.push_back("ground truth " + s);
  if (!unmatched.empty()) {
    std::string msg = "evaluate: unmatched files:";
    for (const auto& u : unmatched) msg += " " + u + ";";
    throw std::runtime_error(msg);
  }
  if (preds.empty()) throw std::runtime_error("evaluate: no predictions in " + pred_dir.string());

  MetricsReport report;
  report.task = task.name;
  const bool detection = task.name == "ornament";
  report.aggregation = detection ? "box P/R/F pooled over images; mIoU per class, then over images"
                                 : "IoU per class, averaged over classes, then over images";
  std::map<std::string, std::vector<double>> class_ious;
  std::vector<double> image_mious;
  const double thresholds[] = {0.7, 0.8, 0.9};
  std::map<double, std::array<long long, 3>> pooled;  // matched, predictions, truths

  for (const auto& [stem, pred_json] : preds) {
    const auto& gt_path = truths.at(stem);
    std::ifstream in(pred_json);
    json pj;
    in >> pj;
    const Size2 size{pj.at("height").get<int>(), pj.at("width").get<int>()};
    const Image<std::uint8_t> planes = truth_planes(task, gt_path, size);
    if (planes.size2() != size) throw std::runtime_error("evaluate: ground truth size differs for " + stem);
    std::vector<double> ious;
    for (int k : task.postprocess_classes) {
      const std::string& name = task.classmap.classes[static_cast<size_t>(k)].name;
      const auto mask_path = pred_dir / (stem + "." + name + ".png");
      if (!std::filesystem::exists(mask_path)) throw std::runtime_error("evaluate: missing mask " + mask_path.string());
      const BinaryMask pred = read_mask(mask_path);
      const BinaryMask truth = channel_of(planes, k);
      const double iou = mask_iou(pred, truth);
      report.per_image[stem][name] = iou;
      class_ious[name].push_back(iou);
      ious.push_back(iou);
      if (detection) {
        std::vector<AxisAlignedBox> gt_boxes;
        const Components comps = connected_components(truth, 8);
        for (const auto& info : comps.table) gt_boxes.push_back(info.bbox);
        const auto pred_boxes = boxes_from_json(pred_json, name);
        for (double th : thresholds) {
          const DetectionScore s = detection_prf(pred_boxes, gt_boxes, th);
          auto& acc = pooled[th];
          acc[0] += static_cast<long long>(s.match.pairs.size());
          acc[1] += static_cast<long long>(pred_boxes.size());
          acc[2] += static_cast<long long>(gt_boxes.size());
        }
      }
    }
    const double m = mean_iou(ious);
    report.per_image[stem]["miou"] = m;
    image_mious.push_back(m);
  }
  for (const auto& [name, v] : class_ious) report.per_class[name]["iou"] = mean_iou(v);
  report.aggregate["miou"] = mean_iou(image_mious);
  for (const auto& [th, acc] : pooled) {
    DetectionMatch dummy;
    dummy.pairs.resize(static_cast<size_t>(acc[0]));
    const DetectionScore s = score_matches(std::move(dummy), static_cast<size_t>(acc[1]), static_cast<size_t>(acc[2]));
    std::ostringstream suffix;
    suffix << '@' << th;
    report.aggregate["precision" + suffix.str()] = s.precision;
    report.aggregate["recall" + suffix.str()] = s.recall;
    report.aggregate["f_measure" + suffix.str()] = s.f_measure;
  }
  return report;
}

}  // namespace dhseg
