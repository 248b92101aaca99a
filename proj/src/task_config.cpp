#include "dhseg/task_config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "dhseg/pipelines.hpp"

namespace dhseg {

using nlohmann::json;

double PostprocStep::number(const std::string& key) const {
  auto it = params.find(key);
  if (it == params.end()) throw std::invalid_argument(op + ": missing parameter '" + key + "'");
  if (const double* d = std::get_if<double>(&it->second)) return *d;
  throw std::invalid_argument(op + ": parameter '" + key + "' must be a number");
}

const std::string& PostprocStep::text(const std::string& key) const {
  auto it = params.find(key);
  if (it == params.end()) throw std::invalid_argument(op + ": missing parameter '" + key + "'");
  if (const std::string* s = std::get_if<std::string>(&it->second)) return *s;
  throw std::invalid_argument(op + ": parameter '" + key + "' must be a string");
}

namespace {

PostprocStep step(std::string op, std::map<std::string, OpParam> params = {}) { return {std::move(op), std::move(params)}; }

ClassMap two_class(const std::string& fg, Rgb color) {
  ClassMap cm;
  cm.classes = {{"background", {0, 0, 0}}, {fg, color}};
  return cm;
}

}  // namespace

TaskConfig builtin_task(const std::string& name) {
  TaskConfig t;
  t.name = name;
  t.train.epochs = 30;
  t.train.batch_size = 1;
  if (name == "page") {
    t.classmap = two_class("page", {255, 0, 0});
    t.resize_budget = 6e5;
    t.postprocess_classes = {1};
    t.postprocessing = {step("threshold_otsu"), step("open", {{"shape", "square"}, {"radius", 1.0}}),
                        step("close", {{"shape", "square"}, {"radius", 1.0}}), step("extract_extreme_quad")};
  } else if (name == "baseline") {
    t.classmap = two_class("baseline", {0, 255, 0});
    t.resize_budget = 1e6;
    t.patches = PatchSpec{};
    t.postprocess_classes = {1};
    t.postprocessing = {step("gaussian_filter", {{"sigma", 1.5}}),
                        step("hysteresis_threshold", {{"p_low", 0.2}, {"p_high", 0.4}}),
                        step("connected_components", {{"connectivity", 8.0}}),
                        step("vectorize_polyline", {{"epsilon", 2.0}})};
  } else if (name == "layout") {
    t.classmap.multilabel = true;
    t.classmap.classes = {{"background", {0, 0, 1}}, {"comment", {0, 0, 2}}, {"decoration", {0, 0, 4}}, {"text", {0, 0, 8}}};
    t.classmap.composites = {{{0, 0, 6}, {1, 2}}, {{0, 0, 10}, {1, 3}}, {{0, 0, 12}, {2, 3}}, {{0, 0, 14}, {1, 2, 3}}};
    t.train.loss_mode = LossMode::sigmoid_bce;
    t.resize_budget = 0.0;
    t.patches = PatchSpec{400, 400, 100};
    t.train.batch_size = 8;
    t.patch_variants = {{PatchSpec{600, 600, 150}, 4}};
    t.postprocess_classes = {1, 2, 3};
    t.postprocessing = {step("threshold_fixed", {{"t", 0.5}}),
                        step("filter_small_components", {{"min_size", 50.0}, {"connectivity", 8.0}}),
                        step("intersect_page_mask")};
  } else if (name == "ornament") {
    t.classmap = two_class("ornament", {0, 0, 255});
    t.resize_budget = 8e5;
    t.patches = PatchSpec{};
    t.train.batch_size = 16;
    t.postprocess_classes = {1};
    t.postprocessing = {step("threshold_fixed", {{"t", 0.6}}), step("open", {{"shape", "square"}, {"radius", 1.0}}),
                        step("close", {{"shape", "square"}, {"radius", 1.0}}),
                        step("connected_components", {{"connectivity", 8.0}}), step("min_enclosing_box"),
                        step("filter_small_boxes", {{"min_area_fraction", 0.005}})};
  } else if (name == "photo") {
    t.classmap.classes = {{"background", {0, 0, 0}}, {"cardboard", {255, 255, 0}}, {"photo", {0, 255, 255}}};
    t.resize_budget = 6e5;
    t.train.epochs = 40;
    t.postprocess_classes = {1, 2};
    t.postprocessing = {step("argmax_mask"), step("open", {{"shape", "square"}, {"radius", 1.0}}),
                        step("largest_component"), step("min_enclosing_box"),
                        step("enforce_enclosure", {{"inner", "photo"}, {"outer", "cardboard"}})};
  } else {
    std::string known;
    for (const auto& n : kBuiltinTasks) known += " " + n;
    throw std::invalid_argument("unknown task '" + name + "'; built-in tasks:" + known);
  }
  return t;
}

void validate(const TaskConfig& task) {
  validate(task.classmap);
  validate(task.train, true);
  if (task.resize_budget < 0) throw std::invalid_argument("task: resize_budget must be non-negative");
  if (task.patches) validate(*task.patches);
  for (const auto& v : task.patch_variants) {
    validate(v.spec);
    if (v.batch_size < 1) throw std::invalid_argument("task: patch variant batch size must be positive");
  }
  if (task.postprocess_classes.empty()) throw std::invalid_argument("task: postprocess_classes is empty");
  for (int k : task.postprocess_classes)
    if (k < 0 || k >= task.n_classes()) throw std::invalid_argument("task: postprocess class " + std::to_string(k) + " out of range");
  if ((task.train.loss_mode == LossMode::sigmoid_bce) != task.classmap.multilabel) {
    throw std::invalid_argument("task: sigmoid_bce pairs with multilabel class maps, softmax_ce with exclusive ones");
  }
  check_chain(task);
}

namespace {

Rgb parse_color(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("config: colors are [r, g, b] triples");
  auto channel = [](const json& v) {
    const int c = v.get<int>();
    if (c < 0 || c > 255) throw std::invalid_argument("config: color channel out of range");
    return static_cast<std::uint8_t>(c);
  };
  return {channel(j[0]), channel(j[1]), channel(j[2])};
}

json color_json(Rgb c) { return json::array({c.r, c.g, c.b}); }

PatchSpec parse_patch(const json& j) {
  PatchSpec p;
  p.height = j.at("height").get<int>();
  p.width = j.at("width").get<int>();
  p.margin = j.value("margin", p.margin);
  return p;
}

json patch_json(const PatchSpec& p) { return {{"height", p.height}, {"width", p.width}, {"margin", p.margin}}; }

int class_ref(const json& j, const ClassMap& cm) {
  if (j.is_number_integer()) return j.get<int>();
  const int k = cm.index_of(j.get<std::string>());
  if (k < 0) throw std::invalid_argument("config: unknown class '" + j.get<std::string>() + "'");
  return k;
}

void apply_train(const json& j, TrainConfig& t) {
  static const std::set<std::string> known{"epochs", "batch_size", "initial_lr", "lr_override", "lr_decay_rate",
                                           "lr_decay_period", "weight_decay", "loss_mode", "seed", "augment",
                                           "train_encoder", "renorm_momentum", "prefetch"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("config: unknown train key '" + k + "'");
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.initial_lr = j.value("initial_lr", t.initial_lr);
  t.lr_override = j.value("lr_override", t.lr_override);
  t.lr_decay_rate = j.value("lr_decay_rate", t.lr_decay_rate);
  t.lr_decay_period = j.value("lr_decay_period", t.lr_decay_period);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  if (j.contains("loss_mode")) t.loss_mode = loss_mode_from_string(j.at("loss_mode").get<std::string>());
  t.seed = j.value("seed", t.seed);
  t.augment = j.value("augment", t.augment);
  t.train_encoder = j.value("train_encoder", t.train_encoder);
  t.batch_renorm.momentum = j.value("renorm_momentum", t.batch_renorm.momentum);
  t.prefetch = j.value("prefetch", t.prefetch);
}

}  // namespace

TaskConfig parse_task_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  static const std::set<std::string> known{"base", "name", "classes", "multilabel", "composites", "resize_budget",
                                           "patches", "patch_variants", "train", "postprocess_classes",
                                           "postprocessing", "baseline_radius"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument("config: unknown key '" + k + "'");

  TaskConfig t;
  try {
    if (j.contains("base")) t = builtin_task(j.at("base").get<std::string>());
    t.name = j.value("name", t.name);
    if (j.contains("classes")) {
      t.classmap.classes.clear();
      t.classmap.composites.clear();
      for (const auto& c : j.at("classes")) t.classmap.classes.push_back({c.at("name").get<std::string>(), parse_color(c.at("color"))});
    }
    t.classmap.multilabel = j.value("multilabel", t.classmap.multilabel);
    if (j.contains("composites")) {
      t.classmap.composites.clear();
      for (const auto& c : j.at("composites")) {
        CompositeColor comp{parse_color(c.at("color")), {}};
        for (const auto& k : c.at("classes")) comp.classes.push_back(class_ref(k, t.classmap));
        t.classmap.composites.push_back(std::move(comp));
      }
    }
    if (j.contains("resize_budget")) t.resize_budget = j.at("resize_budget").is_null() ? 0.0 : j.at("resize_budget").get<double>();
    if (j.contains("patches")) {
      if (j.at("patches").is_null()) t.patches.reset();
      else t.patches = parse_patch(j.at("patches"));
    }
    if (j.contains("patch_variants")) {
      t.patch_variants.clear();
      for (const auto& v : j.at("patch_variants")) t.patch_variants.push_back({parse_patch(v), v.at("batch_size").get<int>()});
    }
    if (j.contains("train")) apply_train(j.at("train"), t.train);
    if (j.contains("postprocess_classes")) {
      t.postprocess_classes.clear();
      for (const auto& k : j.at("postprocess_classes")) t.postprocess_classes.push_back(class_ref(k, t.classmap));
    }
    if (j.contains("postprocessing")) {
      t.postprocessing.clear();
      for (const auto& s : j.at("postprocessing")) {
        PostprocStep ps;
        ps.op = s.at("op").get<std::string>();
        for (const auto& [k, v] : s.items()) {
          if (k == "op") continue;
          if (v.is_number()) ps.params[k] = v.get<double>();
          else if (v.is_string()) ps.params[k] = v.get<std::string>();
          else throw std::invalid_argument("config: parameter '" + k + "' of " + ps.op + " must be a number or string");
        }
        t.postprocessing.push_back(std::move(ps));
      }
    }
    t.baseline_radius = j.value("baseline_radius", t.baseline_radius);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  validate(t);
  return t;
}

TaskConfig load_task_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_task_config(ss.str());
}

std::string task_config_to_json(const TaskConfig& t) {
  json j;
  j["name"] = t.name;
  j["classes"] = json::array();
  for (const auto& c : t.classmap.classes) j["classes"].push_back({{"name", c.name}, {"color", color_json(c.color)}});
  j["multilabel"] = t.classmap.multilabel;
  j["composites"] = json::array();
  for (const auto& c : t.classmap.composites) j["composites"].push_back({{"color", color_json(c.color)}, {"classes", c.classes}});
  j["resize_budget"] = t.resize_budget;
  j["patches"] = t.patches ? patch_json(*t.patches) : json(nullptr);
  j["patch_variants"] = json::array();
  for (const auto& v : t.patch_variants) {
    json pv = patch_json(v.spec);
    pv["batch_size"] = v.batch_size;
    j["patch_variants"].push_back(pv);
  }
  j["train"] = {{"epochs", t.train.epochs},
                {"batch_size", t.train.batch_size},
                {"initial_lr", t.train.initial_lr},
                {"lr_override", t.train.lr_override},
                {"lr_decay_rate", t.train.lr_decay_rate},
                {"lr_decay_period", t.train.lr_decay_period},
                {"weight_decay", t.train.weight_decay},
                {"loss_mode", std::string(to_string(t.train.loss_mode))},
                {"seed", t.train.seed},
                {"augment", t.train.augment},
                {"train_encoder", t.train.train_encoder},
                {"renorm_momentum", t.train.batch_renorm.momentum},
                {"prefetch", t.train.prefetch}};
  j["postprocess_classes"] = t.postprocess_classes;
  j["postprocessing"] = json::array();
  for (const auto& s : t.postprocessing) {
    json js = {{"op", s.op}};
    for (const auto& [k, v] : s.params) std::visit([&](const auto& x) { js[k] = x; }, v);
    j["postprocessing"].push_back(js);
  }
  j["baseline_radius"] = t.baseline_radius;
  return j.dump(2);
}

std::string config_hash(const TaskConfig& task) {
  const std::string text = task_config_to_json(task);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

}  // namespace dhseg
