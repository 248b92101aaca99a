#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "dhseg/data_pipeline.hpp"
#include "dhseg/image_io.hpp"

using namespace dhseg;
namespace fs = std::filesystem;

namespace {

ClassMap three_classes() {
  return ClassMap{{{"background", {0, 0, 0}}, {"text", {255, 0, 0}}, {"figure", {0, 0, 255}}}, {}, false};
}

RgbImage paint(const LabelMap& idx, const ClassMap& cm) {
  RgbImage out(idx.height(), idx.width(), 3);
  for (int y = 0; y < idx.height(); ++y)
    for (int x = 0; x < idx.width(); ++x) {
      const Rgb c = cm.classes[static_cast<size_t>(idx(y, x))].color;
      out(y, x, 0) = c.r;
      out(y, x, 1) = c.g;
      out(y, x, 2) = c.b;
    }
  return out;
}

LabelMap random_labels(int h, int w, int n, std::mt19937& rng) {
  LabelMap m(h, w);
  for (auto& v : m.values()) v = static_cast<int>(rng() % static_cast<unsigned>(n));
  return m;
}

// Distance from (px, py) to segment ab, by clamped projection.
double seg_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * vx), py - (ay + t * vy));
}

BinaryMask baseline_oracle(const std::vector<PolyLine>& lines, Size2 size, double r) {
  BinaryMask m(size.height, size.width);
  for (int y = 0; y < size.height; ++y)
    for (int x = 0; x < size.width; ++x)
      for (const auto& l : lines)
        for (size_t i = 0; i + 1 < l.vertices.size(); ++i)
          if (seg_dist(x, y, l.vertices[i].x, l.vertices[i].y, l.vertices[i + 1].x, l.vertices[i + 1].y) <= r)
            m(y, x) = 1;
  return m;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "dhseg_test_data" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Sample smooth_sample(int size) {
  // Three nested blobs: large smooth regions, as on a page.
  RgbImage img(size, size, 3);
  Image<std::uint8_t> target(size, size, 3);
  const double c = (size - 1) / 2.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double r = std::hypot(x - c, y - c * 0.8);
      const int k = r < size * 0.18 ? 2 : (std::abs(x - c) < size * 0.3 && std::abs(y - c) < size * 0.35 ? 1 : 0);
      target(y, x, k) = 1;
      for (int ch = 0; ch < 3; ++ch) img(y, x, ch) = static_cast<std::uint8_t>(40 + 80 * k + ch);
    }
  return make_sample(img, target, "smooth");
}

}  // namespace

TEST_CASE("encode uniform background") {
  const ClassMap cm = three_classes();
  const RgbImage img(5, 7, 3, 0);
  const auto t = encode_mask(img, cm);
  REQUIRE(t.channels() == 3);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) {
      CHECK(t(y, x, 0) == 1);
      CHECK(t(y, x, 1) == 0);
      CHECK(t(y, x, 2) == 0);
    }
}

TEST_CASE("unknown colors are listed with pixel counts") {
  RgbImage img(4, 4, 3, 0);
  img(0, 0, 1) = 9;
  img(1, 1, 1) = 9;
  try {
    encode_mask(img, three_classes());
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(0,9,0)") != std::string::npos);
    CHECK(msg.find("2 px") != std::string::npos);
  }
}

TEST_CASE("checkerboard encodes one-hot and round trips") {
  const ClassMap cm{{{"bg", {10, 20, 30}}, {"fg", {200, 100, 0}}}, {}, false};
  LabelMap idx(8, 8);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) idx(y, x) = (x + y) % 2;
  const RgbImage img = paint(idx, cm);
  const auto t = encode_mask(img, cm);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      CHECK(t(y, x, idx(y, x)) == 1);
      CHECK(t(y, x, 1 - idx(y, x)) == 0);
    }
  CHECK(class_indices(t) == idx);
  CHECK(decode_mask(class_indices(t), cm) == img);
}

TEST_CASE("decode of random maps round trips through encode") {
  std::mt19937 rng(21);
  const ClassMap cm = three_classes();
  for (int i = 0; i < 10; ++i) {
    const LabelMap idx = random_labels(13, 17, 3, rng);
    const RgbImage img = decode_mask(idx, cm);
    CHECK(img == paint(idx, cm));
    CHECK(decode_mask(class_indices(encode_mask(img, cm)), cm) == img);
  }
  CHECK(decode_mask(LabelMap(3, 3), cm) == RgbImage(3, 3, 3, 0));
  LabelMap bad(2, 2);
  bad(1, 1) = 3;
  CHECK_THROWS_AS(decode_mask(bad, cm), std::invalid_argument);
}

TEST_CASE("multilabel composites set several channels") {
  ClassMap cm{{{"background", {0, 0, 1}}, {"comment", {0, 0, 2}}, {"decoration", {0, 0, 4}}}, {{{0, 0, 6}, {1, 2}}}, true};
  CHECK_NOTHROW(validate(cm));
  RgbImage img(1, 2, 3, 0);
  img(0, 0, 2) = 6;
  img(0, 1, 2) = 1;
  const auto t = encode_mask(img, cm);
  CHECK(t(0, 0, 0) == 0);
  CHECK(t(0, 0, 1) == 1);
  CHECK(t(0, 0, 2) == 1);
  CHECK(t(0, 1, 0) == 1);
  cm.multilabel = false;
  CHECK_THROWS_AS(validate(cm), std::invalid_argument);
  ClassMap dup{{{"a", {1, 1, 1}}, {"b", {1, 1, 1}}}, {}, false};
  CHECK_THROWS_AS(validate(dup), std::invalid_argument);
}

TEST_CASE("baseline band around a horizontal segment") {
  const std::vector<PolyLine> lines{{{{10, 50}, {90, 50}}}};
  const BinaryMask m = render_baselines(lines, {100, 100}, 5.0);
  CHECK(m(50, 50) == 1);
  CHECK(m(55, 50) == 1);
  CHECK(m(56, 50) == 0);
  CHECK(m(45, 50) == 1);
  CHECK(m(44, 50) == 0);
  int band = 0;
  for (int y = 0; y < 100; ++y) band += m(y, 50);
  CHECK(band == 11);
  // Rounded caps: (5, 50) is on the cap, (6, 47) is at distance 5 from (10, 50) and (5, 47) is not.
  CHECK(m(50, 5) == 1);
  CHECK(m(50, 4) == 0);
  CHECK(m(47, 6) == 1);
  CHECK(m(47, 5) == 0);
}

TEST_CASE("baselines equal the brute-force distance oracle") {
  std::mt19937 rng(33);
  for (int trial = 0; trial < 12; ++trial) {
    const int h = 40 + static_cast<int>(rng() % 60), w = 40 + static_cast<int>(rng() % 80);
    std::vector<PolyLine> lines(1 + rng() % 3);
    for (auto& l : lines) {
      const int n = 2 + static_cast<int>(rng() % 4);
      for (int i = 0; i < n; ++i) l.vertices.push_back({double(rng() % static_cast<unsigned>(w)), double(rng() % static_cast<unsigned>(h))});
    }
    for (double r : {1.0, 2.5, 4.3, 5.0}) {
      CAPTURE(trial);
      CAPTURE(r);
      CHECK(render_baselines(lines, {h, w}, r) == baseline_oracle(lines, {h, w}, r));
    }
  }
}

TEST_CASE("baseline degenerate cases") {
  CHECK(count_foreground(render_baselines({}, {20, 20})) == 0);
  const BinaryMask thin = render_baselines({{{{2, 3}, {12, 3}}}}, {10, 20}, 0.0);
  CHECK(count_foreground(thin) == 11);
  for (int x = 2; x <= 12; ++x) CHECK(thin(3, x) == 1);
  const BinaryMask diag = render_baselines({{{{0, 0}, {9, 9}}}}, {10, 10}, 0.0);
  CHECK(count_foreground(diag) == 10);
}

TEST_CASE("baselines json") {
  const fs::path d = fresh_dir("json");
  {
    std::ofstream os(d / "a.json");
    os << "[[[1, 2], [30, 2]], [[4, 10], [8, 12], [20, 15]]]";
  }
  const auto lines = read_baselines_json(d / "a.json");
  REQUIRE(lines.size() == 2);
  CHECK(lines[0].vertices[1] == Point2{30, 2});
  CHECK(lines[1].vertices.size() == 3);
}

TEST_CASE("pixel budget examples") {
  CHECK(budget_size({2000, 1500}, 6e5) == Size2{894, 671});
  CHECK(budget_size({100, 100}, 6e5) == Size2{100, 100});
  CHECK(budget_size({2000, 2000}, 1e6) == Size2{1000, 1000});
  CHECK_THROWS_AS(budget_size({10, 10}, 0), std::invalid_argument);
}

TEST_CASE("pixel budget bounds and aspect") {
  std::mt19937 rng(4);
  for (int i = 0; i < 500; ++i) {
    const Size2 s{200 + static_cast<int>(rng() % 5000), 200 + static_cast<int>(rng() % 5000)};
    const double budget = 1e4 + double(rng() % 1000000);
    const Size2 o = budget_size(s, budget);
    if (double(s.area()) <= budget) {
      CHECK(o == s);
      continue;
    }
    CHECK(double(o.area()) <= budget);
    CHECK(double(o.area()) >= 0.95 * budget);
    const double k = std::sqrt(budget / double(s.area()));
    CHECK(std::abs(o.height - s.height * k) <= 1.5);
    CHECK(std::abs(o.width - s.width * k) <= 1.5);
  }
}

TEST_CASE("resize keeps nearest labels in the alphabet") {
  std::mt19937 rng(5);
  Image<std::uint8_t> m(40, 30);
  for (auto& v : m.values()) v = static_cast<std::uint8_t>(3 * (rng() % 3));
  const auto r = resize_nearest(m, {17, 23});
  for (auto v : r.values()) CHECK((v == 0 || v == 3 || v == 6));
  const RgbImage img = resize_to_pixel_budget(RgbImage(400, 300, 3, 77), 3e4);
  CHECK(img.size2() == budget_size({400, 300}, 3e4));
  for (auto v : img.values()) CHECK(v == 77);
}

TEST_CASE("patch grid examples") {
  CHECK(patch_grid({300, 300}, {}) == std::vector<PatchOrigin>{{0, 0}});
  CHECK(patch_grid({450, 300}, {}) == std::vector<PatchOrigin>{{0, 0}, {150, 0}});
  CHECK(patch_starts(500, 300, 75) == std::vector<int>{0, 150, 200});
  CHECK(patch_starts(120, 300, 75) == std::vector<int>{0});
  CHECK_THROWS_AS(validate(PatchSpec{300, 300, 150}), std::invalid_argument);
}

TEST_CASE("every pixel lies in some patch interior or near the border") {
  std::mt19937 rng(6);
  for (int i = 0; i < 30; ++i) {
    const Size2 s{100 + static_cast<int>(rng() % 900), 100 + static_cast<int>(rng() % 900)};
    const PatchSpec spec{300, 300, 75};
    const auto grid = patch_grid(s, spec);
    for (int y = 0; y < s.height; y += 7)
      for (int x = 0; x < s.width; x += 7) {
        bool interior = false;
        for (const auto& o : grid) {
          const bool in_y = (y >= o.y + spec.margin || o.y == 0) && (y < o.y + spec.height - spec.margin || o.y + spec.height >= s.height);
          const bool in_x = (x >= o.x + spec.margin || o.x == 0) && (x < o.x + spec.width - spec.margin || o.x + spec.width >= s.width);
          interior |= in_y && in_x && y >= o.y && x >= o.x && y < o.y + spec.height && x < o.x + spec.width;
        }
        REQUIRE(interior);
      }
  }
}

TEST_CASE("label patches equal crops of the full label and padding is ignored") {
  std::mt19937 rng(7);
  Sample s = make_sample(RgbImage(250, 380, 3, 5), Image<std::uint8_t>(250, 380, 2, 0), "p");
  for (int y = 0; y < 250; ++y)
    for (int x = 0; x < 380; ++x) s.target(y, x, rng() % 2) = 1;
  const auto patches = extract_patches(s, {300, 300, 75});
  REQUIRE(patches.size() == 2);
  for (const auto& p : patches) {
    CHECK(p.sample.target.size2() == Size2{300, 300});
    for (int y = 0; y < 300; ++y)
      for (int x = 0; x < 300; ++x) {
        const int gy = p.origin.y + y, gx = p.origin.x + x;
        if (s.target.contains(gy, gx)) {
          REQUIRE(p.sample.target(y, x, 0) == s.target(gy, gx, 0));
          REQUIRE(p.sample.ignore(y, x) == 0);
        } else {
          REQUIRE(p.sample.ignore(y, x) == 1);
          REQUIRE(p.sample.image(y, x, 0) == 0);
        }
      }
  }
}

TEST_CASE("stitching inverts patching for per-pixel functions") {
  std::mt19937 rng(8);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int i = 0; i < 8; ++i) {
    const Size2 s{120 + static_cast<int>(rng() % 700), 120 + static_cast<int>(rng() % 700)};
    ProbabilityMap full(s.height, s.width, 2);
    for (auto& v : full.values()) v = u(rng);
    const PatchSpec spec{200, 160, 40};
    std::vector<PredictedPatch> patches;
    for (const auto& o : patch_grid(s, spec)) {
      ProbabilityMap m = crop_padded(full, o.y, o.x, spec.height, spec.width);
      for (auto& v : m.values()) v = v * 0.5f + 0.25f;
      patches.push_back({std::move(m), o});
    }
    ProbabilityMap expect = full;
    for (auto& v : expect.values()) v = v * 0.5f + 0.25f;
    CHECK(stitch_predictions(patches, s) == expect);
    std::shuffle(patches.begin(), patches.end(), rng);
    CHECK(stitch_predictions(patches, s) == expect);
  }
}

TEST_CASE("stitching splits overlaps at the midline") {
  const float a = 0.2f, b = 0.7f;
  std::vector<PredictedPatch> patches{{ProbabilityMap(300, 300, 1, a), {0, 0}}, {ProbabilityMap(300, 300, 1, b), {150, 0}}};
  const ProbabilityMap out = stitch_predictions(patches, {450, 300});
  for (int x = 100; x < 200; ++x)
    for (int y = 0; y < 450; ++y) REQUIRE(out(y, x) == (y < 225 ? a : b));
  CHECK(stitch_predictions({{ProbabilityMap(300, 300, 1, a), {0, 0}}}, {300, 300}) == ProbabilityMap(300, 300, 1, a));
  CHECK_THROWS_AS(stitch_predictions({{ProbabilityMap(300, 300, 1, a), {0, 0}}}, {301, 300}), std::invalid_argument);
}

TEST_CASE("augment identity and determinism") {
  const Sample s = smooth_sample(64);
  AugmentParams none{0, 0, 1, 1, false, 3};
  const Sample t = augment(s, none);
  CHECK(t.image == s.image);
  CHECK(t.target == s.target);
  CHECK(t.ignore == s.ignore);
  AugmentParams p;
  p.seed = 99;
  CHECK(augment(s, p).image == augment(s, p).image);
  CHECK_THROWS_AS(validate(AugmentParams{-4, 0, 1, 1, true, 0}), std::invalid_argument);
  CHECK_THROWS_AS(validate(AugmentParams{0, 0, 0, 1, true, 0}), std::invalid_argument);
}

TEST_CASE("mirror is an involution") {
  const Sample s = smooth_sample(48);
  AugmentTransform m;
  m.mirror = true;
  const Sample once = apply_transform(s, m);
  CHECK(once.target(10, 0, 0) == s.target(10, 47, 0));
  const Sample twice = apply_transform(once, m);
  CHECK(twice.image == s.image);
  CHECK(twice.target == s.target);
}

TEST_CASE("rotation round trip keeps labels") {
  const Sample s = smooth_sample(256);
  for (double r : {0.2, -0.15, 0.1}) {
    const Sample back = apply_transform(apply_transform(s, {r, 1.0, false}), {-r, 1.0, false});
    long long valid = 0, same = 0;
    for (int y = 0; y < 256; ++y)
      for (int x = 0; x < 256; ++x) {
        if (back.ignore(y, x)) continue;
        ++valid;
        bool eq = true;
        for (int c = 0; c < 3; ++c) eq &= back.target(y, x, c) == s.target(y, x, c);
        same += eq;
      }
    CHECK(valid > 256 * 256 / 2);
    CHECK(double(same) / double(valid) >= 0.95);
  }
}

TEST_CASE("augmentation never invents classes") {
  const Sample s = smooth_sample(96);
  std::mt19937_64 rng(12);
  AugmentParams p;
  for (int i = 0; i < 10; ++i) {
    const Sample t = apply_transform(s, sample_transform(p, rng));
    for (int y = 0; y < 96; ++y)
      for (int x = 0; x < 96; ++x) {
        int set = 0;
        for (int c = 0; c < 3; ++c) {
          REQUIRE(t.target(y, x, c) <= 1);
          set += t.target(y, x, c);
        }
        if (!t.ignore(y, x)) REQUIRE(set == 1);
      }
  }
}

TEST_CASE("input tensor normalization") {
  RgbImage img(2, 2, 3, 255);
  const Tensor t = to_input_tensor({&img});
  REQUIRE(t.shape() == std::vector<int>{1, 3, 2, 2});
  for (int c = 0; c < 3; ++c) CHECK(t.at(0, c, 1, 1) == doctest::Approx((1.0f - kImageMean[c]) / kImageStd[c]));
}

TEST_CASE("dataset listing pairs stems and reports strays") {
  const fs::path root = fresh_dir("ds");
  const ClassMap cm{{{"bg", {0, 0, 0}}, {"page", {255, 0, 0}}}, {}, false};
  RgbImage label(20, 30, 3, 0);
  for (int y = 5; y < 15; ++y)
    for (int x = 5; x < 25; ++x) label(y, x, 0) = 255;
  write_rgb(root / "images" / "a.png", RgbImage(20, 30, 3, 128));
  write_rgb(root / "labels" / "a.png", label);
  write_rgb(root / "images" / "b.jpg", RgbImage(20, 30, 3, 128));
  {
    std::ofstream os(root / "labels" / "b.json");
    os << "[[[2, 10], [27, 10]]]";
  }
  const auto entries = list_dataset(root);
  REQUIRE(entries.size() == 2);
  const Sample a = load_sample(entries[0], cm);
  CHECK(a.target(10, 10, 1) == 1);
  CHECK(a.target(0, 0, 0) == 1);
  const Sample b = load_sample(entries[1], cm, 2.0);
  CHECK(b.target(10, 15, 1) == 1);
  CHECK(b.target(13, 15, 1) == 0);

  write_rgb(root / "images" / "c.png", RgbImage(20, 30, 3, 1));
  CHECK_THROWS_WITH(list_dataset(root), doctest::Contains("images/c"));
  CHECK_THROWS_AS(list_dataset(fresh_dir("empty")), std::runtime_error);
}

TEST_CASE("prefetch queue delivers everything once") {
  PrefetchQueue<int> q(3);
  std::vector<std::thread> producers;
  for (int p = 0; p < 3; ++p)
    producers.emplace_back([&q, p] {
      for (int i = 0; i < 100; ++i) q.push(p * 1000 + i);
    });
  std::thread closer([&] {
    for (auto& t : producers) t.join();
    q.close();
  });
  std::vector<int> got;
  while (auto v = q.pop()) got.push_back(*v);
  closer.join();
  std::sort(got.begin(), got.end());
  REQUIRE(got.size() == 300);
  CHECK(std::adjacent_find(got.begin(), got.end()) == got.end());
  CHECK_FALSE(q.push(1));
}
