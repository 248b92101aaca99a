#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include "dhseg/train.hpp"

using namespace dhseg;

namespace {

Tensor random_logits(int n, int c, int h, int w, std::mt19937& rng, float scale = 3.0f) {
  Tensor t(n, c, h, w);
  std::uniform_real_distribution<float> u(-scale, scale);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

Tensor random_onehot(int n, int c, int h, int w, std::mt19937& rng) {
  Tensor t(n, c, h, w);
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(b, static_cast<int>(rng() % static_cast<unsigned>(c)), y, x) = 1.0f;
  return t;
}

Tensor random_multihot(int n, int c, int h, int w, std::mt19937& rng) {
  Tensor t(n, c, h, w);
  for (auto& v : t.values()) v = static_cast<float>(rng() % 2);
  return t;
}

std::vector<std::uint8_t> random_ignore(size_t count, std::mt19937& rng) {
  std::vector<std::uint8_t> ig(count);
  for (auto& v : ig) v = rng() % 5 == 0;
  return ig;
}

// Scalar-by-scalar reference losses.
double naive_loss(const Tensor& z, const Tensor& t, const std::vector<std::uint8_t>& ignore, LossMode mode) {
  double total = 0;
  long long pixels = 0;
  for (int b = 0; b < z.n(); ++b)
    for (int y = 0; y < z.h(); ++y)
      for (int x = 0; x < z.w(); ++x) {
        const size_t pix = (static_cast<size_t>(b) * z.h() + y) * z.w() + x;
        if (!ignore.empty() && ignore[pix]) continue;
        ++pixels;
        if (mode == LossMode::softmax_ce) {
          double denom = 0;
          for (int c = 0; c < z.c(); ++c) denom += std::exp(double(z.at(b, c, y, x)));
          for (int c = 0; c < z.c(); ++c)
            total -= t.at(b, c, y, x) * std::log(std::exp(double(z.at(b, c, y, x))) / denom);
        } else {
          for (int c = 0; c < z.c(); ++c) {
            const double p = 1.0 / (1.0 + std::exp(-double(z.at(b, c, y, x))));
            const double tt = t.at(b, c, y, x);
            total -= tt * std::log(p) + (1 - tt) * std::log(1 - p);
          }
        }
      }
  return mode == LossMode::softmax_ce ? total / double(pixels) : total / double(pixels * z.c());
}

Sample rect_sample(int size, int seed) {
  std::mt19937 rng(static_cast<unsigned>(seed));
  RgbImage img(size, size, 3);
  for (auto& v : img.values()) v = static_cast<std::uint8_t>(60 + rng() % 130);
  Image<std::uint8_t> target(size, size, 2);
  const int y0 = size / 4 + static_cast<int>(rng() % 8), x0 = size / 5 + static_cast<int>(rng() % 8);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool in = y >= y0 && y < y0 + size / 2 && x >= x0 && x < x0 + size / 2;
      target(y, x, in) = 1;
      if (in) {
        img(y, x, 0) = 200;
        img(y, x, 1) = 40;
        img(y, x, 2) = 40;
      }
    }
  return make_sample(img, target, "r" + std::to_string(seed));
}

const NetworkGraph& graph2() {
  static const NetworkGraph g = build_graph(ArchConfig{});
  return g;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  CHECK(lr_schedule(0, c) == doctest::Approx(1e-4));
  CHECK(lr_schedule(200, c) == doctest::Approx(0.95e-4).epsilon(1e-12));
  CHECK(lr_schedule(400, c) == doctest::Approx(9.025e-5).epsilon(1e-12));
  CHECK(lr_schedule(100, c) == doctest::Approx(1e-4 * std::sqrt(0.95)).epsilon(1e-12));
  double prev = lr_schedule(0, c);
  for (long long s = 1; s < 5000; s += 37) {
    const double lr = lr_schedule(s, c);
    REQUIRE(lr > 0);
    REQUIRE(lr < prev);
    prev = lr;
  }
  CHECK_THROWS_AS(lr_schedule(-1, c), std::invalid_argument);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(validate(c));
  c.initial_lr = 1e-3;
  CHECK_THROWS_WITH_AS(validate(c), doctest::Contains("initial_lr"), std::invalid_argument);
  c.lr_override = true;
  CHECK_NOTHROW(validate(c));
  c = {};
  c.epochs = 0;
  CHECK_THROWS_AS(validate(c), std::invalid_argument);
  CHECK_NOTHROW(validate(c, true));
  c = {};
  c.batch_size = 0;
  CHECK_THROWS_AS(validate(c), std::invalid_argument);
  CHECK(loss_mode_from_string("sigmoid_bce") == LossMode::sigmoid_bce);
  CHECK(to_string(LossMode::softmax_ce) == "softmax_ce");
  CHECK_THROWS_AS(loss_mode_from_string("hinge"), std::invalid_argument);
}

TEST_CASE("loss at uniform and saturated logits") {
  const Tensor zero(1, 2, 4, 4);
  std::mt19937 rng(1);
  const Tensor t = random_onehot(1, 2, 4, 4, rng);
  CHECK(std::abs(pixel_loss(zero, t, {}, LossMode::softmax_ce).loss - std::log(2.0)) <= 1e-6);
  CHECK(std::abs(pixel_loss(zero, t, {}, LossMode::sigmoid_bce).loss - std::log(2.0)) <= 1e-6);
  Tensor sat(1, 2, 4, 4);
  for (size_t i = 0; i < sat.size(); ++i) sat[i] = t[i] > 0 ? 20.0f : -20.0f;
  CHECK(pixel_loss(sat, t, {}, LossMode::softmax_ce).loss < 1e-3);
  CHECK(pixel_loss(sat, t, {}, LossMode::sigmoid_bce).loss < 1e-3);
}

TEST_CASE("loss matches the naive oracle") {
  std::mt19937 rng(2);
  for (int i = 0; i < 20; ++i) {
    const int c = 2 + static_cast<int>(rng() % 3);
    const Tensor z = random_logits(2, c, 16, 16, rng);
    const auto ignore = i % 2 ? random_ignore(2 * 16 * 16, rng) : std::vector<std::uint8_t>{};
    const Tensor t1 = random_onehot(2, c, 16, 16, rng);
    CHECK(std::abs(pixel_loss(z, t1, ignore, LossMode::softmax_ce).loss - naive_loss(z, t1, ignore, LossMode::softmax_ce)) <= 1e-6);
    const Tensor t2 = random_multihot(2, c, 16, 16, rng);
    CHECK(std::abs(pixel_loss(z, t2, ignore, LossMode::sigmoid_bce).loss - naive_loss(z, t2, ignore, LossMode::sigmoid_bce)) <= 1e-6);
  }
}

TEST_CASE("loss is permutation invariant over pixels") {
  std::mt19937 rng(3);
  const int c = 3, h = 16, w = 16;
  const Tensor z = random_logits(1, c, h, w, rng);
  const Tensor t = random_onehot(1, c, h, w, rng);
  const auto ig = random_ignore(h * w, rng);
  std::vector<int> perm(h * w);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor zp(1, c, h, w), tp(1, c, h, w);
  std::vector<std::uint8_t> igp(ig.size());
  for (int i = 0; i < h * w; ++i) {
    const int j = perm[static_cast<size_t>(i)];
    for (int k = 0; k < c; ++k) {
      zp.at(0, k, i / w, i % w) = z.at(0, k, j / w, j % w);
      tp.at(0, k, i / w, i % w) = t.at(0, k, j / w, j % w);
    }
    igp[static_cast<size_t>(i)] = ig[static_cast<size_t>(j)];
  }
  for (auto mode : {LossMode::softmax_ce, LossMode::sigmoid_bce})
    CHECK(pixel_loss(z, t, ig, mode).loss == doctest::Approx(pixel_loss(zp, tp, igp, mode).loss).epsilon(1e-12));
}

TEST_CASE("loss gradient matches finite differences") {
  std::mt19937 rng(4);
  for (auto mode : {LossMode::softmax_ce, LossMode::sigmoid_bce}) {
    const Tensor z = random_logits(2, 3, 4, 4, rng, 2.0f);
    const Tensor t = mode == LossMode::softmax_ce ? random_onehot(2, 3, 4, 4, rng) : random_multihot(2, 3, 4, 4, rng);
    const auto ig = random_ignore(2 * 16, rng);
    const LossResult r = pixel_loss(z, t, ig, mode);
    const float h = 1e-2f;
    for (size_t i = 0; i < z.size(); ++i) {
      Tensor zp = z, zm = z;
      zp[i] += h;
      zm[i] -= h;
      const double fd = (naive_loss(zp, t, ig, mode) - naive_loss(zm, t, ig, mode)) / (2 * double(h));
      CHECK(std::abs(fd - r.grad[i]) <= 1e-3 * std::max(std::abs(fd), 1e-2));
    }
  }
}

TEST_CASE("fully ignored batch is an error") {
  const Tensor z(1, 2, 2, 2), t(1, 2, 2, 2);
  const std::vector<std::uint8_t> all(4, 1);
  CHECK_THROWS_AS(pixel_loss(z, t, all, LossMode::softmax_ce), std::invalid_argument);
  CHECK_THROWS_AS(pixel_loss(z, Tensor(1, 3, 2, 2), {}, LossMode::softmax_ce), std::invalid_argument);
}

TEST_CASE("l2 penalty") {
  const NetworkGraph& g = graph2();
  const auto slots = parameter_slots(g);
  WeightStore zero = zeros_like_slots(g);
  CHECK(l2_penalty(zero, slots, 1e-6) == 0.0);

  WeightStore ones = zero;
  ones.at("logits/kernel").fill(1.0f);
  ones.at("logits/bias").fill(1.0f);
  ones.at("dec1_conv/norm/gamma").fill(1.0f);
  CHECK(l2_penalty(ones, slots, 1e-6) == doctest::Approx(64 * 1e-6).epsilon(1e-12));

  const WeightStore w = init_weights(g, 9);
  long double oracle = 0;
  for (const auto& [name, t] : w.entries()) {
    if (!name.ends_with("/kernel")) continue;
    for (float v : t.values()) oracle += static_cast<long double>(v) * v;
  }
  CHECK(std::abs(l2_penalty(w, slots, 1e-6) - double(oracle * 1e-6L)) <= 1e-9 * double(oracle * 1e-6L));

  WeightStore grads = zeros_like_slots(g);
  add_l2_gradient(w, slots, 1e-6, grads);
  CHECK(grads.at("logits/kernel")[3] == doctest::Approx(2e-6 * w.at("logits/kernel")[3]));
  CHECK(grads.at("logits/bias")[0] == 0.0f);
}

TEST_CASE("adam") {
  WeightStore w, g;
  w.set("a", Tensor({4}, 0.5f));
  g.set("a", Tensor({4}, 0.0f));
  Adam zero;
  zero.step(w, g, 1e-3, {"a"});
  for (float v : w.at("a").values()) CHECK(v == 0.5f);

  // First step moves every entry by lr * g / (|g| + eps) after bias correction.
  Tensor grad({4});
  grad[0] = 0.3f;
  grad[1] = -2.0f;
  grad[2] = 1e-3f;
  grad[3] = 0.0f;
  g.set("a", grad);
  Adam adam;
  adam.step(w, g, 1e-2, {"a"});
  for (size_t i = 0; i < 4; ++i) {
    const double gi = grad[i];
    CHECK(w.at("a")[i] == doctest::Approx(0.5 - 1e-2 * gi / (std::abs(gi) + 1e-8)).epsilon(1e-6));
  }
  CHECK(adam.steps() == 1);
}

TEST_CASE("optimized parameters respect the encoder switch") {
  const auto slots = parameter_slots(graph2());
  TrainConfig c;
  const auto all = optimized_parameters(slots, c);
  c.train_encoder = false;
  const auto head_only = optimized_parameters(slots, c);
  const std::set<std::string> s(head_only.begin(), head_only.end());
  for (const auto& slot : slots) {
    const bool is_stat = slot.role == ParamRole::moving_mean || slot.role == ParamRole::moving_variance;
    CHECK(std::count(all.begin(), all.end(), slot.name) == (is_stat ? 0 : 1));
    CHECK(s.count(slot.name) == (!is_stat && slot.section != Section::encoder ? 1u : 0u));
  }
}

TEST_CASE("batches pad to a multiple of 32 and ignore the padding") {
  Sample a = make_sample(RgbImage(50, 70, 3, 10), Image<std::uint8_t>(50, 70, 2, 0));
  Sample b = make_sample(RgbImage(64, 40, 3, 10), Image<std::uint8_t>(64, 40, 2, 0));
  const Batch batch = assemble_batch({a, b});
  CHECK(batch.input.shape() == std::vector<int>{2, 3, 64, 96});
  CHECK(batch.target.shape() == std::vector<int>{2, 2, 64, 96});
  CHECK(batch.ignore[0] == 0);
  CHECK(batch.ignore[static_cast<size_t>(50 * 96)] == 1);
  CHECK(batch.ignore[static_cast<size_t>(64 * 96 + 40)] == 1);
  CHECK(batch.ignore[static_cast<size_t>(64 * 96 + 39)] == 0);
}

TEST_CASE("fit edge cases") {
  const NetworkGraph& g = graph2();
  WeightStore w = init_weights(g, 1);
  const WeightStore before = w;
  TrainConfig c;
  c.epochs = 0;
  const FitResult r = fit(g, w, {rect_sample(64, 1)}, c);
  CHECK(r.history.empty());
  CHECK(r.steps == 0);
  CHECK(w == before);
  c.epochs = 1;
  CHECK_THROWS_AS(fit(g, w, {}, c), std::invalid_argument);
  CHECK_THROWS_AS(fit(build_graph(ArchConfig{3}), w, {rect_sample(64, 1)}, c), std::invalid_argument);

  WeightStore broken = before;
  broken.at("logits/bias").fill(std::nanf(""));
  CHECK_THROWS_WITH_AS(fit(g, broken, {rect_sample(64, 1)}, c), doctest::Contains("non-finite"), std::runtime_error);
}

TEST_CASE("fit is deterministic given a seed") {
  const NetworkGraph& g = graph2();
  const std::vector<Sample> data{rect_sample(64, 1), rect_sample(64, 2), rect_sample(64, 3)};
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 2;
  c.seed = 5;
  CHECK(steps_per_epoch(data, c) == 2);
  WeightStore w1 = init_weights(g, 2), w2 = init_weights(g, 2);
  std::vector<StepInfo> steps;
  FitCallbacks cb;
  cb.on_step = [&](const StepInfo& s) { steps.push_back(s); };
  const FitResult a = fit(g, w1, data, c, cb);
  const FitResult b = fit(g, w2, data, c);
  CHECK(a.history == b.history);
  CHECK(w1 == w2);
  CHECK(a.steps == 4);
  REQUIRE(steps.size() == 4);
  CHECK(steps[2].epoch == 1);
  CHECK(steps[3].lr == doctest::Approx(lr_schedule(3, c)));
  CHECK_FALSE(w1 == init_weights(g, 2));
}

TEST_CASE("fit with patches") {
  const NetworkGraph& g = graph2();
  TrainConfig c;
  c.epochs = 1;
  c.batch_size = 4;
  c.patches = PatchSpec{64, 64, 16};
  WeightStore w = init_weights(g, 3);
  const FitResult r = fit(g, w, {rect_sample(96, 4)}, c);
  // 96 px with 64 px patches and stride 32 gives a 2x2 grid: one batch of four.
  CHECK(r.steps == 1);
  CHECK(std::isfinite(r.history.at(0)));
}
