#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <stdexcept>
#include <fstream>

#include "dhseg/weights.hpp"

using namespace dhseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dhseg_test_weights";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("slots cover every parameter the report counts") {
  const NetworkGraph g = build_graph(ArchConfig{});
  std::int64_t trainable_values = 0;
  for (const auto& s : parameter_slots(g)) {
    std::int64_t n = 1;
    for (int d : s.shape) n *= d;
    if (s.role != ParamRole::moving_mean && s.role != ParamRole::moving_variance) trainable_values += n;
  }
  CHECK(trainable_values == count_parameters(g).total);
}

TEST_CASE("init is deterministic and follows the Xavier bound") {
  const NetworkGraph g = build_graph(ArchConfig{});
  const WeightStore a = init_weights(g, 3);
  CHECK(a == init_weights(g, 3));
  CHECK_FALSE(a == init_weights(g, 4));
  CHECK_NOTHROW(check_weights(g, a));
  for (const auto& s : parameter_slots(g)) {
    const Tensor& t = a.at(s.name);
    if (s.role == ParamRole::kernel) {
      const float bound = std::sqrt(6.0f / float(s.fan_in + s.fan_out));
      for (float v : t.values()) REQUIRE(std::abs(v) <= bound);
    } else if (s.role == ParamRole::norm_scale || s.role == ParamRole::moving_variance) {
      for (float v : t.values()) REQUIRE(v == 1.0f);
    } else {
      for (float v : t.values()) REQUIRE(v == 0.0f);
    }
  }
}

TEST_CASE("save and load round trip") {
  const NetworkGraph g = build_graph(ArchConfig{});
  const WeightStore a = init_weights(g, 11);
  const fs::path p = temp_file("round.dhsw");
  save_weights(a, p);
  CHECK(load_weights(p) == a);
}

TEST_CASE("corrupt files are rejected") {
  const fs::path bad = temp_file("bad.dhsw");
  {
    std::ofstream os(bad, std::ios::binary);
    os << "NOPE";
  }
  CHECK_THROWS_AS(load_weights(bad), std::runtime_error);
  CHECK_THROWS_AS(load_weights(temp_file("missing.dhsw")), std::runtime_error);

  WeightStore w;
  w.set("a", Tensor({2, 3}, 1.5f));
  const fs::path ok = temp_file("trunc.dhsw");
  save_weights(w, ok);
  fs::resize_file(ok, fs::file_size(ok) - 4);
  CHECK_THROWS_AS(load_weights(ok), std::runtime_error);
}

TEST_CASE("check_weights names the offending tensor") {
  const NetworkGraph g = build_graph(ArchConfig{});
  WeightStore w = init_weights(g, 1);
  w.set("logits/kernel", Tensor({3, 32, 1, 1}));
  try {
    check_weights(g, w);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("logits/kernel") != std::string::npos);
  }
  w.entries().erase("logits/kernel");
  CHECK_THROWS_WITH_AS(check_weights(g, w), doctest::Contains("missing tensor logits/kernel"), std::invalid_argument);
}

TEST_CASE("encoder import copies only encoder tensors") {
  ArchConfig three;
  three.n_classes = 3;
  const NetworkGraph g2 = build_graph(ArchConfig{});
  const NetworkGraph g3 = build_graph(three);
  const WeightStore src = init_weights(g2, 5);
  WeightStore dst = init_weights(g3, 6);
  const WeightStore dst_before = dst;
  const std::size_t copied = import_encoder(g3, src, dst);
  std::size_t encoder_slots = 0;
  for (const auto& s : parameter_slots(g3)) {
    if (s.section == Section::encoder) {
      ++encoder_slots;
      CHECK(dst.at(s.name) == src.at(s.name));
    } else {
      CHECK(dst.at(s.name) == dst_before.at(s.name));
    }
  }
  CHECK(copied == encoder_slots);
}
