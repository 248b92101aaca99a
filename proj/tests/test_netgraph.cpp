#include <doctest.h>

#include <cmath>
#include <random>
#include <stdexcept>

#include "dhseg/netgraph.hpp"

using namespace dhseg;

namespace {

int count_kind(const NetworkGraph& g, LayerKind kind, Section section) {
  int n = 0;
  for (const auto& l : g.layers) n += l.kind == kind && l.section == section;
  return n;
}

// Decoder weights written out by hand: step k concatenates the upsampled
// previous output with its skip, then a 3x3 conv without bias plus a
// gamma/beta pair per output channel.
std::int64_t decoder_oracle() {
  const std::int64_t in[5] = {512 + 512, 512 + 512, 256 + 256, 128 + 64, 64 + 3};
  const std::int64_t out[5] = {512, 256, 128, 64, 32};
  std::int64_t total = 0;
  for (int k = 0; k < 5; ++k) total += 9 * in[k] * out[k] + 2 * out[k];
  return total;
}

}  // namespace

TEST_CASE("default graph has five encoder stages, two reductions, five decoder convs and one head") {
  const NetworkGraph g = build_graph(ArchConfig{});
  int levels_seen[6] = {};
  for (const auto& l : g.layers)
    if (l.section == Section::encoder) levels_seen[l.level] = 1;
  for (int lv = 1; lv <= 5; ++lv) CHECK(levels_seen[lv] == 1);
  CHECK(count_kind(g, LayerKind::conv, Section::reduction) == 2);
  CHECK(count_kind(g, LayerKind::conv, Section::decoder) == 5);
  CHECK(count_kind(g, LayerKind::bilinear_upsample, Section::decoder) == 5);
  CHECK(count_kind(g, LayerKind::final_conv, Section::head) == 1);
  CHECK(count_kind(g, LayerKind::bottleneck_block, Section::encoder) +
            count_kind(g, LayerKind::downsample_bottleneck, Section::encoder) ==
        16);
  CHECK(g.skip_links.size() == 5);
}

TEST_CASE("decoder convs are followed by relu and each step concatenates one skip") {
  const NetworkGraph g = build_graph(ArchConfig{});
  for (int k = 1; k <= 5; ++k) {
    const auto& relu = g.layer("dec" + std::to_string(k) + "_relu");
    CHECK(relu.kind == LayerKind::relu);
    CHECK(g.layers[static_cast<size_t>(relu.inputs.at(0))].name == "dec" + std::to_string(k) + "_conv");
    const auto& cat = g.layer("concat" + std::to_string(k));
    CHECK(cat.inputs.size() == 2);
    CHECK(g.layers[static_cast<size_t>(cat.inputs[0])].kind == LayerKind::bilinear_upsample);
  }
  CHECK(g.layers[static_cast<size_t>(g.layer("concat5").inputs[1])].kind == LayerKind::input);
}

TEST_CASE("head is a 1x1 conv to n_classes") {
  ArchConfig a;
  a.n_classes = 4;
  const NetworkGraph g = build_graph(a);
  const auto& head = g.layers[static_cast<size_t>(g.output_layer)];
  CHECK(head.kind == LayerKind::final_conv);
  CHECK(head.kernel_h == 1);
  CHECK(head.kernel_w == 1);
  CHECK(head.out_channels == 4);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(make_arch_config(2, 3, 512, {512, 256, 128, 64}, true), std::invalid_argument);
  CHECK_THROWS_AS(make_arch_config(2, 3, 2048, {512, 256, 128, 64, 32}, true), std::invalid_argument);
  CHECK_THROWS_AS(make_arch_config(2, 3, 512, {512, 256, 512, 64, 32}, true), std::invalid_argument);
  CHECK_THROWS_AS(make_arch_config(0, 3, 512, {512, 256, 128, 64, 32}, true), std::invalid_argument);
  CHECK_NOTHROW(make_arch_config(3, 3, 1024, {512, 256, 128, 64, 32}, false));
}

TEST_CASE("default decoder widths halve step to step") {
  const ArchConfig a;
  for (int k = 0; k + 1 < 5; ++k) CHECK(a.decoder_channels[static_cast<size_t>(k)] == 2 * a.decoder_channels[static_cast<size_t>(k) + 1]);
}

TEST_CASE("parameter budgets") {
  const ParamReport r = count_parameters(build_graph(ArchConfig{}));
  CHECK(r.reduction_block == 2048 * 512 + 512 + 1024 * 512 + 512);
  CHECK(r.reduction_block == 1573888);
  CHECK(r.decoder_only == decoder_oracle());
  CHECK(r.final_conv == 32 * 2 + 2);
  // Encoder matches torchvision's resnet50 without its fc layer.
  CHECK(r.pretrained == 23508032);
  CHECK(std::abs(r.decoder_only - 7.79e6) / 7.79e6 <= 0.02);
  CHECK(std::abs(r.fully_trainable - 9.36e6) / 9.36e6 <= 0.02);
  CHECK(std::abs(r.total - 32.8e6) / 32.8e6 <= 0.02);
}

TEST_CASE("parameter accounting is consistent across configs") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 6);
    const int red = 64 * (1 + static_cast<int>(rng() % 16));
    std::vector<int> dec{256, 128, 64, 32, 16};
    if (trial % 2) dec = {512, 256, 128, 64, 32};
    const NetworkGraph g = build_graph(make_arch_config(n, 3, red, dec, trial % 3 == 0));
    const ParamReport r = count_parameters(g);
    std::int64_t sum = 0;
    for (const auto& [name, c] : r.per_layer) sum += c;
    CHECK(sum == r.total);
    CHECK(r.pretrained + r.fully_trainable == r.total);
    CHECK(r.fully_trainable == r.reduction_block + r.decoder_only + r.final_conv);
  }
}

TEST_CASE("forward_shape") {
  const NetworkGraph g = build_graph(ArchConfig{});
  CHECK(forward_shape(g, {1, 320, 320, 3}) == Shape4{1, 320, 320, 2});
  CHECK(forward_shape(g, {4, 608, 416, 3}) == Shape4{4, 608, 416, 2});
  try {
    forward_shape(g, {1, 300, 300, 3});
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("32") != std::string::npos);
  }
  CHECK_THROWS_AS(forward_shape(g, {1, 320, 320, 1}), std::invalid_argument);
}

TEST_CASE("shapes round trip and decoder steps double") {
  const NetworkGraph g = build_graph(ArchConfig{});
  std::mt19937 rng(11);
  for (int i = 0; i < 20; ++i) {
    const int h = 32 * (3 + static_cast<int>(rng() % 18)), w = 32 * (3 + static_cast<int>(rng() % 18));
    const Shape4 out = forward_shape(g, {2, h, w, 3});
    CHECK(out.height == h);
    CHECK(out.width == w);
    const auto shapes = infer_shapes(g, {2, h, w, 3});
    for (int k = 1; k < 5; ++k) {
      const Shape4 a = shapes[static_cast<size_t>(g.index_of("dec" + std::to_string(k) + "_conv"))];
      const Shape4 b = shapes[static_cast<size_t>(g.index_of("dec" + std::to_string(k + 1) + "_conv"))];
      CHECK(b.height == 2 * a.height);
      CHECK(b.width == 2 * a.width);
    }
  }
}

TEST_CASE("graph report lists every layer") {
  const NetworkGraph g = build_graph(ArchConfig{});
  const std::string report = format_graph_report(g, {1, 64, 64, 3});
  for (const auto& l : g.layers) CHECK(report.find(l.name) != std::string::npos);
  CHECK(report.find("total 32881570") != std::string::npos);
}
