#include "dhseg/weights.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace dhseg {

static_assert(std::endian::native == std::endian::little, "weight container assumes a little-endian host");

namespace {

void add_conv(std::vector<ParamSlot>& out, const std::string& prefix, Section section, int k, int in, int cout,
              bool bias, NormKind norm) {
  out.push_back({prefix + "/kernel", {cout, in, k, k}, ParamRole::kernel, section, true, in * k * k, cout * k * k});
  if (bias) out.push_back({prefix + "/bias", {cout}, ParamRole::bias, section, true, 0, 0});
  if (norm != NormKind::none) {
    const std::string n = prefix + "/norm/";
    out.push_back({n + "gamma", {cout}, ParamRole::norm_scale, section, true, 0, 0});
    out.push_back({n + "beta", {cout}, ParamRole::norm_offset, section, true, 0, 0});
    out.push_back({n + "moving_mean", {cout}, ParamRole::moving_mean, section, false, 0, 0});
    out.push_back({n + "moving_variance", {cout}, ParamRole::moving_variance, section, false, 0, 0});
  }
}

}  // namespace

std::vector<ParamSlot> parameter_slots(const NetworkGraph& graph) {
  std::vector<ParamSlot> out;
  for (const LayerSpec& l : graph.layers) {
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::final_conv:
        add_conv(out, l.name, l.section, l.kernel_h, l.in_channels, l.out_channels, l.bias, l.norm);
        break;
      case LayerKind::bottleneck_block:
      case LayerKind::downsample_bottleneck:
        add_conv(out, l.name + "/conv_a", l.section, 1, l.in_channels, l.mid_channels, false, l.norm);
        add_conv(out, l.name + "/conv_b", l.section, 3, l.mid_channels, l.mid_channels, false, l.norm);
        add_conv(out, l.name + "/conv_c", l.section, 1, l.mid_channels, l.out_channels, false, l.norm);
        if (l.kind == LayerKind::downsample_bottleneck) {
          add_conv(out, l.name + "/shortcut", l.section, 1, l.in_channels, l.out_channels, false, l.norm);
        }
        break;
      default:
        break;
    }
  }
  return out;
}

const Tensor& WeightStore::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("WeightStore: missing tensor " + name);
  return it->second;
}

Tensor& WeightStore::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("WeightStore: missing tensor " + name);
  return it->second;
}

WeightStore init_weights(const NetworkGraph& graph, std::uint64_t seed) {
  WeightStore store;
  std::mt19937_64 rng(seed);
  for (const ParamSlot& s : parameter_slots(graph)) {
    Tensor t(s.shape);
    switch (s.role) {
      case ParamRole::kernel: {
        const float limit = std::sqrt(6.0f / static_cast<float>(s.fan_in + s.fan_out));
        std::uniform_real_distribution<float> dist(-limit, limit);
        for (float& v : t.values()) v = dist(rng);
        break;
      }
      case ParamRole::norm_scale:
      case ParamRole::moving_variance:
        t.fill(1.0f);
        break;
      default:
        break;
    }
    store.set(s.name, std::move(t));
  }
  return store;
}

WeightStore zeros_like_slots(const NetworkGraph& graph) {
  WeightStore store;
  for (const ParamSlot& s : parameter_slots(graph)) store.set(s.name, Tensor(s.shape));
  return store;
}

void check_weights(const NetworkGraph& graph, const WeightStore& weights) {
  for (const ParamSlot& s : parameter_slots(graph)) {
    if (!weights.contains(s.name)) throw std::invalid_argument("weights: missing tensor " + s.name);
    const Tensor& t = weights.at(s.name);
    if (t.shape() != s.shape) {
      throw std::invalid_argument("weights: tensor " + s.name + " has shape " + shape_string(t.shape()) +
                                  ", graph expects " + shape_string(s.shape));
    }
  }
}

std::size_t import_encoder(const NetworkGraph& graph, const WeightStore& source, WeightStore& target) {
  std::size_t copied = 0;
  for (const ParamSlot& s : parameter_slots(graph)) {
    if (s.section != Section::encoder || !source.contains(s.name)) continue;
    const Tensor& t = source.at(s.name);
    if (t.shape() != s.shape) {
      throw std::invalid_argument("import_encoder: tensor " + s.name + " has shape " + shape_string(t.shape()) +
                                  ", expected " + shape_string(s.shape));
    }
    target.set(s.name, t);
    ++copied;
  }
  return copied;
}

namespace {

constexpr char kMagic[4] = {'D', 'H', 'S', 'W'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("weights: truncated file");
  return v;
}

}  // namespace

void save_weights(const WeightStore& weights, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("weights: cannot write " + path.string());
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(weights.size()));
  for (const auto& [name, t] : weights.entries()) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("weights: write failed for " + path.string());
}

WeightStore load_weights(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("weights: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("weights: " + path.string() + " is not a weight container");
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) throw std::runtime_error("weights: unsupported version " + std::to_string(version));
  const std::uint32_t count = get_u32(is);
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = get_u32(is);
    if (len > 4096) throw std::runtime_error("weights: implausible name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error("weights: truncated file");
    const std::uint32_t rank = get_u32(is);
    if (rank > 8) throw std::runtime_error("weights: implausible rank for " + name);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(get_u32(is));
    Tensor t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw std::runtime_error("weights: truncated payload for " + name);
    }
    store.set(name, std::move(t));
  }
  return store;
}

}  // namespace dhseg
