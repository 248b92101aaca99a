#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dhseg/netgraph.hpp"
#include "dhseg/tensor.hpp"

namespace dhseg {

enum class ParamRole { kernel, bias, norm_scale, norm_offset, moving_mean, moving_variance };

/// One tensor the graph expects in a WeightStore.
struct ParamSlot {
  std::string name;
  std::vector<int> shape;
  ParamRole role = ParamRole::kernel;
  Section section = Section::encoder;
  /// Updated by the optimizer (moving statistics are not).
  bool trainable = true;
  int fan_in = 0;
  int fan_out = 0;
};

/// Every tensor name/shape the graph reads, in a stable order. Names are
/// "<layer>/kernel", "<layer>/bias", "<layer>/norm/{gamma,beta,moving_mean,moving_variance}";
/// residual blocks nest as "<layer>/{conv_a,conv_b,conv_c,shortcut}/...".
std::vector<ParamSlot> parameter_slots(const NetworkGraph& graph);

/// Flat name -> tensor container.
class WeightStore {
 public:
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  void set(const std::string& name, Tensor t) { tensors_[name] = std::move(t); }
  std::size_t size() const { return tensors_.size(); }
  const std::map<std::string, Tensor>& entries() const { return tensors_; }
  std::map<std::string, Tensor>& entries() { return tensors_; }

  friend bool operator==(const WeightStore&, const WeightStore&) = default;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Xavier-uniform kernels, zero biases, unit norm scales, zero/unit moving
/// statistics. Deterministic in `seed`.
WeightStore init_weights(const NetworkGraph& graph, std::uint64_t seed);

/// Zero-initialized tensors matching every slot (used for gradients).
WeightStore zeros_like_slots(const NetworkGraph& graph);

/// Throws std::invalid_argument naming the first missing or mis-shaped tensor.
void check_weights(const NetworkGraph& graph, const WeightStore& weights);

/// Copies every encoder tensor present in `source` into `target`, checking
/// shapes. Returns the number of tensors copied.
std::size_t import_encoder(const NetworkGraph& graph, const WeightStore& source, WeightStore& target);

// Container file: "DHSW" magic, u32 version (1), u32 entry count, then per
// entry u32 name length, name bytes, u32 rank, u32 dims[rank], and the raw
// little-endian f32 payload. Entries are written in name order.
void save_weights(const WeightStore& weights, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path);

}  // namespace dhseg
