#include "dhseg/netgraph.hpp"

#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace dhseg {

void validate(const ArchConfig& c) {
  if (c.n_classes < 1) throw std::invalid_argument("ArchConfig: n_classes must be positive");
  if (c.input_channels < 1) throw std::invalid_argument("ArchConfig: input_channels must be positive");
  if (c.reduction_channels < 1) throw std::invalid_argument("ArchConfig: reduction_channels must be positive");
  if (c.reduction_channels > 1024) {
    throw std::invalid_argument("ArchConfig: reduction_channels " + std::to_string(c.reduction_channels) +
                                " exceeds 1024, the smallest reduced skip width");
  }
  for (size_t i = 0; i < c.decoder_channels.size(); ++i) {
    if (c.decoder_channels[i] < 1) throw std::invalid_argument("ArchConfig: decoder_channels must be positive");
    if (i > 0 && c.decoder_channels[i] > c.decoder_channels[i - 1]) {
      throw std::invalid_argument("ArchConfig: decoder_channels must be non-increasing from the deepest step");
    }
  }
}

ArchConfig make_arch_config(int n_classes, int input_channels, int reduction_channels,
                            const std::vector<int>& decoder_channels, bool pretrained_encoder) {
  if (decoder_channels.size() != 5) {
    throw std::invalid_argument("ArchConfig: decoder_channels needs exactly 5 entries, got " +
                                std::to_string(decoder_channels.size()));
  }
  ArchConfig c;
  c.n_classes = n_classes;
  c.input_channels = input_channels;
  c.reduction_channels = reduction_channels;
  for (size_t i = 0; i < 5; ++i) c.decoder_channels[i] = decoder_channels[i];
  c.pretrained_encoder = pretrained_encoder;
  validate(c);
  return c;
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::input: return "input";
    case LayerKind::conv: return "conv";
    case LayerKind::bottleneck_block: return "bottleneck_block";
    case LayerKind::downsample_bottleneck: return "downsample_bottleneck";
    case LayerKind::max_pool: return "max_pool";
    case LayerKind::bilinear_upsample: return "bilinear_upsample";
    case LayerKind::concat: return "concat";
    case LayerKind::relu: return "relu";
    case LayerKind::final_conv: return "final_conv";
  }
  return "?";
}

std::string_view to_string(Section section) {
  switch (section) {
    case Section::input: return "input";
    case Section::encoder: return "encoder";
    case Section::reduction: return "reduction";
    case Section::decoder: return "decoder";
    case Section::head: return "head";
  }
  return "?";
}

int NetworkGraph::index_of(std::string_view name) const {
  for (size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("NetworkGraph: no layer named " + std::string(name));
}

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(NetworkGraph& g) : g_(g) {}

  int add(LayerSpec spec) {
    g_.layers.push_back(std::move(spec));
    return static_cast<int>(g_.layers.size()) - 1;
  }

  const LayerSpec& at(int i) const { return g_.layers[static_cast<size_t>(i)]; }

  int conv(std::string name, Section section, int input, int kernel, int out, int stride, NormKind norm,
           bool bias, bool pretrained) {
    const LayerSpec& src = at(input);
    LayerSpec s;
    s.name = std::move(name);
    s.kind = LayerKind::conv;
    s.section = section;
    s.inputs = {input};
    s.kernel_h = s.kernel_w = kernel;
    s.in_channels = src.out_channels;
    s.out_channels = out;
    s.stride = stride;
    s.norm = norm;
    s.bias = bias;
    s.pretrained = pretrained;
    s.level = src.level + (stride == 2 ? 1 : 0);
    return add(std::move(s));
  }

  int unary(std::string name, LayerKind kind, Section section, int input) {
    const LayerSpec& src = at(input);
    LayerSpec s;
    s.name = std::move(name);
    s.kind = kind;
    s.section = section;
    s.inputs = {input};
    s.in_channels = s.out_channels = src.out_channels;
    s.level = src.level;
    s.trainable = false;
    if (kind == LayerKind::max_pool) {
      s.kernel_h = s.kernel_w = 3;
      s.stride = 2;
      s.level += 1;
    } else if (kind == LayerKind::bilinear_upsample) {
      s.level -= 1;
    }
    return add(std::move(s));
  }

  int block(std::string name, int input, int mid, int stride, bool projection, bool pretrained) {
    const LayerSpec& src = at(input);
    LayerSpec s;
    s.name = std::move(name);
    s.kind = projection ? LayerKind::downsample_bottleneck : LayerKind::bottleneck_block;
    s.section = Section::encoder;
    s.inputs = {input};
    s.kernel_h = s.kernel_w = 3;
    s.in_channels = src.out_channels;
    s.mid_channels = mid;
    s.out_channels = 4 * mid;
    s.stride = stride;
    s.norm = NormKind::frozen_batch_norm;
    s.pretrained = pretrained;
    s.level = src.level + (stride == 2 ? 1 : 0);
    return add(std::move(s));
  }

 private:
  NetworkGraph& g_;
};

}  // namespace

NetworkGraph build_graph(const ArchConfig& config) {
  validate(config);
  NetworkGraph g;
  g.config = config;
  GraphBuilder b(g);
  const bool pre = config.pretrained_encoder;

  LayerSpec in;
  in.name = "input";
  in.kind = LayerKind::input;
  in.section = Section::input;
  in.in_channels = in.out_channels = config.input_channels;
  in.trainable = false;
  const int input = b.add(in);

  // Contracting path: five stages, each halving the spatial size.
  int x = b.conv("conv1", Section::encoder, input, 7, 64, 2, NormKind::frozen_batch_norm, false, pre);
  const int stage1 = b.unary("conv1_relu", LayerKind::relu, Section::encoder, x);
  x = b.unary("pool1", LayerKind::max_pool, Section::encoder, stage1);

  struct Stage { int blocks, mid, stride; };
  constexpr Stage stages[] = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
  std::array<int, 5> skips{};
  skips[0] = stage1;
  for (int s = 0; s < 4; ++s) {
    for (int i = 0; i < stages[s].blocks; ++i) {
      const std::string name = "block" + std::to_string(s + 2) + "_" + std::to_string(i + 1);
      x = b.block(name, x, stages[s].mid, i == 0 ? stages[s].stride : 1, i == 0, pre);
    }
    skips[static_cast<size_t>(s + 1)] = x;
  }

  // 1x1 reductions of the two widest skip maps.
  const int red5 = b.conv("reduce5", Section::reduction, skips[4], 1, config.reduction_channels, 1,
                          NormKind::none, true, false);
  const int red4 = b.conv("reduce4", Section::reduction, skips[3], 1, config.reduction_channels, 1,
                          NormKind::none, true, false);

  // Expanding path. Skip sources, deepest first: reduced S/16, S/8, S/4, S/2,
  // then the raw input at full resolution.
  const std::array<int, 5> step_skip{red4, skips[2], skips[1], skips[0], input};
  x = red5;
  for (int step = 1; step <= 5; ++step) {
    const std::string tag = std::to_string(step);
    const int up = b.unary("up" + tag, LayerKind::bilinear_upsample, Section::decoder, x);
    const int skip = step_skip[static_cast<size_t>(step - 1)];
    LayerSpec cat;
    cat.name = "concat" + tag;
    cat.kind = LayerKind::concat;
    cat.section = Section::decoder;
    cat.inputs = {up, skip};
    cat.in_channels = cat.out_channels = b.at(up).out_channels + b.at(skip).out_channels;
    cat.level = b.at(up).level;
    cat.trainable = false;
    const int c = b.add(cat);
    g.skip_links.push_back({skip, step});
    const int conv = b.conv("dec" + tag + "_conv", Section::decoder, c, 3,
                            config.decoder_channels[static_cast<size_t>(step - 1)], 1, NormKind::batch_renorm,
                            false, false);
    x = b.unary("dec" + tag + "_relu", LayerKind::relu, Section::decoder, conv);
  }

  LayerSpec head;
  head.name = "logits";
  head.kind = LayerKind::final_conv;
  head.section = Section::head;
  head.inputs = {x};
  head.kernel_h = head.kernel_w = 1;
  head.in_channels = b.at(x).out_channels;
  head.out_channels = config.n_classes;
  head.bias = true;
  head.level = b.at(x).level;
  g.output_layer = b.add(head);
  return g;
}

std::int64_t layer_parameter_count(const LayerSpec& l) {
  auto conv = [](std::int64_t k, std::int64_t in, std::int64_t out) { return k * k * in * out; };
  auto norm = [](NormKind n, std::int64_t ch) -> std::int64_t { return n == NormKind::none ? 0 : 2 * ch; };
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::final_conv:
      return conv(l.kernel_h, l.in_channels, l.out_channels) + (l.bias ? l.out_channels : 0) +
             norm(l.norm, l.out_channels);
    case LayerKind::bottleneck_block:
    case LayerKind::downsample_bottleneck: {
      const std::int64_t mid = l.mid_channels;
      std::int64_t n = conv(1, l.in_channels, mid) + conv(3, mid, mid) + conv(1, mid, l.out_channels) +
                       norm(l.norm, mid) * 2 + norm(l.norm, l.out_channels);
      if (l.kind == LayerKind::downsample_bottleneck) {
        n += conv(1, l.in_channels, l.out_channels) + norm(l.norm, l.out_channels);
      }
      return n;
    }
    default:
      return 0;
  }
}

ParamReport count_parameters(const NetworkGraph& graph) {
  ParamReport r;
  for (const LayerSpec& l : graph.layers) {
    const std::int64_t n = layer_parameter_count(l);
    r.per_layer.emplace_back(l.name, n);
    r.total += n;
    switch (l.section) {
      case Section::encoder: r.pretrained += n; break;
      case Section::reduction: r.reduction_block += n; break;
      case Section::decoder: r.decoder_only += n; break;
      case Section::head: r.final_conv += n; break;
      case Section::input: break;
    }
  }
  r.fully_trainable = r.reduction_block + r.decoder_only + r.final_conv;
  return r;
}

std::vector<Shape4> infer_shapes(const NetworkGraph& graph, Shape4 input) {
  if (input.batch < 1) throw std::invalid_argument("forward_shape: batch must be positive");
  if (input.channels != graph.config.input_channels) {
    throw std::invalid_argument("forward_shape: expected " + std::to_string(graph.config.input_channels) +
                                " input channels, got " + std::to_string(input.channels));
  }
  if (input.height <= 0 || input.width <= 0 || input.height % kEncoderStride || input.width % kEncoderStride) {
    throw std::invalid_argument("forward_shape: spatial size " + std::to_string(input.height) + "x" +
                                std::to_string(input.width) + " must be a positive multiple of " +
                                std::to_string(kEncoderStride) + " (pad the image or use forward())");
  }
  std::vector<Shape4> shapes;
  shapes.reserve(graph.layers.size());
  for (const LayerSpec& l : graph.layers) {
    if (l.kind == LayerKind::input) {
      shapes.push_back(input);
      continue;
    }
    const Shape4 src = shapes[static_cast<size_t>(l.inputs.front())];
    Shape4 out = src;
    switch (l.kind) {
      case LayerKind::bilinear_upsample:
        out.height *= 2;
        out.width *= 2;
        break;
      case LayerKind::concat: {
        out.channels = 0;
        for (int i : l.inputs) {
          const Shape4& s = shapes[static_cast<size_t>(i)];
          if (s.height != src.height || s.width != src.width) {
            throw std::logic_error("forward_shape: concat inputs disagree at " + l.name);
          }
          out.channels += s.channels;
        }
        break;
      }
      default:
        if (l.stride == 2) {
          out.height = (out.height + 1) / 2;
          out.width = (out.width + 1) / 2;
        }
        break;
    }
    if (l.kind != LayerKind::concat) out.channels = l.out_channels;
    shapes.push_back(out);
  }
  return shapes;
}

Shape4 forward_shape(const NetworkGraph& graph, Shape4 input) {
  return infer_shapes(graph, input)[static_cast<size_t>(graph.output_layer)];
}

std::string format_graph_report(const NetworkGraph& graph, Shape4 input) {
  const auto shapes = infer_shapes(graph, input);
  std::ostringstream os;
  os << std::left << std::setw(14) << "name" << std::setw(23) << "kind" << std::right << std::setw(7) << "in"
     << std::setw(7) << "out" << "  " << std::left << std::setw(22) << "output (n,h,w,c)" << std::right
     << std::setw(11) << "params" << "  pretrained\n";
  for (size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    const Shape4& s = shapes[i];
    std::ostringstream shape;
    shape << '(' << s.batch << ',' << s.height << ',' << s.width << ',' << s.channels << ')';
    os << std::left << std::setw(14) << l.name << std::setw(23) << to_string(l.kind) << std::right << std::setw(7)
       << l.in_channels << std::setw(7) << l.out_channels << "  " << std::left << std::setw(22) << shape.str()
       << std::right << std::setw(11) << layer_parameter_count(l) << "  " << (l.pretrained ? "yes" : "no") << '\n';
  }
  const ParamReport r = count_parameters(graph);
  os << "total " << r.total << "  pretrained " << r.pretrained << "  fully_trainable " << r.fully_trainable
     << " (reduction " << r.reduction_block << ", decoder " << r.decoder_only << ", final " << r.final_conv
     << ")\n";
  return os.str();
}

}  // namespace dhseg
