#include "dhseg/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dhseg {

namespace {

struct NormTrace {
  // Frozen norm: the pre-normalization input. Batch renorm: (x - mean_B) / sigma_B.
  Tensor saved;
  std::vector<float> batch_mean, batch_var, batch_sigma, r, d;
};

constexpr float kNormEpsilon = 1e-3f;

struct ConvTrace {
  NormTrace norm;
};

struct BlockTrace {
  ConvTrace a, b, c, shortcut;
  Tensor a_act, b_act;
};

void relu_inplace(Tensor& t) {
  for (float& v : t.values()) v = v > 0.0f ? v : 0.0f;
}

// dy *= (activation > 0)
void relu_mask(Tensor& dy, const Tensor& activation) {
  const float* a = activation.data();
  float* g = dy.data();
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(a[i] > 0.0f)) g[i] = 0.0f;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

struct Network::Trace {
  std::vector<Tensor> outputs;
  std::vector<ConvTrace> convs;
  std::vector<BlockTrace> blocks;
  std::vector<std::vector<int>> pool_argmax;
  // (moving mean name prefix, batch mean, batch var) for every renormalized layer.
  struct Stats {
    std::string prefix;
    std::vector<float> mean, var;
  };
  std::vector<Stats> renorm_stats;
};

Network::TracePtr Network::make_trace() { return TracePtr(new Trace); }
void Network::TraceDeleter::operator()(Trace* t) const { delete t; }

Network::Network(const NetworkGraph& graph, const WeightStore& weights, const Backend& backend)
    : graph_(graph), weights_(weights), backend_(backend) {
  check_weights(graph, weights);
}

Network::~Network() = default;

namespace {

class Executor {
 public:
  Executor(const WeightStore& w, const Backend& b, const BatchRenormSettings* renorm)
      : w_(w), backend_(b), renorm_(renorm) {}

  Tensor conv_forward(const Tensor& x, const std::string& prefix, ConvGeometry g, bool bias, NormKind norm,
                      ConvTrace* tr) const {
    Tensor y;
    backend_.conv2d(x, w_.at(prefix + "/kernel"), bias ? &w_.at(prefix + "/bias") : nullptr, g, y);
    if (norm == NormKind::none) return y;
    const std::string n = prefix + "/norm/";
    const Tensor& gamma = w_.at(n + "gamma");
    const Tensor& beta = w_.at(n + "beta");
    const Tensor& mm = w_.at(n + "moving_mean");
    const Tensor& mv = w_.at(n + "moving_variance");
    const float eps = kNormEpsilon;
    const int channels = y.c();
    const std::size_t plane = y.plane();

    if (norm == NormKind::batch_renorm && renorm_) {
      NormTrace& t = tr->norm;
      t.batch_mean.assign(channels, 0.0f);
      t.batch_var.assign(channels, 0.0f);
      t.batch_sigma.assign(channels, 0.0f);
      t.r.assign(channels, 0.0f);
      t.d.assign(channels, 0.0f);
      t.saved.reset(y.shape());
      const double count = static_cast<double>(y.n()) * plane;
      for (int c = 0; c < channels; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int b = 0; b < y.n(); ++b) {
          const float* p = y.plane_ptr(b, c);
          for (std::size_t i = 0; i < plane; ++i) sum += p[i];
        }
        const double mean = sum / count;
        for (int b = 0; b < y.n(); ++b) {
          const float* p = y.plane_ptr(b, c);
          for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        const double var = sq / count;
        const double sigma_b = std::sqrt(var + eps);
        const double sigma = std::sqrt(static_cast<double>(mv[c]) + eps);
        const double r = std::clamp(sigma_b / sigma, static_cast<double>(renorm_->r_min),
                                    static_cast<double>(renorm_->r_max));
        const double d = std::clamp((mean - mm[c]) / sigma, -static_cast<double>(renorm_->d_max),
                                    static_cast<double>(renorm_->d_max));
        t.batch_mean[c] = static_cast<float>(mean);
        t.batch_var[c] = static_cast<float>(var);
        t.batch_sigma[c] = static_cast<float>(sigma_b);
        t.r[c] = static_cast<float>(r);
        t.d[c] = static_cast<float>(d);
        for (int b = 0; b < y.n(); ++b) {
          float* p = y.plane_ptr(b, c);
          float* s = t.saved.plane_ptr(b, c);
          for (std::size_t i = 0; i < plane; ++i) {
            const double nrm = (p[i] - mean) / sigma_b;
            s[i] = static_cast<float>(nrm);
            p[i] = static_cast<float>(gamma[c] * (nrm * r + d) + beta[c]);
          }
        }
      }
      return y;
    }

    if (tr) tr->norm.saved = y;
    for (int c = 0; c < channels; ++c) {
      const float scale = gamma[c] / std::sqrt(mv[c] + eps);
      const float shift = beta[c] - mm[c] * scale;
      for (int b = 0; b < y.n(); ++b) {
        float* p = y.plane_ptr(b, c);
        for (std::size_t i = 0; i < plane; ++i) p[i] = p[i] * scale + shift;
      }
    }
    return y;
  }

  // Returns dx (empty when !need_dx).
  Tensor conv_backward(const Tensor& x, const std::string& prefix, ConvGeometry g, bool bias, NormKind norm,
                       const ConvTrace& tr, Tensor dy, bool need_dx, WeightStore& grads) const {
    if (norm != NormKind::none) {
      const std::string n = prefix + "/norm/";
      const Tensor& gamma = w_.at(n + "gamma");
      Tensor& dgamma = grads.at(n + "gamma");
      Tensor& dbeta = grads.at(n + "beta");
      const std::size_t plane = dy.plane();
      const float eps = kNormEpsilon;
      if (norm == NormKind::batch_renorm) {
        const NormTrace& t = tr.norm;
        const double count = static_cast<double>(dy.n()) * plane;
        for (int c = 0; c < dy.c(); ++c) {
          const double d = t.d[c];
          const double r = t.r[c];
          double sum_dy = 0.0, sum_dy_n = 0.0;
          for (int b = 0; b < dy.n(); ++b) {
            const float* g = dy.plane_ptr(b, c);
            const float* s = t.saved.plane_ptr(b, c);
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += g[i];
              sum_dy_n += static_cast<double>(g[i]) * s[i];
            }
          }
          dgamma[c] += static_cast<float>(sum_dy_n * r + sum_dy * d);
          dbeta[c] += static_cast<float>(sum_dy);
          // dn = dy * gamma * r; dx = (dn - mean(dn) - n * mean(dn * n)) / sigma_B
          const double k = gamma[c] * r;
          const double mean_dn = k * sum_dy / count;
          const double mean_dn_n = k * sum_dy_n / count;
          const double inv_sigma = 1.0 / t.batch_sigma[c];
          for (int b = 0; b < dy.n(); ++b) {
            float* g = dy.plane_ptr(b, c);
            const float* s = t.saved.plane_ptr(b, c);
            for (std::size_t i = 0; i < plane; ++i) {
              g[i] = static_cast<float>((k * g[i] - mean_dn - s[i] * mean_dn_n) * inv_sigma);
            }
          }
        }
      } else {
        const Tensor& mm = w_.at(n + "moving_mean");
        const Tensor& mv = w_.at(n + "moving_variance");
        for (int c = 0; c < dy.c(); ++c) {
          const float inv_sigma = 1.0f / std::sqrt(mv[c] + eps);
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int b = 0; b < dy.n(); ++b) {
            float* g = dy.plane_ptr(b, c);
            const float* pre = tr.norm.saved.plane_ptr(b, c);
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += g[i];
              sum_dy_xhat += static_cast<double>(g[i]) * (pre[i] - mm[c]) * inv_sigma;
              g[i] *= gamma[c] * inv_sigma;
            }
          }
          dgamma[c] += static_cast<float>(sum_dy_xhat);
          dbeta[c] += static_cast<float>(sum_dy);
        }
      }
    }
    Tensor dx;
    backend_.conv2d_backward(x, w_.at(prefix + "/kernel"), dy, g, need_dx ? &dx : nullptr,
                             grads.at(prefix + "/kernel"), bias ? &grads.at(prefix + "/bias") : nullptr);
    return dx;
  }

  Tensor block_forward(const LayerSpec& l, const Tensor& x, BlockTrace* tr) const {
    const std::string& p = l.name;
    Tensor a = conv_forward(x, p + "/conv_a", ConvGeometry::same(1), false, l.norm, tr ? &tr->a : nullptr);
    relu_inplace(a);
    Tensor b = conv_forward(a, p + "/conv_b", ConvGeometry::same(3, l.stride), false, l.norm, tr ? &tr->b : nullptr);
    relu_inplace(b);
    Tensor out = conv_forward(b, p + "/conv_c", ConvGeometry::same(1), false, l.norm, tr ? &tr->c : nullptr);
    if (l.kind == LayerKind::downsample_bottleneck) {
      add_inplace(out, conv_forward(x, p + "/shortcut", ConvGeometry{1, l.stride, 0}, false, l.norm,
                                    tr ? &tr->shortcut : nullptr));
    } else {
      add_inplace(out, x);
    }
    relu_inplace(out);
    if (tr) {
      tr->a_act = std::move(a);
      tr->b_act = std::move(b);
    }
    return out;
  }

  Tensor block_backward(const LayerSpec& l, const Tensor& x, const Tensor& out, const BlockTrace& tr, Tensor dout,
                        WeightStore& grads) const {
    const std::string& p = l.name;
    relu_mask(dout, out);
    Tensor db = conv_backward(tr.b_act, p + "/conv_c", ConvGeometry::same(1), false, l.norm, tr.c, dout, true, grads);
    relu_mask(db, tr.b_act);
    Tensor da = conv_backward(tr.a_act, p + "/conv_b", ConvGeometry::same(3, l.stride), false, l.norm, tr.b,
                              std::move(db), true, grads);
    relu_mask(da, tr.a_act);
    Tensor dx = conv_backward(x, p + "/conv_a", ConvGeometry::same(1), false, l.norm, tr.a, std::move(da), true, grads);
    if (l.kind == LayerKind::downsample_bottleneck) {
      add_inplace(dx, conv_backward(x, p + "/shortcut", ConvGeometry{1, l.stride, 0}, false, l.norm, tr.shortcut,
                                    std::move(dout), true, grads));
    } else {
      add_inplace(dx, dout);
    }
    return dx;
  }

  static Tensor max_pool_forward(const Tensor& x, std::vector<int>* argmax) {
    const ConvGeometry g = ConvGeometry::same(3, 2);
    const int oh = g.output_extent(x.h()), ow = g.output_extent(x.w());
    Tensor y(x.n(), x.c(), oh, ow);
    if (argmax) argmax->assign(y.size(), 0);
    std::size_t idx = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int c = 0; c < x.c(); ++c) {
        const float* src = x.plane_ptr(n, c);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox, ++idx) {
            float best = -std::numeric_limits<float>::infinity();
            int best_i = 0;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * 2 - 1 + ky;
              if (iy < 0 || iy >= x.h()) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * 2 - 1 + kx;
                if (ix < 0 || ix >= x.w()) continue;
                const float v = src[iy * x.w() + ix];
                if (v > best) {
                  best = v;
                  best_i = iy * x.w() + ix;
                }
              }
            }
            y[idx] = best;
            if (argmax) (*argmax)[idx] = best_i;
          }
      }
    return y;
  }

  static Tensor max_pool_backward(const Tensor& x_shape_like, const std::vector<int>& argmax, const Tensor& dy) {
    Tensor dx(x_shape_like.shape());
    const std::size_t out_plane = dy.plane();
    for (int n = 0; n < dy.n(); ++n)
      for (int c = 0; c < dy.c(); ++c) {
        float* d = dx.plane_ptr(n, c);
        const float* g = dy.plane_ptr(n, c);
        const std::size_t base = (static_cast<std::size_t>(n) * dy.c() + c) * out_plane;
        for (std::size_t i = 0; i < out_plane; ++i) d[argmax[base + i]] += g[i];
      }
    return dx;
  }

  const Backend& backend() const { return backend_; }

 private:
  const WeightStore& w_;
  const Backend& backend_;
  const BatchRenormSettings* renorm_;
};

ConvGeometry layer_geometry(const LayerSpec& l) { return ConvGeometry::same(l.kernel_h, l.stride); }

}  // namespace

Tensor Network::run(const Tensor& input, const BatchRenormSettings* renorm, Trace* trace) const {
  if (input.rank() != 4) throw std::invalid_argument("Network: input must be (n, c, h, w)");
  // Validates channels and divisibility.
  (void)infer_shapes(graph_, {input.n(), input.h(), input.w(), input.c()});

  const auto& layers = graph_.layers;
  const std::size_t count = layers.size();
  Executor ex(weights_, backend_, renorm);

  // Without a trace, drop activations after their last consumer.
  std::vector<std::size_t> last_use(count, 0);
  for (std::size_t i = 0; i < count; ++i)
    for (int src : layers[i].inputs) last_use[static_cast<std::size_t>(src)] = i;
  last_use[static_cast<std::size_t>(graph_.output_layer)] = count;

  std::vector<Tensor> local;
  std::vector<Tensor>& out = trace ? trace->outputs : local;
  out.assign(count, Tensor{});
  if (trace) {
    trace->convs.assign(count, ConvTrace{});
    trace->blocks.assign(count, BlockTrace{});
    trace->pool_argmax.assign(count, {});
    trace->renorm_stats.clear();
  }

  for (std::size_t i = 0; i < count; ++i) {
    const LayerSpec& l = layers[i];
    auto in = [&](std::size_t k) -> const Tensor& { return out[static_cast<std::size_t>(l.inputs[k])]; };
    switch (l.kind) {
      case LayerKind::input:
        out[i] = input;
        break;
      case LayerKind::conv:
      case LayerKind::final_conv: {
        ConvTrace* ct = trace ? &trace->convs[i] : nullptr;
        out[i] = ex.conv_forward(in(0), l.name, layer_geometry(l), l.bias, l.norm, ct);
        if (trace && renorm && l.norm == NormKind::batch_renorm) {
          trace->renorm_stats.push_back({l.name + "/norm/", ct->norm.batch_mean, ct->norm.batch_var});
        }
        break;
      }
      case LayerKind::bottleneck_block:
      case LayerKind::downsample_bottleneck:
        out[i] = ex.block_forward(l, in(0), trace ? &trace->blocks[i] : nullptr);
        break;
      case LayerKind::max_pool:
        out[i] = Executor::max_pool_forward(in(0), trace ? &trace->pool_argmax[i] : nullptr);
        break;
      case LayerKind::relu:
        out[i] = in(0);
        relu_inplace(out[i]);
        break;
      case LayerKind::bilinear_upsample:
        backend_.upsample_bilinear2x(in(0), out[i]);
        break;
      case LayerKind::concat: {
        std::vector<const Tensor*> parts;
        for (std::size_t k = 0; k < l.inputs.size(); ++k) parts.push_back(&in(k));
        out[i] = concat_channels(parts);
        break;
      }
    }
    if (!trace) {
      for (int src : l.inputs) {
        if (last_use[static_cast<std::size_t>(src)] == i) out[static_cast<std::size_t>(src)] = Tensor{};
      }
    }
  }
  return trace ? out[static_cast<std::size_t>(graph_.output_layer)]
               : std::move(out[static_cast<std::size_t>(graph_.output_layer)]);
}

Tensor Network::logits(const Tensor& input) const { return run(input, nullptr, nullptr); }

Tensor Network::forward_train(const Tensor& input, const BatchRenormSettings& renorm, Trace& trace) const {
  return run(input, &renorm, &trace);
}

void Network::backward(const Trace& trace, const Tensor& dlogits, WeightStore& grads) const {
  const auto& layers = graph_.layers;
  const std::size_t count = layers.size();
  if (trace.outputs.size() != count) throw std::logic_error("Network::backward: trace does not match graph");
  // r and d are recorded in the trace and treated as constants.
  BatchRenormSettings renorm;
  Executor ex(weights_, backend_, &renorm);

  std::vector<Tensor> grad(count);
  grad[static_cast<std::size_t>(graph_.output_layer)] = dlogits;
  for (std::size_t ii = count; ii-- > 0;) {
    const LayerSpec& l = layers[ii];
    if (grad[ii].empty() || l.kind == LayerKind::input) continue;
    Tensor g = std::move(grad[ii]);
    grad[ii] = Tensor{};
    auto src = [&](std::size_t k) { return static_cast<std::size_t>(l.inputs[k]); };
    auto needs_grad = [&](std::size_t k) { return layers[src(k)].kind != LayerKind::input; };
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::final_conv: {
        Tensor dx = ex.conv_backward(trace.outputs[src(0)], l.name, layer_geometry(l), l.bias, l.norm,
                                     trace.convs[ii], std::move(g), needs_grad(0), grads);
        if (needs_grad(0)) add_inplace(grad[src(0)], dx);
        break;
      }
      case LayerKind::bottleneck_block:
      case LayerKind::downsample_bottleneck:
        add_inplace(grad[src(0)], ex.block_backward(l, trace.outputs[src(0)], trace.outputs[ii], trace.blocks[ii],
                                                    std::move(g), grads));
        break;
      case LayerKind::max_pool:
        add_inplace(grad[src(0)], Executor::max_pool_backward(trace.outputs[src(0)], trace.pool_argmax[ii], g));
        break;
      case LayerKind::relu:
        relu_mask(g, trace.outputs[ii]);
        add_inplace(grad[src(0)], g);
        break;
      case LayerKind::bilinear_upsample: {
        Tensor dx;
        backend_.upsample_bilinear2x_backward(g, dx);
        add_inplace(grad[src(0)], dx);
        break;
      }
      case LayerKind::concat: {
        std::vector<int> widths;
        for (std::size_t k = 0; k < l.inputs.size(); ++k) widths.push_back(trace.outputs[src(k)].c());
        auto parts = split_channels(g, widths);
        for (std::size_t k = 0; k < parts.size(); ++k)
          if (needs_grad(k)) add_inplace(grad[src(k)], parts[k]);
        break;
      }
      case LayerKind::input:
        break;
    }
  }
}

void Network::update_moving_statistics(const Trace& trace, float momentum, WeightStore& weights) {
  for (const auto& s : trace.renorm_stats) {
    Tensor& mm = weights.at(s.prefix + "moving_mean");
    Tensor& mv = weights.at(s.prefix + "moving_variance");
    for (std::size_t c = 0; c < s.mean.size(); ++c) {
      mm[c] += (1.0f - momentum) * (s.mean[c] - mm[c]);
      mv[c] += (1.0f - momentum) * (s.var[c] - mv[c]);
    }
  }
}

void apply_activation(Tensor& scores, OutputActivation activation) {
  if (activation == OutputActivation::sigmoid) {
    for (float& v : scores.values()) v = 1.0f / (1.0f + std::exp(-v));
    return;
  }
  const std::size_t plane = scores.plane();
  const int channels = scores.c();
  std::vector<float> mx(plane), sum(plane);
  for (int n = 0; n < scores.n(); ++n) {
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<float>::infinity());
    std::fill(sum.begin(), sum.end(), 0.0f);
    for (int c = 0; c < channels; ++c) {
      const float* p = scores.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) mx[i] = std::max(mx[i], p[i]);
    }
    for (int c = 0; c < channels; ++c) {
      float* p = scores.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        p[i] = std::exp(p[i] - mx[i]);
        sum[i] += p[i];
      }
    }
    for (int c = 0; c < channels; ++c) {
      float* p = scores.plane_ptr(n, c);
      for (std::size_t i = 0; i < plane; ++i) p[i] /= sum[i];
    }
  }
}

Tensor forward(const NetworkGraph& graph, const WeightStore& weights, const Tensor& batch,
               OutputActivation activation, const Backend& backend) {
  if (batch.rank() != 4) throw std::invalid_argument("forward: batch must be (n, c, h, w)");
  const int h = batch.h(), w = batch.w();
  const int ph = (h + kEncoderStride - 1) / kEncoderStride * kEncoderStride;
  const int pw = (w + kEncoderStride - 1) / kEncoderStride * kEncoderStride;
  const int top = (ph - h) / 2, left = (pw - w) / 2;
  Network net(graph, weights, backend);
  Tensor scores;
  if (ph == h && pw == w) {
    scores = net.logits(batch);
  } else {
    Tensor padded(batch.n(), batch.c(), ph, pw);
    for (int n = 0; n < batch.n(); ++n)
      for (int c = 0; c < batch.c(); ++c)
        for (int y = 0; y < h; ++y) {
          const float* src = batch.plane_ptr(n, c) + static_cast<std::size_t>(y) * w;
          std::copy(src, src + w, padded.plane_ptr(n, c) + static_cast<std::size_t>(y + top) * pw + left);
        }
    Tensor full = net.logits(padded);
    scores.reset({full.n(), full.c(), h, w});
    for (int n = 0; n < full.n(); ++n)
      for (int c = 0; c < full.c(); ++c)
        for (int y = 0; y < h; ++y) {
          const float* src = full.plane_ptr(n, c) + static_cast<std::size_t>(y + top) * pw + left;
          std::copy(src, src + w, scores.plane_ptr(n, c) + static_cast<std::size_t>(y) * w);
        }
  }
  apply_activation(scores, activation);
  return scores;
}

std::vector<ProbabilityMap> to_probability_maps(const Tensor& p) {
  std::vector<ProbabilityMap> maps;
  maps.reserve(static_cast<std::size_t>(p.n()));
  for (int n = 0; n < p.n(); ++n) {
    ProbabilityMap m(p.h(), p.w(), p.c());
    for (int c = 0; c < p.c(); ++c) {
      const float* src = p.plane_ptr(n, c);
      for (int y = 0; y < p.h(); ++y)
        for (int x = 0; x < p.w(); ++x) m(y, x, c) = src[static_cast<std::size_t>(y) * p.w() + x];
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

}  // namespace dhseg
