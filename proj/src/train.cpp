#include "dhseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace dhseg {

std::string_view to_string(LossMode mode) { return mode == LossMode::softmax_ce ? "softmax_ce" : "sigmoid_bce"; }

LossMode loss_mode_from_string(std::string_view name) {
  if (name == "softmax_ce") return LossMode::softmax_ce;
  if (name == "sigmoid_bce") return LossMode::sigmoid_bce;
  throw std::invalid_argument("unknown loss mode '" + std::string(name) + "'");
}

OutputActivation activation_for(LossMode mode) {
  return mode == LossMode::softmax_ce ? OutputActivation::softmax : OutputActivation::sigmoid;
}

void validate(const TrainConfig& c, bool allow_zero_epochs) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(c.initial_lr > 0)) fail("initial_lr must be positive");
  if (!c.lr_override && (c.initial_lr < 1e-5 || c.initial_lr > 1e-4)) {
    fail("initial_lr must lie in [1e-5, 1e-4] unless lr_override is set");
  }
  if (!(c.lr_decay_rate > 0 && c.lr_decay_rate < 1)) fail("lr_decay_rate must be in (0, 1)");
  if (c.lr_decay_period <= 0) fail("lr_decay_period must be positive");
  if (!(c.weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (c.epochs < (allow_zero_epochs ? 0 : 1)) fail("epochs must be at least 1");
  if (c.batch_size < 1) fail("batch_size must be at least 1");
  if (!(c.batch_renorm.r_min > 0 && c.batch_renorm.r_min <= 1 && c.batch_renorm.r_max >= 1)) fail("batch renorm r clamps invalid");
  if (!(c.batch_renorm.d_max >= 0)) fail("batch renorm d_max must be non-negative");
  if (!(c.batch_renorm.momentum >= 0 && c.batch_renorm.momentum < 1)) fail("batch renorm momentum must be in [0, 1)");
  if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1 && c.adam.beta2 >= 0 && c.adam.beta2 < 1 && c.adam.epsilon > 0)) {
    fail("Adam settings invalid");
  }
  if (c.resize_budget < 0) fail("resize_budget must be non-negative");
  if (c.patches) validate(*c.patches);
  if (c.augment) validate(c.augment_params);
}

double lr_schedule(long long step, const TrainConfig& c) {
  if (step < 0) throw std::invalid_argument("lr_schedule: negative step");
  return c.initial_lr * std::pow(c.lr_decay_rate, static_cast<double>(step) / c.lr_decay_period);
}

LossResult pixel_loss(const Tensor& logits, const Tensor& target, std::span<const std::uint8_t> ignore, LossMode mode) {
  if (logits.rank() != 4 || logits.shape() != target.shape()) {
    throw std::invalid_argument("pixel_loss: logits " + shape_string(logits.shape()) + " and target " +
                                shape_string(target.shape()) + " differ");
  }
  const int n = logits.n(), c = logits.c();
  const size_t plane = logits.plane();
  if (!ignore.empty() && ignore.size() != static_cast<size_t>(n) * plane) {
    throw std::invalid_argument("pixel_loss: ignore mask size mismatch");
  }
  LossResult r;
  r.grad.reset(logits.shape());
  for (int b = 0; b < n; ++b)
    for (size_t i = 0; i < plane; ++i) r.counted_pixels += ignore.empty() || !ignore[static_cast<size_t>(b) * plane + i];
  if (r.counted_pixels == 0) throw std::invalid_argument("pixel_loss: every pixel is ignored");

  const double norm = mode == LossMode::softmax_ce ? static_cast<double>(r.counted_pixels)
                                                   : static_cast<double>(r.counted_pixels) * c;
  std::vector<double> z(static_cast<size_t>(c));
  double total = 0.0;
  for (int b = 0; b < n; ++b)
    for (size_t i = 0; i < plane; ++i) {
      if (!ignore.empty() && ignore[static_cast<size_t>(b) * plane + i]) continue;
      auto at = [&](const Tensor& t, int k) { return t.plane_ptr(b, k)[i]; };
      if (mode == LossMode::softmax_ce) {
        double zmax = -INFINITY, tsum = 0.0;
        for (int k = 0; k < c; ++k) {
          z[static_cast<size_t>(k)] = at(logits, k);
          zmax = std::max(zmax, z[static_cast<size_t>(k)]);
          tsum += at(target, k);
        }
        double se = 0.0;
        for (int k = 0; k < c; ++k) se += std::exp(z[static_cast<size_t>(k)] - zmax);
        const double lse = zmax + std::log(se);
        for (int k = 0; k < c; ++k) {
          const double t = at(target, k);
          const double p = std::exp(z[static_cast<size_t>(k)] - lse);
          total += t * (lse - z[static_cast<size_t>(k)]);
          r.grad.plane_ptr(b, k)[i] = static_cast<float>((p * tsum - t) / norm);
        }
      } else {
        for (int k = 0; k < c; ++k) {
          const double x = at(logits, k), t = at(target, k);
          // log(1 + e^x) - t x, stable for either sign of x.
          total += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - t * x;
          const double p = 1.0 / (1.0 + std::exp(-x));
          r.grad.plane_ptr(b, k)[i] = static_cast<float>((p - t) / norm);
        }
      }
    }
  r.loss = total / norm;
  return r;
}

double l2_penalty(const WeightStore& weights, const std::vector<ParamSlot>& slots, double wd) {
  double sum = 0.0;
  for (const auto& s : slots) {
    if (s.role != ParamRole::kernel || !s.trainable) continue;
    for (float v : weights.at(s.name).values()) sum += static_cast<double>(v) * v;
  }
  return wd * sum;
}

void add_l2_gradient(const WeightStore& weights, const std::vector<ParamSlot>& slots, double wd, WeightStore& grads) {
  if (wd == 0.0) return;
  for (const auto& s : slots) {
    if (s.role != ParamRole::kernel || !s.trainable) continue;
    auto w = weights.at(s.name).values();
    auto g = grads.at(s.name).values();
    for (size_t i = 0; i < w.size(); ++i) g[i] += static_cast<float>(2.0 * wd * w[i]);
  }
}

void Adam::step(WeightStore& weights, const WeightStore& grads, double lr, const std::vector<std::string>& names) {
  ++t_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const auto& name : names) {
    auto w = weights.at(name).values();
    auto g = grads.at(name).values();
    auto [mit, m_new] = m_.try_emplace(name, weights.at(name).shape());
    auto [vit, v_new] = v_.try_emplace(name, weights.at(name).shape());
    auto m = mit->second.values();
    auto v = vit->second.values();
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<float>(b1 * m[i] + (1.0 - b1) * gi);
      v[i] = static_cast<float>(b2 * v[i] + (1.0 - b2) * gi * gi);
      const double mhat = m[i] / c1, vhat = v[i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + settings_.epsilon));
    }
  }
}

std::vector<std::string> optimized_parameters(const std::vector<ParamSlot>& slots, const TrainConfig& config) {
  std::vector<std::string> names;
  for (const auto& s : slots) {
    if (!s.trainable) continue;
    if (!config.train_encoder && s.section == Section::encoder) continue;
    names.push_back(s.name);
  }
  return names;
}

namespace {

int round_up32(int v) { return (v + kEncoderStride - 1) / kEncoderStride * kEncoderStride; }

}  // namespace

Batch assemble_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("assemble_batch: empty batch");
  int h = 0, w = 0;
  const int classes = samples.front().target.channels();
  for (const auto& s : samples) {
    h = std::max(h, s.image.height());
    w = std::max(w, s.image.width());
    if (s.target.channels() != classes) throw std::invalid_argument("assemble_batch: class count differs");
  }
  h = round_up32(h);
  w = round_up32(w);
  std::vector<RgbImage> padded;
  std::vector<const RgbImage*> ptrs;
  padded.reserve(samples.size());
  for (const auto& s : samples) {
    padded.push_back(crop_padded(s.image, 0, 0, h, w));
    ptrs.push_back(&padded.back());
  }
  Batch b;
  b.input = to_input_tensor(ptrs);
  const int n = static_cast<int>(samples.size());
  b.target = Tensor(n, classes, h, w);
  b.ignore.assign(static_cast<size_t>(n) * h * w, 1);
  for (int i = 0; i < n; ++i) {
    const Sample& s = samples[static_cast<size_t>(i)];
    for (int y = 0; y < s.image.height(); ++y)
      for (int x = 0; x < s.image.width(); ++x) {
        b.ignore[(static_cast<size_t>(i) * h + y) * w + x] = s.ignore(y, x);
        for (int k = 0; k < classes; ++k) b.target.at(i, k, y, x) = s.target(y, x, k);
      }
  }
  return b;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  std::uint64_t out[1];
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  out[0] = (std::uint64_t(words[0]) << 32) | words[1];
  return out[0];
}

long long items_in(const Sample& s, const TrainConfig& c) {
  return c.patches ? static_cast<long long>(patch_grid(s.image.size2(), *c.patches).size()) : 1;
}

}  // namespace

long long steps_per_epoch(const std::vector<Sample>& dataset, const TrainConfig& config) {
  long long items = 0;
  for (const auto& s : dataset) items += items_in(s, config);
  return (items + config.batch_size - 1) / config.batch_size;
}

FitResult fit(const NetworkGraph& graph, WeightStore& weights, const std::vector<Sample>& dataset_in,
              const TrainConfig& config, const FitCallbacks& callbacks) {
  validate(config, true);
  if (dataset_in.empty()) throw std::invalid_argument("fit: empty dataset");
  check_weights(graph, weights);
  for (const auto& s : dataset_in)
    if (s.target.channels() != graph.config.n_classes) {
      throw std::invalid_argument("fit: sample '" + s.stem + "' has " + std::to_string(s.target.channels()) +
                                  " target channels, network predicts " + std::to_string(graph.config.n_classes));
    }
  FitResult result;
  if (config.epochs == 0) return result;

  std::vector<Sample> dataset;
  dataset.reserve(dataset_in.size());
  for (const auto& s : dataset_in) dataset.push_back(config.resize_budget > 0 ? resize_sample(s, config.resize_budget) : s);

  const long long per_epoch = steps_per_epoch(dataset, config);
  const auto slots = parameter_slots(graph);
  const auto names = optimized_parameters(slots, config);

  PrefetchQueue<Batch> queue(static_cast<size_t>(std::max(1, config.prefetch)));
  std::exception_ptr producer_error;
  std::thread producer([&] {
    try {
      std::vector<Sample> pending;
      auto flush = [&] {
        if (pending.empty()) return true;
        const bool ok = queue.push(assemble_batch(pending));
        pending.clear();
        return ok;
      };
      for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(dataset.size());
        std::iota(order.begin(), order.end(), size_t{0});
        std::mt19937_64 shuffle_rng(mix_seed(config.seed, 1, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (size_t idx : order) {
          Sample s = dataset[idx];
          if (config.augment) {
            AugmentParams p = config.augment_params;
            p.seed = mix_seed(config.seed, static_cast<std::uint64_t>(epoch) + 2, idx);
            s = augment(s, p);
          }
          if (config.patches) {
            for (auto& patch : extract_patches(s, *config.patches)) {
              pending.push_back(std::move(patch.sample));
              if (static_cast<int>(pending.size()) == config.batch_size && !flush()) return;
            }
          } else {
            pending.push_back(std::move(s));
            if (static_cast<int>(pending.size()) == config.batch_size && !flush()) return;
          }
        }
        if (!flush()) return;
      }
    } catch (...) {
      producer_error = std::current_exception();
    }
    queue.close();
  });

  struct Joiner {
    PrefetchQueue<Batch>& q;
    std::thread& t;
    ~Joiner() {
      q.close();
      if (t.joinable()) t.join();
    }
  } joiner{queue, producer};

  Network net(graph, weights);
  WeightStore grads = zeros_like_slots(graph);
  Adam adam(config.adam);
  auto trace = Network::make_trace();
  long long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (long long i = 0; i < per_epoch; ++i) {
      std::optional<Batch> batch = queue.pop();
      if (!batch) {
        if (producer_error) std::rethrow_exception(producer_error);
        throw std::logic_error("fit: data feed ended early");
      }
      const double lr = lr_schedule(step, config);
      Tensor logits = net.forward_train(batch->input, config.batch_renorm, *trace);
      LossResult lr_out = pixel_loss(logits, batch->target, batch->ignore, config.loss_mode);
      const double total = lr_out.loss + l2_penalty(weights, slots, config.weight_decay);
      if (!std::isfinite(total)) {
        std::ostringstream msg;
        msg << "fit: non-finite loss " << total << " at step " << step << " (epoch " << epoch << ", lr " << lr
            << "); pixel loss " << lr_out.loss;
        throw std::runtime_error(msg.str());
      }
      for (auto& [name, t] : grads.entries()) t.fill(0.0f);
      net.backward(*trace, lr_out.grad, grads);
      add_l2_gradient(weights, slots, config.weight_decay, grads);
      adam.step(weights, grads, lr, names);
      Network::update_moving_statistics(*trace, config.batch_renorm.momentum, weights);
      epoch_loss += total;
      if (callbacks.on_step) callbacks.on_step({step, epoch, lr, total});
      ++step;
    }
    result.history.push_back(epoch_loss / static_cast<double>(per_epoch));
    if (callbacks.on_epoch) callbacks.on_epoch(epoch, step, weights);
  }
  result.steps = step;
  return result;
}

}  // namespace dhseg
