#include "cmsnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <string>

#include "cmsnet/error.hpp"
#include "cmsnet/impairment.hpp"
#include "cmsnet/ops.hpp"
#include "cmsnet/rng.hpp"

namespace cmsnet {

void AugmentConfig::validate() const {
  if (!(rotate_deg_max >= 0)) throw ConfigError("rotate_deg_max must be >= 0");
  if (!(crop_fraction >= 0 && crop_fraction < 1)) throw ConfigError("crop_fraction must be in [0, 1)");
  if (!(noise_sigma >= 0 && noise_sigma <= kMaxNoiseSeverity))
    throw ConfigError("noise_sigma must be in [0, 0.25]");
  if (!(fog_severity >= 0 && fog_severity <= 1)) throw ConfigError("fog_severity must be in [0, 1]");
}

void TrainConfig::validate() const {
  if (!(base_lr > 0)) throw ConfigError("base_lr must be > 0");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(poly_power >= 0)) throw ConfigError("poly_power must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must be in [0, 1)");
  augment.validate();
}

double poly_lr(double base_lr, std::size_t step, std::size_t total_steps, double power) {
  if (total_steps == 0) throw ConfigError("poly_lr: total_steps must be positive");
  if (step > total_steps) {
    throw ConfigError("poly_lr: step " + std::to_string(step) + " beyond total " +
                      std::to_string(total_steps));
  }
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * std::pow(frac, power);
}

void sgd_step(Network& net, SgdState& state, double lr, double momentum) {
  auto params = net.parameters();
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.value.size(), 0.0f);
  }
  if (state.velocity.size() != params.size()) {
    throw DimensionError("sgd_step: velocity holds " + std::to_string(state.velocity.size()) +
                         " tensors, network has " + std::to_string(params.size()));
  }
  const auto m = static_cast<float>(momentum);
  const auto rate = static_cast<float>(lr);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = state.velocity[k];
    auto& p = params[k];
    if (v.size() != p.value.size() || p.grad.size() != p.value.size()) {
      throw DimensionError("sgd_step: shape mismatch for '" + p.name + "'");
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = m * v[i] + p.grad[i];
      p.value[i] -= rate * v[i];
    }
  }
}

LabeledSample rotate_sample(const LabeledSample& sample, double degrees, std::int32_t fill) {
  const Shape& s = sample.image.shape();
  LabeledSample out{Tensor(s), LabelMap(sample.mask.n, sample.mask.h, sample.mask.w, fill),
                    sample.condition};
  const double a = degrees * std::numbers::pi / 180.0;
  // Snap the quarter turns so they permute pixels exactly.
  double ca = std::cos(a), sa = std::sin(a);
  if (std::abs(ca) < 1e-12) ca = 0;
  if (std::abs(sa) < 1e-12) sa = 0;
  const double cy = static_cast<double>(s.h) / 2.0, cx = static_cast<double>(s.w) / 2.0;
  const auto H = static_cast<double>(s.h), W = static_cast<double>(s.w);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x) {
      // Inverse map from the output pixel centre into the source.
      const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
      const double sx = cx + ca * dx + sa * dy;
      const double sy = cy - sa * dx + ca * dy;
      if (sx < 0 || sy < 0 || sx >= W || sy >= H) continue;
      for (std::size_t b = 0; b < sample.mask.n; ++b)
        out.mask.at(b, y, x) = sample.mask.at(b, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
      const double fx = std::clamp(sx - 0.5, 0.0, W - 1), fy = std::clamp(sy - 0.5, 0.0, H - 1);
      const auto x0 = static_cast<std::size_t>(fx), y0 = static_cast<std::size_t>(fy);
      const std::size_t x1 = std::min(x0 + 1, s.w - 1), y1 = std::min(y0 + 1, s.h - 1);
      const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
      for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
          const auto& im = sample.image;
          const double top = im(b, c, y0, x0) * (1 - tx) + im(b, c, y0, x1) * tx;
          const double bot = im(b, c, y1, x0) * (1 - tx) + im(b, c, y1, x1) * tx;
          out.image(b, c, y, x) = static_cast<float>(top * (1 - ty) + bot * ty);
        }
    }
  return out;
}

LabeledSample crop_sample(const LabeledSample& sample, std::size_t y0, std::size_t x0,
                          std::size_t ch, std::size_t cw) {
  const Shape& s = sample.image.shape();
  if (ch < 1 || cw < 1) throw ConfigError("crop window smaller than 1 pixel");
  if (y0 + ch > s.h || x0 + cw > s.w) throw DimensionError("crop window leaves the image");
  Tensor window({s.n, s.c, ch, cw});
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t y = 0; y < ch; ++y)
        for (std::size_t x = 0; x < cw; ++x) window(b, c, y, x) = sample.image(b, c, y0 + y, x0 + x);
  LabeledSample out{bilinear_resize(window, s.h, s.w),
                    LabelMap(sample.mask.n, sample.mask.h, sample.mask.w), sample.condition};
  for (std::size_t b = 0; b < sample.mask.n; ++b)
    for (std::size_t y = 0; y < s.h; ++y) {
      const std::size_t sy = y0 + (y * ch + ch / 2) / s.h;  // nearest source row
      for (std::size_t x = 0; x < s.w; ++x) {
        const std::size_t sx = x0 + (x * cw + cw / 2) / s.w;
        out.mask.at(b, y, x) = sample.mask.at(b, std::min(sy, y0 + ch - 1), std::min(sx, x0 + cw - 1));
      }
    }
  return out;
}

LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, std::uint64_t seed,
                      std::size_t index, std::size_t epoch) {
  config.validate();
  if (!config.enabled()) return sample;
  std::mt19937_64 rng(derive_seed(seed, {index, epoch}));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  LabeledSample out = sample;
  if (config.rotate_deg_max > 0) {
    out = rotate_sample(out, (2 * u(rng) - 1) * config.rotate_deg_max);
  }
  if (config.crop_fraction > 0) {
    const Shape& s = out.image.shape();
    const auto ch = static_cast<std::size_t>(std::lround((1 - config.crop_fraction) * static_cast<double>(s.h)));
    const auto cw = static_cast<std::size_t>(std::lround((1 - config.crop_fraction) * static_cast<double>(s.w)));
    if (ch < 1 || cw < 1) throw ConfigError("crop_fraction leaves less than 1 pixel");
    const auto y0 = static_cast<std::size_t>(rng() % (s.h - ch + 1));
    const auto x0 = static_cast<std::size_t>(rng() % (s.w - cw + 1));
    out = crop_sample(out, y0, x0, ch, cw);
  }
  if (config.noise_sigma > 0) {
    out.image = apply_noise(out.image, u(rng) * config.noise_sigma, rng());
  }
  if (config.fog_severity > 0) {
    const bool fog = u(rng) < 0.5;
    const double severity = u(rng) * config.fog_severity;
    const std::uint64_t fog_seed = rng();
    if (fog) out.image = apply_fog(out.image, severity, fog_seed);
  }
  return out;
}

void validate_samples(std::span<const LabeledSample> samples, std::size_t num_classes) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const Shape& sh = s.image.shape();
    if (sh.n != 1 || s.mask.n != 1 || s.mask.h != sh.h || s.mask.w != sh.w) {
      throw ValidationError("sample " + std::to_string(i) + ": image " + sh.to_string() +
                            " and mask " + std::to_string(s.mask.h) + "x" + std::to_string(s.mask.w) +
                            " disagree");
    }
    for (auto v : s.mask.labels) {
      if (v == kVoidLabel) continue;
      if (v < 0 || v >= static_cast<std::int32_t>(num_classes)) {
        throw ValidationError("sample " + std::to_string(i) + ": mask class " + std::to_string(v) +
                              " out of range for " + std::to_string(num_classes) + " classes");
      }
    }
  }
}

Tensor stack_images(std::span<const LabeledSample> samples) {
  if (samples.empty()) throw EmptyTensorError("stack_images: no samples");
  const Shape s0 = samples[0].image.shape();
  Tensor out({samples.size(), s0.c, s0.h, s0.w});
  const std::size_t item = s0.c * s0.h * s0.w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Shape& s = samples[i].image.shape();
    if (s.n != 1 || s.c != s0.c || s.h != s0.h || s.w != s0.w) {
      throw DimensionError("stack_images: sample " + std::to_string(i) + " is " + s.to_string());
    }
    std::copy(samples[i].image.values().begin(), samples[i].image.values().end(),
              out.values().begin() + static_cast<long>(i * item));
  }
  return out;
}

LabelMap stack_masks(std::span<const LabeledSample> samples) {
  if (samples.empty()) throw EmptyTensorError("stack_masks: no samples");
  LabelMap out(samples.size(), samples[0].mask.h, samples[0].mask.w);
  const std::size_t item = out.h * out.w;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& m = samples[i].mask;
    if (m.n != 1 || m.h != out.h || m.w != out.w) {
      throw DimensionError("stack_masks: sample " + std::to_string(i) + " has a different size");
    }
    std::copy(m.labels.begin(), m.labels.end(), out.labels.begin() + static_cast<long>(i * item));
  }
  return out;
}

TrainResult train(Network& net, std::span<const LabeledSample> samples, const TrainConfig& config,
                  const TrainCallbacks& callbacks) {
  config.validate();
  if (samples.empty()) throw ConfigError("train: no samples");
  validate_samples(samples, net.output_shape().c);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    try {
      net.check_input(samples[i].image.shape());
    } catch (const DimensionError& e) {
      throw ValidationError("sample " + std::to_string(i) + ": " + e.what());
    }
  }

  const std::size_t n = samples.size();
  const std::size_t per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total = per_epoch * config.epochs;
  SgdState sgd;
  TrainResult result;
  std::vector<std::size_t> order(n);
  std::vector<LabeledSample> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(config.seed, {0x5348ull, epoch}));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);

    double loss_sum = 0;
    double lr = 0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      batch.clear();
      for (std::size_t k = b * config.batch_size; k < std::min(n, (b + 1) * config.batch_size); ++k) {
        const auto idx = order[k];
        batch.push_back(augment(samples[idx], config.augment, config.seed, idx, epoch));
      }
      const Tensor x = stack_images(batch);
      const LabelMap y = stack_masks(batch);
      Trace<float> trace;
      net.zero_grad();
      const Tensor logits = net.forward(x, Mode::train, &trace);
      auto loss = softmax_cross_entropy(logits, y);
      net.backward(trace, loss.grad);
      lr = poly_lr(config.base_lr, result.steps, total, config.poly_power);
      sgd_step(net, sgd, lr, config.momentum);
      loss_sum += loss.loss;
      if (callbacks.on_step) callbacks.on_step(result.steps, loss.loss);
      ++result.steps;
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(per_epoch), lr};
    result.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);
  }
  return result;
}

void write_loss_csv(std::ostream& os, const std::vector<EpochRecord>& history) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::scientific);
  os.precision(9);
  os << "epoch,mean_loss,lr\n";
  for (const auto& r : history) os << r.epoch << ',' << r.mean_loss << ',' << r.lr << '\n';
  os.flags(flags);
  os.precision(prec);
}

}  // namespace cmsnet
