#pragma once

// SGD with momentum under a polynomial learning-rate decay, per-sample data
// augmentation, and the epoch loop tying them to the network graph.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "cmsnet/network.hpp"
#include "cmsnet/sample.hpp"

namespace cmsnet {

struct AugmentConfig {
  double rotate_deg_max = 0;  // angle drawn uniformly from [-max, max]
  double crop_fraction = 0;   // side shrink of the random crop, resized back
  double noise_sigma = 0;     // noise severity drawn from [0, sigma]
  double fog_severity = 0;    // half the samples get fog at a severity in [0, this]

  bool enabled() const {
    return rotate_deg_max > 0 || crop_fraction > 0 || noise_sigma > 0 || fog_severity > 0;
  }
  void validate() const;
};

struct TrainConfig {
  double base_lr = 0.007;
  std::size_t epochs = 200;
  std::size_t batch_size = 4;
  double poly_power = 1.0;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const;
};

/// base_lr * (1 - step/total_steps)^power.
double poly_lr(double base_lr, std::size_t step, std::size_t total_steps, double power = 1.0);

/// Per-parameter velocity, created on the first step.
struct SgdState {
  std::vector<std::vector<float>> velocity;
};

/// v = momentum*v + g; p = p - lr*v, over every learnable tensor.
void sgd_step(Network& net, SgdState& state, double lr, double momentum);

/// Rotates image (bilinear) and mask (nearest) about the centre; uncovered
/// pixels become 0 in the image and `fill` in the mask.
LabeledSample rotate_sample(const LabeledSample& sample, double degrees,
                            std::int32_t fill = kVoidLabel);

/// Crops the window [y0, y0+ch) x [x0, x0+cw) and resizes it back to the
/// original size (bilinear image, nearest mask).
LabeledSample crop_sample(const LabeledSample& sample, std::size_t y0, std::size_t x0,
                          std::size_t ch, std::size_t cw);

/// Random augmentation; a pure function of (seed, index, epoch).
LabeledSample augment(const LabeledSample& sample, const AugmentConfig& config, std::uint64_t seed,
                      std::size_t index, std::size_t epoch);

/// Throws ValidationError naming the first sample whose mask holds a class
/// outside [0, num_classes) other than the void id, or whose dims disagree.
void validate_samples(std::span<const LabeledSample> samples, std::size_t num_classes);

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double lr = 0;  // rate used by the epoch's last step
};

struct TrainCallbacks {
  std::function<void(std::size_t step, double loss)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
};

/// Stacks samples into one batch along n.
Tensor stack_images(std::span<const LabeledSample> samples);
LabelMap stack_masks(std::span<const LabeledSample> samples);

TrainResult train(Network& net, std::span<const LabeledSample> samples, const TrainConfig& config,
                  const TrainCallbacks& callbacks = {});

/// epoch,mean_loss,lr
void write_loss_csv(std::ostream& os, const std::vector<EpochRecord>& history);

}  // namespace cmsnet
