#pragma once

// Inference timing with warmup, summary statistics (mean, relative sample
// standard deviation, quartiles) and the capture-to-result travel distance.

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "cmsnet/network.hpp"

namespace cmsnet {

struct Boxplot {
  double min = 0;
  double q1 = 0;
  double median = 0;
  double q3 = 0;
  double max = 0;
};

struct TimingStats {
  std::size_t iterations = 0;
  std::size_t warmup_iterations = 0;
  std::size_t batch = 1;
  double mean_ms = 0;
  double std_pct = 0;        // sample std as a percentage of the mean
  double fps_mean = 0;       // forward calls per second, 1000 / mean_ms
  double fps_per_image = 0;  // batch * fps_mean
  Boxplot boxplot;
  std::vector<double> samples_ms;
};

/// Linear interpolation between closest ranks: position p*(n-1) in the
/// sorted sample, p in [0, 1].
double percentile(std::span<const double> sorted, double p);

/// Statistics over already-measured durations (at least 2).
TimingStats summarize(std::span<const double> durations_ms, std::size_t warmup = 0,
                      std::size_t batch = 1);

inline constexpr std::size_t kDefaultWarmup = 20;
inline constexpr std::size_t kDefaultIterations = 500;

using TimedCall = std::function<void(const Tensor&)>;

/// Times `iterations` calls on one fixed random input after `warmup`
/// untimed calls, with a monotonic clock.
TimingStats benchmark(const TimedCall& model, const Shape& input_shape,
                      std::size_t iterations = kDefaultIterations,
                      std::size_t warmup = kDefaultWarmup, std::uint64_t seed = 0);

/// Same, for a network; the input shape is checked before any timing.
TimingStats benchmark(const Network& net, const Shape& input_shape,
                      std::size_t iterations = kDefaultIterations,
                      std::size_t warmup = kDefaultWarmup, std::uint64_t seed = 0);

/// Metres travelled at `speed_kmh` while one frame is processed.
double distance_response(double speed_kmh, double fps);

void write_timing_csv(std::ostream& os, const TimingStats& stats);

}  // namespace cmsnet
