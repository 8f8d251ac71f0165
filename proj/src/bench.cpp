#include "cmsnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>

#include "cmsnet/error.hpp"

namespace cmsnet {

double percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw EmptyTensorError("percentile of an empty sample");
  if (!(p >= 0 && p <= 1)) throw DomainError("percentile rank must be in [0, 1]");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - static_cast<double>(lo));
}

TimingStats summarize(std::span<const double> durations_ms, std::size_t warmup, std::size_t batch) {
  if (durations_ms.size() < 2) throw ConfigError("timing needs at least 2 iterations");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  TimingStats st;
  st.iterations = durations_ms.size();
  st.warmup_iterations = warmup;
  st.batch = batch;
  st.samples_ms.assign(durations_ms.begin(), durations_ms.end());
  const auto n = static_cast<double>(durations_ms.size());
  double sum = 0;
  for (double d : durations_ms) sum += d;
  st.mean_ms = sum / n;
  double ss = 0;
  for (double d : durations_ms) ss += (d - st.mean_ms) * (d - st.mean_ms);
  st.std_pct = std::sqrt(ss / (n - 1)) / st.mean_ms * 100.0;
  st.fps_mean = 1000.0 / st.mean_ms;
  st.fps_per_image = st.fps_mean * static_cast<double>(batch);
  std::vector<double> sorted(durations_ms.begin(), durations_ms.end());
  std::sort(sorted.begin(), sorted.end());
  st.boxplot = {sorted.front(), percentile(sorted, 0.25), percentile(sorted, 0.5),
                percentile(sorted, 0.75), sorted.back()};
  return st;
}

TimingStats benchmark(const TimedCall& model, const Shape& input_shape, std::size_t iterations,
                      std::size_t warmup, std::uint64_t seed) {
  if (iterations < 2) throw ConfigError("benchmark needs at least 2 iterations");
  Tensor input(input_shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : input.values()) v = u(rng);
  for (std::size_t i = 0; i < warmup; ++i) model(input);
  std::vector<double> ms;
  ms.reserve(iterations);
  for (std::size_t i = 0; i < iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    model(input);
    const auto t1 = std::chrono::steady_clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return summarize(ms, warmup, input_shape.n);
}

TimingStats benchmark(const Network& net, const Shape& input_shape, std::size_t iterations,
                      std::size_t warmup, std::uint64_t seed) {
  net.check_input(input_shape);
  return benchmark([&net](const Tensor& x) { (void)net.infer(x); }, input_shape, iterations, warmup,
                   seed);
}

double distance_response(double speed_kmh, double fps) {
  if (!(fps > 0)) throw DomainError("fps must be positive, got " + std::to_string(fps));
  if (!(speed_kmh >= 0)) throw DomainError("speed must be non-negative");
  return speed_kmh / (3.6 * fps);
}

void write_timing_csv(std::ostream& os, const TimingStats& s) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "iterations,warmup,batch,mean_ms,std_pct,fps,fps_per_image,min,q1,median,q3,max\n";
  os << s.iterations << ',' << s.warmup_iterations << ',' << s.batch << ',' << s.mean_ms << ','
     << s.std_pct << ',' << s.fps_mean << ',' << s.fps_per_image << ',' << s.boxplot.min << ','
     << s.boxplot.q1 << ',' << s.boxplot.median << ',' << s.boxplot.q3 << ',' << s.boxplot.max
     << '\n';
  os.flags(flags);
  os.precision(prec);
}

}  // namespace cmsnet
