#pragma once

#include <sys/resource.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "sepm/parallel.hpp"
#include "sepm/separator.hpp"
#include "sepm/strutil.hpp"

namespace sepm {

// Compute accounting and wall-clock profiling. GMAC figures are pure
// arithmetic (reproducible anywhere); timings are advisory and always carry
// an environment descriptor.

struct TimingStats {
  std::vector<double> samples_ms;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
  double min_ms = 0.0;
};

template <typename T>
TimingStats profile_forward(const SeparatorWeights<T>& weights, double seconds = 4.0,
                            int repeats = 10, int warmup = 1, std::uint64_t seed = 0) {
  if (repeats < 3) throw ConfigError("profile_forward: repeats must be >= 3");
  if (warmup < 1) throw ConfigError("profile_forward: warmup must be >= 1");
  const std::int64_t l =
      static_cast<std::int64_t>(std::llround(seconds * static_cast<double>(weights.cfg.sample_rate)));
  Rng rng(seed);
  Tensor<T> x = Tensor<T>::randn({1, l}, rng);
  for (int i = 0; i < warmup; ++i) (void)separator_forward(weights, x);
  TimingStats stats;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)separator_forward(weights, x);
    const auto t1 = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(
        std::chrono::duration_cast<std::chrono::duration<double, std::milli>>(t1 - t0).count());
  }
  double sum = 0.0;
  stats.min_ms = stats.samples_ms[0];
  for (auto v : stats.samples_ms) {
    sum += v;
    stats.min_ms = std::min(stats.min_ms, v);
  }
  stats.mean_ms = sum / static_cast<double>(stats.samples_ms.size());
  double var = 0.0;
  for (auto v : stats.samples_ms) var += (v - stats.mean_ms) * (v - stats.mean_ms);
  stats.stddev_ms = std::sqrt(var / static_cast<double>(stats.samples_ms.size()));
  return stats;
}

// Per-projection tape cost: the recorded output plus its gradient buffer.
inline std::int64_t tape_bytes_linear(std::int64_t d_out, std::int64_t l,
                                      std::int64_t bytes_per_scalar) {
  return d_out * l * 2 * bytes_per_scalar;
}

// Analytic lower bound for peak training memory: parameters, gradients, both
// AdamW moments, plus every recorded activation with its gradient buffer
// (count_activation_elems inventories the forward graph). The real process
// peak adds transients, allocator slack and code, so measured >= estimate.
inline std::int64_t estimate_peak_memory(const SeparatorConfig& cfg, double seconds = 4.0,
                                         std::int64_t bytes_per_scalar = 4) {
  const std::int64_t l =
      static_cast<std::int64_t>(std::llround(seconds * static_cast<double>(cfg.sample_rate)));
  const std::int64_t p = count_params(cfg);
  const std::int64_t act = count_activation_elems(cfg, l);
  return bytes_per_scalar * (4 * p + 2 * act);
}

inline std::int64_t process_peak_rss_bytes() {
  rusage ru{};
  getrusage(RUSAGE_SELF, &ru);
  return static_cast<std::int64_t>(ru.ru_maxrss) * 1024;  // linux reports KB
}

inline std::string env_descriptor(int precision_bits = 32) {
  std::ostringstream os;
#if defined(__clang__)
  os << "clang-" << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  os << "gcc-" << __GNUC__ << "." << __GNUC_MINOR__;
#else
  os << "cc-unknown";
#endif
  os << " fp" << precision_bits << " threads=" << thread_count();
  return os.str();
}

struct ComputeReport {
  std::string name;
  std::int64_t params = 0;
  double gmac_per_s = 0.0;  // forward pass over 1 s of audio at the model rate
  double fwd_ms_mean = 0.0;
  double fwd_ms_std = 0.0;
  double fwd_ms_min = 0.0;
  std::int64_t peak_mem_bytes = 0;
  std::string env;
};

template <typename T>
ComputeReport make_report(const std::string& name, const SeparatorConfig& cfg,
                          const SeparatorWeights<T>* weights_for_timing, double seconds = 4.0,
                          int repeats = 10, int warmup = 1) {
  ComputeReport r;
  r.name = name;
  r.params = count_params(cfg);
  r.gmac_per_s = static_cast<double>(count_macs(cfg, 1.0)) / 1e9;
  r.peak_mem_bytes = estimate_peak_memory(cfg, seconds, sizeof(T));
  r.env = env_descriptor(sizeof(T) * 8);
  if (weights_for_timing) {
    const TimingStats t = profile_forward(*weights_for_timing, seconds, repeats, warmup);
    r.fwd_ms_mean = t.mean_ms;
    r.fwd_ms_std = t.stddev_ms;
    r.fwd_ms_min = t.min_ms;
  }
  return r;
}

enum class ReportFormat { Tsv, Markdown };

inline const char* kReportColumns[] = {"name",       "params",     "gmac_per_s",
                                       "fwd_ms_mean", "fwd_ms_std", "fwd_ms_min",
                                       "peak_mem_bytes", "env"};

inline std::string emit_report(const std::vector<ComputeReport>& rows, ReportFormat fmt) {
  std::ostringstream os;
  os.precision(9);
  if (fmt == ReportFormat::Tsv) {
    for (std::size_t i = 0; i < 8; ++i) os << (i ? "\t" : "") << kReportColumns[i];
    os << "\n";
    for (const auto& r : rows)
      os << r.name << "\t" << r.params << "\t" << r.gmac_per_s << "\t" << r.fwd_ms_mean << "\t"
         << r.fwd_ms_std << "\t" << r.fwd_ms_min << "\t" << r.peak_mem_bytes << "\t" << r.env
         << "\n";
  } else {
    os << "| Model | # Params | GMAC/s | Fw. pass (ms) | Mem. usage (GB) | Env |\n";
    os << "|---|---|---|---|---|---|\n";
    for (const auto& r : rows) {
      os << "| " << r.name << " | " << static_cast<double>(r.params) / 1e6 << "M | "
         << r.gmac_per_s << " | ";
      if (r.fwd_ms_mean > 0)
        os << r.fwd_ms_mean << " +/- " << r.fwd_ms_std;
      else
        os << "-";
      os << " | " << static_cast<double>(r.peak_mem_bytes) / (1024.0 * 1024.0 * 1024.0) << " | "
         << r.env << " |\n";
    }
  }
  return os.str();
}

inline std::vector<ComputeReport> parse_report_tsv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty report");
  std::vector<ComputeReport> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::size_t pos = 0;
    while (true) {
      const auto tab = line.find('\t', pos);
      cols.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
      if (tab == std::string::npos) break;
      pos = tab + 1;
    }
    if (cols.size() != 8) throw DataError("bad report row: " + line);
    ComputeReport r;
    r.name = cols[0];
    r.params = parse_i64(cols[1], "params");
    r.gmac_per_s = parse_f64(cols[2], "gmac_per_s");
    r.fwd_ms_mean = parse_f64(cols[3], "fwd_ms_mean");
    r.fwd_ms_std = parse_f64(cols[4], "fwd_ms_std");
    r.fwd_ms_min = parse_f64(cols[5], "fwd_ms_min");
    r.peak_mem_bytes = parse_i64(cols[6], "peak_mem_bytes");
    r.env = cols[7];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace sepm
