#pragma once

#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <mutex>
#include <queue>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "sepm/array.hpp"
#include "sepm/errors.hpp"
#include "sepm/rng.hpp"

namespace sepm {

template <typename T>
struct AudioBuffer {
  std::vector<T> samples;
  std::int64_t sample_rate = 8000;

  std::int64_t length() const { return static_cast<std::int64_t>(samples.size()); }
  double rms() const {
    double acc = 0.0;
    for (auto v : samples) acc += static_cast<double>(v) * static_cast<double>(v);
    return samples.empty() ? 0.0 : std::sqrt(acc / static_cast<double>(samples.size()));
  }
};

// ---------------------------------------------------------------------------
// Synthetic sources (stand-ins for licensed speech corpora)
// ---------------------------------------------------------------------------

enum class SourceKind { HarmonicVoice, FilteredNoise, Chirp };

inline const char* source_kind_name(SourceKind k) {
  switch (k) {
    case SourceKind::HarmonicVoice: return "harmonic-voice-like";
    case SourceKind::FilteredNoise: return "filtered-noise";
    case SourceKind::Chirp: return "chirp";
  }
  return "?";
}

inline SourceKind parse_source_kind(const std::string& s) {
  if (s == "harmonic-voice-like" || s == "harmonic") return SourceKind::HarmonicVoice;
  if (s == "filtered-noise" || s == "noise") return SourceKind::FilteredNoise;
  if (s == "chirp") return SourceKind::Chirp;
  throw ConfigError("unknown source kind: '" + s + "'");
}

// Deterministic per seed; unit RMS.
template <typename T>
AudioBuffer<T> synth_source(SourceKind kind, double duration_s, std::int64_t sample_rate,
                            std::uint64_t seed) {
  if (duration_s <= 0) throw ConfigError("synth_source: duration must be > 0");
  const std::int64_t n = static_cast<std::int64_t>(std::llround(duration_s * sample_rate));
  if (n < 1) throw ConfigError("synth_source: duration too short for sample rate");
  Rng rng(Rng::derive(seed, static_cast<std::uint64_t>(kind) + 101));
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  const double sr = static_cast<double>(sample_rate);
  constexpr double tau = 2.0 * 3.14159265358979323846;

  switch (kind) {
    case SourceKind::HarmonicVoice: {
      const double f0 = rng.uniform(80.0, 300.0);
      const double vib_rate = rng.uniform(3.0, 8.0);
      const double vib_depth = rng.uniform(0.005, 0.03);
      const double vib_phase = rng.uniform(0.0, tau);
      const double env_rate = rng.uniform(1.0, 4.0);
      const double env_phase = rng.uniform(0.0, tau);
      const int n_harm = std::max(1, static_cast<int>(0.4 * sr / f0));
      std::vector<double> amp(n_harm), phase(n_harm);
      for (int k = 0; k < n_harm; ++k) {
        amp[k] = rng.uniform(0.7, 1.3) / static_cast<double>(k + 1);
        phase[k] = rng.uniform(0.0, tau);
      }
      double carrier = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double f = f0 * (1.0 + vib_depth * std::sin(tau * vib_rate * t + vib_phase));
        carrier += tau * f / sr;
        const double env = 0.3 + 0.7 * (0.5 + 0.5 * std::sin(tau * env_rate * t + env_phase));
        double v = 0.0;
        for (int k = 0; k < n_harm; ++k) v += amp[k] * std::sin((k + 1) * carrier + phase[k]);
        x[static_cast<std::size_t>(i)] = env * v;
      }
      break;
    }
    case SourceKind::FilteredNoise: {
      const double lp_cut = rng.uniform(800.0, 2400.0);
      const double hp_cut = rng.uniform(100.0, 400.0);
      const double a_lp = 1.0 - std::exp(-tau * lp_cut / sr);
      const double a_hp = 1.0 - std::exp(-tau * hp_cut / sr);
      double lp = 0.0, hp_track = 0.0;
      for (std::int64_t i = 0; i < n; ++i) {
        const double white = rng.normal();
        lp += a_lp * (white - lp);
        hp_track += a_hp * (lp - hp_track);
        x[static_cast<std::size_t>(i)] = lp - hp_track;
      }
      break;
    }
    case SourceKind::Chirp: {
      const double f0 = rng.uniform(100.0, 500.0);
      const double f1 = rng.uniform(1000.0, 3000.0);
      const double env_rate = rng.uniform(0.5, 2.0);
      const double env_phase = rng.uniform(0.0, tau);
      double carrier = rng.uniform(0.0, tau);
      for (std::int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sr;
        const double frac = static_cast<double>(i) / static_cast<double>(n);
        const double f = f0 + (f1 - f0) * frac;
        carrier += tau * f / sr;
        const double env = 0.4 + 0.6 * (0.5 + 0.5 * std::sin(tau * env_rate * t + env_phase));
        x[static_cast<std::size_t>(i)] = env * std::sin(carrier);
      }
      break;
    }
  }

  double ms = 0.0;
  for (auto v : x) ms += v * v;
  ms = std::sqrt(ms / static_cast<double>(n));
  if (ms <= 0) throw NumericError("synth_source produced silence");
  AudioBuffer<T> out;
  out.sample_rate = sample_rate;
  out.samples.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    out.samples[static_cast<std::size_t>(i)] = static_cast<T>(x[static_cast<std::size_t>(i)] / ms);
  return out;
}

// ---------------------------------------------------------------------------
// Band-limited resampling ("speed" semantics: duration and pitch both move)
// ---------------------------------------------------------------------------

namespace detail {

inline double bessel_i0(double x) {
  // power series; converges quickly for the window arguments used here
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 64; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

inline double sinc(double u) {
  if (std::abs(u) < 1e-12) return 1.0;
  const double p = 3.14159265358979323846 * u;
  return std::sin(p) / p;
}

}  // namespace detail

namespace detail {

// Windowed-sinc interpolation core: 32 taps per side under a Kaiser window
// (beta = 8), anti-alias cutoff min(1, 1/factor) of Nyquist. factor 1 passes
// samples through exactly; output length is round(L / factor).
template <typename T>
std::vector<T> sinc_resample(const std::vector<T>& in, double factor) {
  const std::int64_t l = static_cast<std::int64_t>(in.size());
  const std::int64_t out_len =
      static_cast<std::int64_t>(std::llround(static_cast<double>(l) / factor));
  constexpr int kHalf = 32;
  constexpr double kBeta = 8.0;
  const double i0_beta = bessel_i0(kBeta);
  const double fc = std::min(1.0, 1.0 / factor);

  std::vector<T> out(static_cast<std::size_t>(out_len));
  for (std::int64_t i = 0; i < out_len; ++i) {
    const double pos = static_cast<double>(i) * factor;
    const std::int64_t base = static_cast<std::int64_t>(std::floor(pos));
    double acc = 0.0;
    for (std::int64_t j = base - kHalf + 1; j <= base + kHalf; ++j) {
      if (j < 0 || j >= l) continue;
      const double u = static_cast<double>(j) - pos;
      const double t = u / static_cast<double>(kHalf);
      if (t <= -1.0 || t >= 1.0) continue;
      const double win = bessel_i0(kBeta * std::sqrt(1.0 - t * t)) / i0_beta;
      acc += static_cast<double>(in[static_cast<std::size_t>(j)]) * fc * sinc(fc * u) * win;
    }
    out[static_cast<std::size_t>(i)] = static_cast<T>(acc);
  }
  return out;
}

}  // namespace detail

// "Speed" semantics: pitch and duration both shift; the nominal sample rate
// stays put.
template <typename T>
AudioBuffer<T> speed_perturb(const AudioBuffer<T>& in, double factor) {
  if (!(factor > 0.5 && factor < 2.0))
    throw ConfigError("speed_perturb: factor " + std::to_string(factor) + " outside (0.5, 2)");
  AudioBuffer<T> out;
  out.sample_rate = in.sample_rate;
  out.samples = detail::sinc_resample(in.samples, factor);
  return out;
}

// Sample-rate conversion with the same kernel: content is preserved, the
// nominal rate changes.
template <typename T>
AudioBuffer<T> resample(const AudioBuffer<T>& in, std::int64_t target_rate) {
  if (target_rate < 1) throw ConfigError("resample: bad target rate");
  AudioBuffer<T> out;
  out.sample_rate = target_rate;
  if (target_rate == in.sample_rate) {
    out.samples = in.samples;
    return out;
  }
  const double factor = static_cast<double>(in.sample_rate) / static_cast<double>(target_rate);
  out.samples = detail::sinc_resample(in.samples, factor);
  return out;
}

// ---------------------------------------------------------------------------
// Dynamic mixing
// ---------------------------------------------------------------------------

struct MixSpec {
  double snr_db = 0.0;     // target a-over-b ratio over the overlap
  double speed_a = 1.0;
  double speed_b = 1.0;
  std::uint64_t seed = 0;  // provenance: the draw that produced this spec
};

struct MixRanges {
  double snr_lo = -2.5, snr_hi = 2.5;
  double speed_lo = 0.95, speed_hi = 1.05;
};

inline MixSpec sample_mix_spec(const MixRanges& r, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 7));
  MixSpec s;
  s.seed = seed;
  s.snr_db = rng.uniform(r.snr_lo, r.snr_hi);
  s.speed_a = rng.uniform(r.speed_lo, r.speed_hi);
  s.speed_b = rng.uniform(r.speed_lo, r.speed_hi);
  return s;
}

template <typename T>
struct MixResult {
  AudioBuffer<T> mixture, ref_a, ref_b;
  double gain_b = 1.0;
  MixSpec spec;
};

namespace detail {

template <typename T>
double active_power(const std::vector<T>& x, std::int64_t l) {
  double mean = 0.0;
  for (std::int64_t i = 0; i < l; ++i) mean += static_cast<double>(x[static_cast<std::size_t>(i)]);
  mean /= static_cast<double>(l);
  double p = 0.0;
  for (std::int64_t i = 0; i < l; ++i) {
    const double d = static_cast<double>(x[static_cast<std::size_t>(i)]) - mean;
    p += d * d;
  }
  return p / static_cast<double>(l);
}

}  // namespace detail

// Speed-perturbs both sources, truncates to the common length, scales the
// second source so the mean-removed power ratio over the overlap hits
// spec.snr_db exactly, and returns mixture == ref_a + ref_b samplewise.
template <typename T>
MixResult<T> dynamic_mix(const AudioBuffer<T>& src_a, const AudioBuffer<T>& src_b,
                         const MixSpec& spec) {
  if (src_a.sample_rate != src_b.sample_rate)
    throw ConfigError("dynamic_mix: sample rates differ");
  MixResult<T> out;
  out.spec = spec;
  out.ref_a = speed_perturb(src_a, spec.speed_a);
  out.ref_b = speed_perturb(src_b, spec.speed_b);
  const std::int64_t l = std::min(out.ref_a.length(), out.ref_b.length());
  if (l < 2) throw DataError("dynamic_mix: overlap too short");
  out.ref_a.samples.resize(static_cast<std::size_t>(l));
  out.ref_b.samples.resize(static_cast<std::size_t>(l));

  const double pa = detail::active_power(out.ref_a.samples, l);
  const double pb = detail::active_power(out.ref_b.samples, l);
  if (pa <= 1e-20 || pb <= 1e-20) throw DataError("dynamic_mix: silent source");
  const double g = std::sqrt(pa / (pb * std::pow(10.0, spec.snr_db / 10.0)));
  out.gain_b = g;
  for (auto& v : out.ref_b.samples) v = static_cast<T>(static_cast<double>(v) * g);

  out.mixture.sample_rate = src_a.sample_rate;
  out.mixture.samples.resize(static_cast<std::size_t>(l));
  for (std::int64_t i = 0; i < l; ++i)
    out.mixture.samples[static_cast<std::size_t>(i)] =
        out.ref_a.samples[static_cast<std::size_t>(i)] + out.ref_b.samples[static_cast<std::size_t>(i)];
  return out;
}

template <typename T>
double measured_snr_db(const AudioBuffer<T>& ref_a, const AudioBuffer<T>& ref_b) {
  const std::int64_t l = std::min(ref_a.length(), ref_b.length());
  const double pa = detail::active_power(ref_a.samples, l);
  const double pb = detail::active_power(ref_b.samples, l);
  return 10.0 * std::log10(pa / pb);
}

// ---------------------------------------------------------------------------
// Dataset manifests: seed<TAB>duration_s<TAB>kind_a<TAB>kind_b
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::uint64_t seed = 0;
  double duration_s = 1.0;
  SourceKind kind_a = SourceKind::HarmonicVoice;
  SourceKind kind_b = SourceKind::FilteredNoise;
};

inline std::string format_manifest(const std::vector<ManifestEntry>& entries) {
  std::ostringstream os;
  for (const auto& e : entries)
    os << e.seed << "\t" << e.duration_s << "\t" << source_kind_name(e.kind_a) << "\t"
       << source_kind_name(e.kind_b) << "\n";
  return os.str();
}

inline std::vector<ManifestEntry> parse_manifest(std::istream& in) {
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string ka, kb;
    if (!(ls >> e.seed >> e.duration_s >> ka >> kb))
      throw DataError("manifest line " + std::to_string(lineno) + " malformed: " + line);
    e.kind_a = parse_source_kind(ka);
    e.kind_b = parse_source_kind(kb);
    out.push_back(e);
  }
  return out;
}

inline std::vector<ManifestEntry> read_manifest_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);
  return parse_manifest(in);
}

// Full training-item generator: two synthetic sources and a sampled spec,
// everything derived from the entry seed.
template <typename T>
MixResult<T> make_training_mix(const ManifestEntry& e, const MixRanges& ranges,
                               std::int64_t sample_rate) {
  const auto a = synth_source<T>(e.kind_a, e.duration_s, sample_rate, Rng::derive(e.seed, 1));
  const auto b = synth_source<T>(e.kind_b, e.duration_s, sample_rate, Rng::derive(e.seed, 2));
  return dynamic_mix(a, b, sample_mix_spec(ranges, e.seed));
}

// ---------------------------------------------------------------------------
// WAV (RIFF) io
// ---------------------------------------------------------------------------

enum class WavEncoding { Pcm16, Float32 };

namespace detail {

inline void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0] | (p[1] << 8) | (p[2] << 16) |
                                    (static_cast<std::uint32_t>(p[3]) << 24));
}

}  // namespace detail

template <typename T>
void wav_write(const std::string& path, const AudioBuffer<T>& buf,
               WavEncoding enc = WavEncoding::Float32) {
  const std::int64_t n = buf.length();
  const std::uint16_t bytes_per = enc == WavEncoding::Pcm16 ? 2 : 4;
  const std::uint16_t fmt = enc == WavEncoding::Pcm16 ? 1 : 3;  // PCM / IEEE float
  std::string head;
  head.reserve(44);
  head += "RIFF";
  detail::put_u32(head, static_cast<std::uint32_t>(36 + n * bytes_per));
  head += "WAVE";
  head += "fmt ";
  detail::put_u32(head, 16);
  detail::put_u16(head, fmt);
  detail::put_u16(head, 1);  // mono
  detail::put_u32(head, static_cast<std::uint32_t>(buf.sample_rate));
  detail::put_u32(head, static_cast<std::uint32_t>(buf.sample_rate * bytes_per));
  detail::put_u16(head, bytes_per);
  detail::put_u16(head, static_cast<std::uint16_t>(bytes_per * 8));
  head += "data";
  detail::put_u32(head, static_cast<std::uint32_t>(n * bytes_per));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open wav for writing: " + path);
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  if (enc == WavEncoding::Pcm16) {
    std::vector<std::int16_t> pcm(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      double v = static_cast<double>(buf.samples[static_cast<std::size_t>(i)]);
      v = std::max(-1.0, std::min(1.0, v));
      pcm[static_cast<std::size_t>(i)] =
          static_cast<std::int16_t>(std::lround(v * 32767.0));
    }
    out.write(reinterpret_cast<const char*>(pcm.data()),
              static_cast<std::streamsize>(pcm.size() * 2));
  } else {
    std::vector<float> f(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
      f[static_cast<std::size_t>(i)] = static_cast<float>(buf.samples[static_cast<std::size_t>(i)]);
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(f.size() * 4));
  }
  if (!out) throw DataError("wav write failed: " + path);
}

// Reads mono or multichannel RIFF/WAVE (PCM16 or float32). Multichannel
// input is mean-downmixed; *downmixed reports it so callers can warn.
template <typename T>
AudioBuffer<T> wav_read(const std::string& path, bool* downmixed = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open wav: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 44 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw DataError("not a RIFF/WAVE file: " + path);

  std::uint16_t fmt = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_off = 0, data_len = 0;
  std::size_t off = 12;
  while (off + 8 <= bytes.size()) {
    const std::uint32_t chunk_len = detail::get_u32(p + off + 4);
    const bool is_fmt = std::memcmp(p + off, "fmt ", 4) == 0;
    const bool is_data = std::memcmp(p + off, "data", 4) == 0;
    const std::size_t body = off + 8;
    if (is_fmt) {
      if (body + 16 > bytes.size()) throw DataError("truncated fmt chunk: " + path);
      fmt = detail::get_u16(p + body);
      channels = detail::get_u16(p + body + 2);
      rate = detail::get_u32(p + body + 4);
      bits = detail::get_u16(p + body + 14);
    } else if (is_data) {
      data_off = body;
      data_len = chunk_len;
    }
    off = body + chunk_len + (chunk_len & 1);
  }
  if (fmt == 0 || rate == 0) throw DataError("missing fmt chunk: " + path);
  if (data_off == 0) throw DataError("missing data chunk: " + path);
  if (data_off + data_len > bytes.size()) throw DataError("truncated data chunk: " + path);
  if (channels < 1) throw DataError("invalid channel count: " + path);
  const bool pcm16 = fmt == 1 && bits == 16;
  const bool f32 = fmt == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw DataError("unsupported wav codec (fmt=" + std::to_string(fmt) + ", bits=" +
                    std::to_string(bits) + "): " + path);

  const std::size_t bytes_per = pcm16 ? 2 : 4;
  const std::size_t frames = data_len / (bytes_per * channels);
  if (downmixed) *downmixed = channels > 1;

  AudioBuffer<T> out;
  out.sample_rate = static_cast<std::int64_t>(rate);
  out.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* sp = p + data_off + (i * channels + c) * bytes_per;
      if (pcm16) {
        const std::int16_t v = static_cast<std::int16_t>(detail::get_u16(sp));
        acc += static_cast<double>(v) / 32768.0;
      } else {
        float v;
        std::memcpy(&v, sp, 4);
        acc += static_cast<double>(v);
      }
    }
    out.samples[i] = static_cast<T>(acc / static_cast<double>(channels));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bounded prefetch queue: at most `capacity` items generated ahead of the
// consumer, delivered strictly in index order.
// ---------------------------------------------------------------------------

template <typename T>
class MixPrefetcher {
 public:
  MixPrefetcher(std::function<MixResult<T>(std::int64_t)> gen, std::int64_t capacity)
      : gen_(std::move(gen)), capacity_(capacity > 0 ? capacity : 1) {
    worker_ = std::thread([this] { run(); });
  }

  ~MixPrefetcher() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  MixResult<T> next() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty(); });
    MixResult<T> item = std::move(queue_.front());
    queue_.pop();
    cv_.notify_all();
    return item;
  }

 private:
  void run() {
    std::int64_t index = 0;
    while (true) {
      MixResult<T> item = gen_(index++);
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] {
        return stop_ || static_cast<std::int64_t>(queue_.size()) < capacity_;
      });
      if (stop_) return;
      queue_.push(std::move(item));
      cv_.notify_all();
    }
  }

  std::function<MixResult<T>(std::int64_t)> gen_;
  std::int64_t capacity_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::queue<MixResult<T>> queue_;
  bool stop_ = false;
  std::thread worker_;
};

}  // namespace sepm
