#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sepm/mamba.hpp"
#include "sepm/tensor.hpp"

namespace sepm {

// Waveform-to-waveform separator. n_stages Bamba stages arranged as a U-Net:
// the first (n_stages-1)/2 run on the encoder side, one at the bottleneck,
// and the rest mirror them on the decoder side. The stem conv and each
// encoder conv downsample by `stride` and double the channel width; decoder
// transposed convs undo both. Skip connections are added after a 1x1
// projection. Channel width at resolution level v is base_dim * 2^v.
struct SeparatorConfig {
  std::int64_t n_stages = 5;
  std::int64_t base_dim = 64;
  std::int64_t blocks_per_stage = 8;  // total Mamba blocks per stage (both branches)
  std::int64_t kernel_size = 16;
  std::int64_t stride = 2;
  std::int64_t n_sources = 2;
  bool causal = false;
  std::int64_t sample_rate = 8000;

  // Mamba internals. Defaults calibrated against the published model sizes;
  // see docs for the calibration sweep.
  std::int64_t expand = 2;
  std::int64_t n_state = 8;
  std::int64_t d_conv = 4;
  std::int64_t dt_rank = 0;  // 0 -> ceil(stage_dim / 16)
  bool rmsnorm = false;
  bool recombine_per_block = false;
  bool use_d_term = true;

  std::int64_t n_levels() const { return (n_stages + 1) / 2; }
  std::int64_t level_of_stage(std::int64_t s) const {
    return s < n_levels() ? s : n_stages - 1 - s;
  }
  std::int64_t stage_dim(std::int64_t s) const { return base_dim << level_of_stage(s); }
  std::int64_t level_dim(std::int64_t v) const { return base_dim << v; }

  // total stride-divisions applied by the stem plus encoder convs
  std::int64_t pad_multiple() const {
    std::int64_t m = 1;
    for (std::int64_t i = 0; i < n_levels(); ++i) m *= stride;
    return m;
  }

  void validate() const {
    if (n_stages < 1 || n_stages % 2 == 0)
      throw ConfigError("SeparatorConfig: n_stages must be odd (encoder/bottleneck/decoder)");
    if (base_dim < 1) throw ConfigError("SeparatorConfig: base_dim must be >= 1");
    if (blocks_per_stage < 2 || blocks_per_stage % 2 != 0)
      throw ConfigError("SeparatorConfig: blocks_per_stage counts both branches; must be even");
    if (kernel_size <= stride)
      throw ConfigError("SeparatorConfig: kernel_size must exceed stride");
    if (stride < 2) throw ConfigError("SeparatorConfig: stride must be >= 2");
    if (n_sources < 1) throw ConfigError("SeparatorConfig: n_sources must be >= 1");
    if (sample_rate < 1) throw ConfigError("SeparatorConfig: sample_rate must be positive");
    if (expand < 1 || n_state < 1 || d_conv < 1)
      throw ConfigError("SeparatorConfig: mamba sizes must be >= 1");
  }

  BambaStackConfig stage_config(std::int64_t s) const {
    BambaStackConfig c;
    c.n_blocks_per_branch = blocks_per_stage / 2;
    c.bidirectional = !causal;
    c.recombine_per_block = recombine_per_block;
    c.block.d_model = stage_dim(s);
    c.block.expand = expand;
    c.block.n_state = n_state;
    c.block.d_conv = d_conv;
    c.block.dt_rank = dt_rank;
    c.block.causal_conv = true;  // inner depthwise conv is always left-padded
    c.block.use_d_term = use_d_term;
    c.block.rmsnorm = rmsnorm;
    return c;
  }

  bool operator==(const SeparatorConfig&) const = default;
};

template <typename T>
struct SeparatorWeights {
  SeparatorConfig cfg;
  Tensor<T> stem_w, stem_b;                  // conv 1 -> base_dim
  std::vector<Tensor<T>> down_w, down_b;     // level v -> v+1
  std::vector<BambaStackWeights<T>> stages;  // n_stages
  std::vector<Tensor<T>> up_w, up_b;         // level v+1 -> v (indexed by v)
  Tensor<T> upf_w, upf_b;                    // base_dim at full rate
  std::vector<Tensor<T>> skip_w, skip_b;     // 1x1 at level v
  Tensor<T> head_w, head_b;                  // 1x1 -> n_sources
  NamedParams<T> params;                     // ordered registry
};

template <typename T>
SeparatorWeights<T> build_separator(const SeparatorConfig& cfg, std::uint64_t seed,
                                    bool requires_grad = true) {
  cfg.validate();
  Rng rng(seed);
  SeparatorWeights<T> w;
  w.cfg = cfg;
  const std::int64_t k = cfg.kernel_size;
  const std::int64_t v_levels = cfg.n_levels();

  auto conv_init = [&](std::int64_t cin, std::int64_t cout) {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cin * k)));
    return Tensor<T>::rand_uniform({cout, cin, k}, rng, -s, s, requires_grad);
  };
  auto tconv_init = [&](std::int64_t cin, std::int64_t cout) {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cin * k)));
    return Tensor<T>::rand_uniform({cin, cout, k}, rng, -s, s, requires_grad);
  };
  auto lin_init = [&](std::int64_t cin, std::int64_t cout) {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cin)));
    return Tensor<T>::rand_uniform({cout, cin}, rng, -s, s, requires_grad);
  };

  w.stem_w = conv_init(1, cfg.base_dim);
  w.stem_b = Tensor<T>::zeros({cfg.base_dim}, requires_grad);
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    w.down_w.push_back(conv_init(cfg.level_dim(v), cfg.level_dim(v + 1)));
    w.down_b.push_back(Tensor<T>::zeros({cfg.level_dim(v + 1)}, requires_grad));
  }
  for (std::int64_t s = 0; s < cfg.n_stages; ++s)
    w.stages.push_back(init_bamba_stack<T>(cfg.stage_config(s), rng, requires_grad));
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    w.up_w.push_back(tconv_init(cfg.level_dim(v + 1), cfg.level_dim(v)));
    w.up_b.push_back(Tensor<T>::zeros({cfg.level_dim(v)}, requires_grad));
  }
  w.upf_w = tconv_init(cfg.base_dim, cfg.base_dim);
  w.upf_b = Tensor<T>::zeros({cfg.base_dim}, requires_grad);
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    w.skip_w.push_back(lin_init(cfg.level_dim(v), cfg.level_dim(v)));
    w.skip_b.push_back(Tensor<T>::zeros({cfg.level_dim(v)}, requires_grad));
  }
  w.head_w = lin_init(cfg.base_dim, cfg.n_sources);
  w.head_b = Tensor<T>::zeros({cfg.n_sources}, requires_grad);

  w.params.emplace_back("stem.w", w.stem_w);
  w.params.emplace_back("stem.b", w.stem_b);
  for (std::size_t v = 0; v < w.down_w.size(); ++v) {
    w.params.emplace_back("down" + std::to_string(v) + ".w", w.down_w[v]);
    w.params.emplace_back("down" + std::to_string(v) + ".b", w.down_b[v]);
  }
  for (std::int64_t s = 0; s < cfg.n_stages; ++s)
    append_bamba_params("stage" + std::to_string(s), w.stages[static_cast<std::size_t>(s)],
                        cfg.stage_config(s), w.params);
  for (std::size_t v = 0; v < w.up_w.size(); ++v) {
    w.params.emplace_back("up" + std::to_string(v) + ".w", w.up_w[v]);
    w.params.emplace_back("up" + std::to_string(v) + ".b", w.up_b[v]);
  }
  w.params.emplace_back("upf.w", w.upf_w);
  w.params.emplace_back("upf.b", w.upf_b);
  for (std::size_t v = 0; v < w.skip_w.size(); ++v) {
    w.params.emplace_back("skip" + std::to_string(v) + ".w", w.skip_w[v]);
    w.params.emplace_back("skip" + std::to_string(v) + ".b", w.skip_b[v]);
  }
  w.params.emplace_back("head.w", w.head_w);
  w.params.emplace_back("head.b", w.head_b);
  return w;
}

inline std::int64_t count_params(const SeparatorConfig& cfg) {
  cfg.validate();
  const std::int64_t k = cfg.kernel_size;
  const std::int64_t v_levels = cfg.n_levels();
  std::int64_t total = 0;
  total += 1 * cfg.base_dim * k + cfg.base_dim;  // stem
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    total += cfg.level_dim(v) * cfg.level_dim(v + 1) * k + cfg.level_dim(v + 1);  // down
    total += cfg.level_dim(v + 1) * cfg.level_dim(v) * k + cfg.level_dim(v);      // up
    total += cfg.level_dim(v) * cfg.level_dim(v) + cfg.level_dim(v);              // skip 1x1
  }
  total += cfg.base_dim * cfg.base_dim * k + cfg.base_dim;  // final upsample
  total += cfg.base_dim * cfg.n_sources + cfg.n_sources;    // head
  for (std::int64_t s = 0; s < cfg.n_stages; ++s) total += bamba_param_count(cfg.stage_config(s));
  return total;
}

// How far into the future a causal model's output can depend on its input.
// The stem and encoder convs are left-padded (no future taps); each decoder
// transposed conv emitting at rate r reaches (kernel - stride) * r samples
// ahead, so Lambda = (kernel - stride) * sum_{v=0}^{levels-1} stride^v.
inline std::int64_t lookahead_samples(const SeparatorConfig& cfg) {
  std::int64_t acc = 0, r = 1;
  for (std::int64_t v = 0; v < cfg.n_levels(); ++v) {
    acc += (cfg.kernel_size - cfg.stride) * r;
    r *= cfg.stride;
  }
  return acc;
}

template <typename T>
Tensor<T> separator_forward(const SeparatorWeights<T>& w, const Tensor<T>& mixture,
                            ScanAlgo algo = ScanAlgo::Sequential) {
  const SeparatorConfig& cfg = w.cfg;
  if (mixture.ndim() != 2 || mixture.dim(0) != 1)
    throw ShapeError("separator_forward: expects [1 x L], got " + shape_str(mixture.shape()));
  const std::int64_t l = mixture.dim(1);
  if (l < cfg.kernel_size)
    throw DataError("separator_forward: input too short (" + std::to_string(l) + " < kernel " +
                    std::to_string(cfg.kernel_size) + ")");
  const std::int64_t m = cfg.pad_multiple();
  const std::int64_t lp = (l + m - 1) / m * m;
  Tensor<T> x = lp == l ? mixture : pad_last(mixture, 0, lp - l);

  const PadMode mode = cfg.causal ? PadMode::SameLeft : PadMode::SameCentered;
  const std::int64_t crop_head =
      cfg.causal ? (cfg.kernel_size - cfg.stride) : (cfg.kernel_size - cfg.stride) / 2;
  const std::int64_t v_levels = cfg.n_levels();

  Tensor<T> cur = relu(add_channel_bias(conv1d(x, w.stem_w, cfg.stride, mode), w.stem_b));
  std::vector<Tensor<T>> skips;
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    cur = bamba_forward(cfg.stage_config(v), w.stages[static_cast<std::size_t>(v)], cur, algo);
    skips.push_back(cur);
    cur = relu(add_channel_bias(conv1d(cur, w.down_w[static_cast<std::size_t>(v)], cfg.stride, mode),
                                w.down_b[static_cast<std::size_t>(v)]));
  }
  cur = bamba_forward(cfg.stage_config(v_levels - 1), w.stages[static_cast<std::size_t>(v_levels - 1)],
                      cur, algo);
  for (std::int64_t v = v_levels - 2; v >= 0; --v) {
    const std::int64_t out_len = cur.dim(1) * cfg.stride;
    cur = relu(add_channel_bias(
        conv_transpose1d(cur, w.up_w[static_cast<std::size_t>(v)], cfg.stride, crop_head, out_len),
        w.up_b[static_cast<std::size_t>(v)]));
    Tensor<T> proj = add_channel_bias(matmul(w.skip_w[static_cast<std::size_t>(v)],
                                             skips[static_cast<std::size_t>(v)]),
                                      w.skip_b[static_cast<std::size_t>(v)]);
    cur = add(cur, proj);
    const std::int64_t s = cfg.n_stages - 1 - v;
    cur = bamba_forward(cfg.stage_config(s), w.stages[static_cast<std::size_t>(s)], cur, algo);
  }
  cur = relu(add_channel_bias(
      conv_transpose1d(cur, w.upf_w, cfg.stride, crop_head, cur.dim(1) * cfg.stride), w.upf_b));
  Tensor<T> out = add_channel_bias(matmul(w.head_w, cur), w.head_b);
  if (lp != l) out = crop_last(out, 0, l);
  return out;
}

// ---------------------------------------------------------------------------
// Multiply-accumulate accounting
// ---------------------------------------------------------------------------

// Conventions: 1 MAC = one multiply + one add. Linear maps cost
// D_in*D_out*L, convolutions C_in*C_out*K*L_out / groups (transposed: per
// input step), bias and residual adds 1 each, relu 0, exp/softplus 1,
// sigmoid 2, silu 3, and the scan 3*d_inner*n_state per timestep
// (discretize, state update, readout) plus the feedthrough.
inline std::int64_t macs_linear(std::int64_t din, std::int64_t dout, std::int64_t l) {
  return din * dout * l;
}
inline std::int64_t macs_conv1d(std::int64_t cin, std::int64_t cout, std::int64_t k,
                                std::int64_t lout, std::int64_t groups = 1) {
  return cin / groups * cout * k * lout;
}
inline std::int64_t macs_conv_transpose1d(std::int64_t cin, std::int64_t cout, std::int64_t k,
                                          std::int64_t lin) {
  return cin * cout * k * lin;
}

inline std::int64_t count_macs_block(const MambaBlockConfig& b, std::int64_t l) {
  const std::int64_t d = b.d_model, di = b.d_inner();
  const std::int64_t n = b.n_state, r = b.dt_rank_eff();
  std::int64_t total = 0;
  if (b.rmsnorm) total += 4 * d * l;
  total += 2 * macs_linear(d, di, l);                 // in_a, in_b
  total += macs_conv1d(di, di, b.d_conv, l, di);      // depthwise conv
  total += di * l;                                    // conv bias
  total += 3 * di * l;                                // silu on ssm path
  total += 2 * macs_linear(di, n, l);                 // w_b, w_c
  total += macs_linear(di, r, l) + macs_linear(r, di, l);  // delta projections
  total += 2 * di * l;                                // delta bias + softplus
  total += 3 * di * n * l;                            // scan update/readout
  if (b.use_d_term) total += di * l;                  // feedthrough
  total += 3 * di * l + di * l;                       // gate silu + gate mul
  total += macs_linear(di, d, l);                     // out
  total += d * l;                                     // residual add
  return total;
}

inline std::int64_t count_macs(const SeparatorConfig& cfg, double seconds,
                               std::int64_t sample_rate = 0) {
  cfg.validate();
  if (seconds <= 0) throw ConfigError("count_macs: seconds must be > 0");
  if (sample_rate == 0) sample_rate = cfg.sample_rate;
  const std::int64_t m = cfg.pad_multiple();
  std::int64_t l = static_cast<std::int64_t>(std::llround(seconds * static_cast<double>(sample_rate)));
  l = (l + m - 1) / m * m;

  const std::int64_t k = cfg.kernel_size;
  const std::int64_t v_levels = cfg.n_levels();
  auto level_len = [&](std::int64_t v) {
    std::int64_t len = l;
    for (std::int64_t i = 0; i <= v; ++i) len /= cfg.stride;
    return len;
  };

  std::int64_t total = 0;
  total += macs_conv1d(1, cfg.base_dim, k, level_len(0)) + cfg.base_dim * level_len(0);
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    const std::int64_t cv = cfg.level_dim(v), cn = cfg.level_dim(v + 1);
    total += macs_conv1d(cv, cn, k, level_len(v + 1)) + cn * level_len(v + 1);       // down
    total += macs_conv_transpose1d(cn, cv, k, level_len(v + 1)) + cv * level_len(v);  // up
    total += macs_linear(cv, cv, level_len(v)) + cv * level_len(v);                   // skip 1x1
    total += cv * level_len(v);                                                       // skip add
  }
  total += macs_conv_transpose1d(cfg.base_dim, cfg.base_dim, k, level_len(0)) + cfg.base_dim * l;
  total += macs_linear(cfg.base_dim, cfg.n_sources, l) + cfg.n_sources * l;  // head
  for (std::int64_t s = 0; s < cfg.n_stages; ++s) {
    const auto sc = cfg.stage_config(s);
    total += sc.total_blocks() * count_macs_block(sc.block, level_len(cfg.level_of_stage(s)));
  }
  return total;
}

// Recorded-activation inventory for one forward pass (elements, not bytes).
// Mirrors the ops actually emitted by separator_forward; used by the
// training-memory estimate.
inline std::int64_t count_activation_elems(const SeparatorConfig& cfg, std::int64_t l_input) {
  cfg.validate();
  const std::int64_t m = cfg.pad_multiple();
  const std::int64_t l = (l_input + m - 1) / m * m;
  const std::int64_t v_levels = cfg.n_levels();
  auto level_len = [&](std::int64_t v) {
    std::int64_t len = l;
    for (std::int64_t i = 0; i <= v; ++i) len /= cfg.stride;
    return len;
  };
  auto block_elems = [&](const MambaBlockConfig& b, std::int64_t ls) {
    const std::int64_t d = b.d_model, di = b.d_inner();
    std::int64_t e = 0;
    if (b.rmsnorm) e += d * ls;
    e += 11 * di * ls;                       // projections, conv, bias, act, gate chain
    e += 2 * b.n_state * ls;                 // b, c sequences
    e += b.dt_rank_eff() * ls;               // low-rank delta
    e += di * b.n_state * ls;                // scan state history
    e += 2 * d * ls;                         // out projection + residual
    return e;
  };
  std::int64_t total = l;  // padded input copy
  total += 3 * cfg.base_dim * level_len(0);  // stem conv + bias + relu
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    total += 3 * cfg.level_dim(v + 1) * level_len(v + 1);  // down conv chain
    total += 3 * cfg.level_dim(v) * level_len(v);          // up conv chain
    total += 3 * cfg.level_dim(v) * level_len(v);          // skip proj + bias + add
  }
  total += 3 * cfg.base_dim * level_len(0) * cfg.stride;  // final upsample chain
  total += 2 * cfg.n_sources * l;                         // head + bias
  for (std::int64_t s = 0; s < cfg.n_stages; ++s) {
    const auto sc = cfg.stage_config(s);
    const std::int64_t ls = level_len(cfg.level_of_stage(s));
    total += sc.total_blocks() * block_elems(sc.block, ls);
    total += sc.block.d_model * ls;  // branch sum
  }
  return total;
}

}  // namespace sepm
