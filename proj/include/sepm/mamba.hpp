#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sepm/ssm.hpp"
#include "sepm/tensor.hpp"

namespace sepm {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct MambaBlockConfig {
  std::int64_t d_model = 64;
  std::int64_t expand = 2;
  std::int64_t n_state = 8;
  std::int64_t d_conv = 4;
  std::int64_t dt_rank = 0;  // 0 -> ceil(d_model / 16)
  bool causal_conv = true;
  bool use_d_term = true;  // learned per-channel feedthrough inside the scan
  bool rmsnorm = false;    // optional pre-block normalization

  std::int64_t d_inner() const { return expand * d_model; }
  std::int64_t dt_rank_eff() const { return dt_rank > 0 ? dt_rank : default_dt_rank(d_model); }

  void validate() const {
    if (d_model < 1 || expand < 1 || n_state < 1 || d_conv < 1)
      throw ConfigError("MambaBlockConfig: all sizes must be >= 1");
  }
};

// Sequence block: x + out_proj( SSM(silu(conv(in_a x))) * silu(in_b x) ).
// The two input projections carry no bias; the depthwise conv does.
template <typename T>
struct MambaBlockWeights {
  Tensor<T> w_in_a;  // [d_inner x d_model], SSM path
  Tensor<T> w_in_b;  // [d_inner x d_model], gate path
  Tensor<T> conv_w;  // [d_inner x 1 x d_conv] depthwise
  Tensor<T> conv_b;  // [d_inner]
  SsmParams<T> ssm;
  Tensor<T> w_out;      // [d_model x d_inner]
  Tensor<T> norm_gain;  // [d_model] when rmsnorm
};

template <typename T>
MambaBlockWeights<T> init_mamba_block(const MambaBlockConfig& cfg, Rng& rng,
                                      bool requires_grad = true) {
  cfg.validate();
  const std::int64_t d = cfg.d_model, din = cfg.d_inner();
  MambaBlockWeights<T> w;
  const T s_in = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  const T s_out = static_cast<T>(1.0 / std::sqrt(static_cast<double>(din)));
  w.w_in_a = Tensor<T>::rand_uniform({din, d}, rng, -s_in, s_in, requires_grad);
  w.w_in_b = Tensor<T>::rand_uniform({din, d}, rng, -s_in, s_in, requires_grad);
  const T s_conv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(cfg.d_conv)));
  w.conv_w = Tensor<T>::rand_uniform({din, 1, cfg.d_conv}, rng, -s_conv, s_conv, requires_grad);
  w.conv_b = Tensor<T>::zeros({din}, requires_grad);
  w.ssm = init_ssm_params<T>(din, cfg.n_state, cfg.dt_rank_eff(), rng, cfg.use_d_term, requires_grad);
  w.w_out = Tensor<T>::rand_uniform({d, din}, rng, -s_out, s_out, requires_grad);
  if (cfg.rmsnorm) w.norm_gain = Tensor<T>::full({d}, T(1), requires_grad);
  return w;
}

template <typename T>
void append_mamba_params(const std::string& prefix, MambaBlockWeights<T>& w,
                         const MambaBlockConfig& cfg, NamedParams<T>& out) {
  out.emplace_back(prefix + ".in_a.w", w.w_in_a);
  out.emplace_back(prefix + ".in_b.w", w.w_in_b);
  out.emplace_back(prefix + ".conv.w", w.conv_w);
  out.emplace_back(prefix + ".conv.b", w.conv_b);
  out.emplace_back(prefix + ".ssm.a_log", w.ssm.a_log);
  out.emplace_back(prefix + ".ssm.w_b", w.ssm.w_b);
  out.emplace_back(prefix + ".ssm.w_c", w.ssm.w_c);
  out.emplace_back(prefix + ".ssm.w_dt_lo", w.ssm.w_dt_lo);
  out.emplace_back(prefix + ".ssm.w_dt", w.ssm.w_dt);
  out.emplace_back(prefix + ".ssm.dt_bias", w.ssm.dt_bias);
  if (cfg.use_d_term) out.emplace_back(prefix + ".ssm.d", w.ssm.d_skip);
  out.emplace_back(prefix + ".out.w", w.w_out);
  if (cfg.rmsnorm) out.emplace_back(prefix + ".norm.gain", w.norm_gain);
}

inline std::int64_t mamba_block_param_count(const MambaBlockConfig& cfg) {
  const std::int64_t d = cfg.d_model, din = cfg.d_inner();
  const std::int64_t n = cfg.n_state, r = cfg.dt_rank_eff(), k = cfg.d_conv;
  std::int64_t count = 0;
  count += 2 * din * d;      // in_a, in_b
  count += din * k + din;    // depthwise conv + bias
  count += din * n;          // a_log
  count += 2 * n * din;      // w_b, w_c
  count += 2 * din * r;      // w_dt_lo, w_dt
  count += din;              // dt_bias
  if (cfg.use_d_term) count += din;
  count += d * din;          // out
  if (cfg.rmsnorm) count += d;
  return count;
}

template <typename T>
Tensor<T> mamba_block_forward(const MambaBlockConfig& cfg, const MambaBlockWeights<T>& w,
                              const Tensor<T>& x, ScanAlgo algo = ScanAlgo::Sequential) {
  if (x.ndim() != 2 || x.dim(0) != cfg.d_model)
    throw ConfigError("mamba_block_forward: input " + shape_str(x.shape()) + " does not match d_model " +
                      std::to_string(cfg.d_model));
  Tensor<T> h = cfg.rmsnorm ? rmsnorm_channels(x, w.norm_gain) : x;
  Tensor<T> u = matmul(w.w_in_a, h);
  u = conv1d(u, w.conv_w, 1, cfg.causal_conv ? PadMode::SameLeft : PadMode::SameCentered,
             cfg.d_inner());
  u = silu(add_channel_bias(u, w.conv_b));
  auto scanned = detail::scan_with_algo(w.ssm, u, nullptr, algo);
  Tensor<T> gate = silu(matmul(w.w_in_b, h));
  Tensor<T> out = matmul(w.w_out, mul(scanned.y, gate));
  return add(x, out);
}

struct BambaStackConfig {
  std::int64_t n_blocks_per_branch = 1;
  bool bidirectional = true;
  // off by default: summing once per stack trains better than recombining
  // the two directions after every block
  bool recombine_per_block = false;
  MambaBlockConfig block;

  std::int64_t total_blocks() const { return 2 * n_blocks_per_branch; }

  void validate() const {
    block.validate();
    if (n_blocks_per_branch < 1) throw ConfigError("BambaStackConfig: need >= 1 block per branch");
  }
};

// Two weight-independent branches. In bidirectional mode the second branch
// runs on the time-reversed signal; causal mode keeps both un-reversed.
template <typename T>
struct BambaStackWeights {
  std::vector<MambaBlockWeights<T>> fwd;
  std::vector<MambaBlockWeights<T>> rev;
};

template <typename T>
BambaStackWeights<T> init_bamba_stack(const BambaStackConfig& cfg, Rng& rng,
                                      bool requires_grad = true) {
  cfg.validate();
  BambaStackWeights<T> w;
  for (std::int64_t i = 0; i < cfg.n_blocks_per_branch; ++i)
    w.fwd.push_back(init_mamba_block<T>(cfg.block, rng, requires_grad));
  for (std::int64_t i = 0; i < cfg.n_blocks_per_branch; ++i)
    w.rev.push_back(init_mamba_block<T>(cfg.block, rng, requires_grad));
  return w;
}

template <typename T>
void append_bamba_params(const std::string& prefix, BambaStackWeights<T>& w,
                         const BambaStackConfig& cfg, NamedParams<T>& out) {
  for (std::size_t i = 0; i < w.fwd.size(); ++i)
    append_mamba_params(prefix + ".fwd" + std::to_string(i), w.fwd[i], cfg.block, out);
  for (std::size_t i = 0; i < w.rev.size(); ++i)
    append_mamba_params(prefix + ".rev" + std::to_string(i), w.rev[i], cfg.block, out);
}

inline std::int64_t bamba_param_count(const BambaStackConfig& cfg) {
  return cfg.total_blocks() * mamba_block_param_count(cfg.block);
}

template <typename T>
Tensor<T> bamba_forward(const BambaStackConfig& cfg, const BambaStackWeights<T>& w,
                        const Tensor<T>& x, ScanAlgo algo = ScanAlgo::Sequential) {
  cfg.validate();
  if (cfg.recombine_per_block) {
    Tensor<T> cur = x;
    for (std::int64_t i = 0; i < cfg.n_blocks_per_branch; ++i) {
      Tensor<T> a = mamba_block_forward(cfg.block, w.fwd[i], cur, algo);
      Tensor<T> b =
          cfg.bidirectional
              ? flip_time(mamba_block_forward(cfg.block, w.rev[i], flip_time(cur), algo))
              : mamba_block_forward(cfg.block, w.rev[i], cur, algo);
      cur = add(a, b);
    }
    return cur;
  }
  Tensor<T> a = x;
  for (std::int64_t i = 0; i < cfg.n_blocks_per_branch; ++i)
    a = mamba_block_forward(cfg.block, w.fwd[i], a, algo);
  Tensor<T> b = cfg.bidirectional ? flip_time(x) : x;
  for (std::int64_t i = 0; i < cfg.n_blocks_per_branch; ++i)
    b = mamba_block_forward(cfg.block, w.rev[i], b, algo);
  if (cfg.bidirectional) b = flip_time(b);
  return add(a, b);
}

}  // namespace sepm
