#pragma once

#include <cstdint>
#include <cstring>
#include <sstream>
#include <string>
#include <vector>

#include "sepm/separator.hpp"

namespace sepm {

// Chunked causal inference. Each call consumes a frame whose length is a
// multiple of the model's total stride and emits every output sample that no
// future input can still change; the decoder's transposed convolutions make
// the emitted stream lag the input by lookahead_samples(cfg). Because every
// kernel walks its data in the same order as the batch path, streamed
// samples equal batch-forward samples bit for bit.

namespace detail {

// FIFO of feature columns ([C] each) buffered between encoder and decoder.
template <typename T>
struct ColumnFifo {
  std::int64_t channels = 0;
  std::vector<T> data;  // column-major: [n_cols][channels]

  std::int64_t cols() const {
    return channels == 0 ? 0 : static_cast<std::int64_t>(data.size()) / channels;
  }
  // append from a [C x n] row-major chunk
  void push(const Array<T>& chunk) {
    const std::int64_t n = chunk.dim(1);
    const std::int64_t c = chunk.dim(0);
    const std::size_t base = data.size();
    data.resize(base + static_cast<std::size_t>(n * c));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < c; ++i)
        data[base + static_cast<std::size_t>(j * c + i)] = chunk.data[i * chunk.dim(1) + j];
  }
  Array<T> pop(std::int64_t n) {
    if (n > cols()) throw NumericError("stream skip buffer underflow");
    Array<T> out({channels, n});
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t i = 0; i < channels; ++i)
        out.data[i * n + j] = data[static_cast<std::size_t>(j * channels + i)];
    data.erase(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(n * channels));
    return out;
  }
};

}  // namespace detail

template <typename T>
struct StreamState {
  SeparatorConfig cfg;

  struct ConvState {
    Array<T> tail;  // last (k-1) inputs, [C_in x (k-1)]
  };
  struct TConvState {
    Array<T> pending;       // partially accumulated raw columns, [C_out x (k-stride)]
    std::int64_t seen = 0;  // input columns consumed so far
  };
  struct BlockState {
    Array<T> conv_tail;  // [d_inner x (d_conv-1)]
    Array<T> h;          // [d_inner x n_state]
  };

  ConvState stem;
  std::vector<ConvState> down;                       // per encoder level
  std::vector<std::vector<BlockState>> stage_fwd;    // [stage][block]
  std::vector<std::vector<BlockState>> stage_rev;
  std::vector<TConvState> up;  // per decoder level v
  TConvState upf;
  std::vector<detail::ColumnFifo<T>> skip;  // per level v
  bool finished = false;
};

template <typename T>
StreamState<T> make_stream_state(const SeparatorConfig& cfg) {
  cfg.validate();
  if (!cfg.causal) throw ConfigError("streaming requires a causal configuration");
  StreamState<T> st;
  st.cfg = cfg;
  const std::int64_t k = cfg.kernel_size;
  const std::int64_t v_levels = cfg.n_levels();
  st.stem.tail = Array<T>({1, k - 1});
  for (std::int64_t v = 0; v + 1 < v_levels; ++v)
    st.down.push_back({Array<T>({cfg.level_dim(v), k - 1})});
  st.stage_fwd.resize(static_cast<std::size_t>(cfg.n_stages));
  st.stage_rev.resize(static_cast<std::size_t>(cfg.n_stages));
  for (std::int64_t s = 0; s < cfg.n_stages; ++s) {
    const auto sc = cfg.stage_config(s);
    const std::int64_t di = sc.block.d_inner();
    for (std::int64_t b = 0; b < sc.n_blocks_per_branch; ++b) {
      st.stage_fwd[static_cast<std::size_t>(s)].push_back(
          {Array<T>({di, sc.block.d_conv - 1}), Array<T>({di, sc.block.n_state})});
      st.stage_rev[static_cast<std::size_t>(s)].push_back(
          {Array<T>({di, sc.block.d_conv - 1}), Array<T>({di, sc.block.n_state})});
    }
  }
  for (std::int64_t v = 0; v + 1 < v_levels; ++v)
    st.up.push_back({Array<T>({cfg.level_dim(v), k - cfg.stride}), 0});
  st.upf.pending = Array<T>({cfg.base_dim, k - cfg.stride});
  for (std::int64_t v = 0; v + 1 < v_levels; ++v)
    st.skip.push_back({cfg.level_dim(v), {}});
  return st;
}

namespace detail {

// Strided causal conv on a chunk: prepend the carried tail, run a valid conv,
// keep the last k-1 inputs as the new tail. Identical arithmetic to the
// batch SameLeft path because the initial tail is the implicit zero padding.
template <typename T>
Array<T> stream_conv(const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                     typename StreamState<T>::ConvState& st, const Array<T>& chunk,
                     bool relu_after) {
  const std::int64_t cin = chunk.dim(0), n = chunk.dim(1);
  const std::int64_t k = w.dim(2);
  Array<T> ext({cin, (k - 1) + n});
  for (std::int64_t c = 0; c < cin; ++c) {
    std::copy_n(st.tail.ptr() + c * (k - 1), k - 1, ext.ptr() + c * (k - 1 + n));
    std::copy_n(chunk.ptr() + c * n, n, ext.ptr() + c * (k - 1 + n) + (k - 1));
  }
  // new tail = last k-1 columns of ext
  for (std::int64_t c = 0; c < cin; ++c)
    std::copy_n(ext.ptr() + c * (k - 1 + n) + n, k - 1, st.tail.ptr() + c * (k - 1));
  Tensor<T> y = conv1d(Tensor<T>::from_array(std::move(ext)), w, stride, PadMode::Valid);
  y = add_channel_bias(y, b);
  if (relu_after) y = relu(y);
  return y.array();
}

// Transposed conv on a chunk with (k-stride) pending raw columns carried
// across calls. Scatter order (input-major, channel-minor) matches the batch
// kernel's gather order, so partial sums agree bitwise.
template <typename T>
Array<T> stream_tconv(const Tensor<T>& w, const Tensor<T>& b, std::int64_t stride,
                      std::int64_t crop_head, typename StreamState<T>::TConvState& st,
                      const Array<T>& chunk, bool relu_after) {
  const std::int64_t cin = chunk.dim(0), n = chunk.dim(1);
  const std::int64_t cout = w.dim(1), k = w.dim(2);
  const std::int64_t tail = k - stride;
  Array<T> raw({cout, n * stride + tail});
  const std::int64_t rl = raw.dim(1);
  for (std::int64_t o = 0; o < cout; ++o)
    std::copy_n(st.pending.ptr() + o * tail, tail, raw.ptr() + o * rl);
  const T* wp = w.values().data();
  const T* xp = chunk.ptr();
  // per raw column j: contributions from (i, c) ascending, same as batch
  for (std::int64_t o = 0; o < cout; ++o) {
    T* rrow = raw.ptr() + o * rl;
    for (std::int64_t j = 0; j < rl; ++j) {
      const std::int64_t lo = j - (k - 1);
      std::int64_t i0 = lo <= 0 ? 0 : (lo + stride - 1) / stride;
      std::int64_t i1 = j / stride;
      if (i1 >= n) i1 = n - 1;
      T acc = rrow[j];
      for (std::int64_t i = i0; i <= i1; ++i) {
        const std::int64_t jj = j - i * stride;
        for (std::int64_t c = 0; c < cin; ++c) acc += wp[(c * cout + o) * k + jj] * xp[c * n + i];
      }
      rrow[j] = acc;
    }
  }
  for (std::int64_t o = 0; o < cout; ++o)
    std::copy_n(raw.ptr() + o * rl + n * stride, tail, st.pending.ptr() + o * tail);

  // raw global range covered by this chunk: [seen*stride, (seen+n)*stride)
  const std::int64_t g0 = st.seen * stride;
  const std::int64_t g1 = (st.seen + n) * stride;
  st.seen += n;
  const std::int64_t e0 = std::max<std::int64_t>(g0, crop_head);
  if (e0 >= g1) return Array<T>({cout, 0});
  const std::int64_t local0 = e0 - g0;
  const std::int64_t m = g1 - e0;
  Array<T> out({cout, m});
  for (std::int64_t o = 0; o < cout; ++o)
    std::copy_n(raw.ptr() + o * rl + local0, m, out.ptr() + o * m);
  Tensor<T> y = add_channel_bias(Tensor<T>::from_array(std::move(out)), b);
  if (relu_after) y = relu(y);
  return y.array();
}

template <typename T>
Array<T> stream_mamba_block(const MambaBlockConfig& cfg, const MambaBlockWeights<T>& w,
                            typename StreamState<T>::BlockState& st, const Array<T>& chunk) {
  const std::int64_t n = chunk.dim(1);
  Tensor<T> x = Tensor<T>::from_array(chunk);
  Tensor<T> h = cfg.rmsnorm ? rmsnorm_channels(x, w.norm_gain) : x;
  Tensor<T> u = matmul(w.w_in_a, h);
  {
    // depthwise causal conv with carried tail
    const std::int64_t di = cfg.d_inner(), k = cfg.d_conv;
    Array<T> ext({di, (k - 1) + n});
    for (std::int64_t c = 0; c < di; ++c) {
      std::copy_n(st.conv_tail.ptr() + c * (k - 1), k - 1, ext.ptr() + c * (k - 1 + n));
      std::copy_n(u.values().data() + c * n, n, ext.ptr() + c * (k - 1 + n) + (k - 1));
    }
    for (std::int64_t c = 0; c < di; ++c)
      std::copy_n(ext.ptr() + c * (k - 1 + n) + n, k - 1, st.conv_tail.ptr() + c * (k - 1));
    u = conv1d(Tensor<T>::from_array(std::move(ext)), w.conv_w, 1, PadMode::Valid, di);
  }
  u = silu(add_channel_bias(u, w.conv_b));
  Array<T> h_next;
  Tensor<T> b = matmul(w.ssm.w_b, u);
  Tensor<T> c = matmul(w.ssm.w_c, u);
  Tensor<T> delta = softplus(add_channel_bias(matmul(w.ssm.w_dt, matmul(w.ssm.w_dt_lo, u)),
                                              w.ssm.dt_bias));
  Tensor<T> skip = w.ssm.use_skip ? w.ssm.d_skip : Tensor<T>();
  Tensor<T> y = ssm_scan(u, w.ssm.a_log, b, c, delta, skip, ScanAlgo::Sequential, &st.h, &h_next);
  st.h = h_next;
  Tensor<T> gate = silu(matmul(w.w_in_b, h));
  Tensor<T> out = add(x, matmul(w.w_out, mul(y, gate)));
  return out.array();
}

template <typename T>
Array<T> stream_stage(const BambaStackConfig& cfg, const BambaStackWeights<T>& w,
                      std::vector<typename StreamState<T>::BlockState>& fwd,
                      std::vector<typename StreamState<T>::BlockState>& rev,
                      const Array<T>& chunk) {
  // causal stack: two un-reversed branches, summed once
  Array<T> a = chunk;
  for (std::size_t i = 0; i < w.fwd.size(); ++i) a = stream_mamba_block(cfg.block, w.fwd[i], fwd[i], a);
  Array<T> b = chunk;
  for (std::size_t i = 0; i < w.rev.size(); ++i) b = stream_mamba_block(cfg.block, w.rev[i], rev[i], b);
  Tensor<T> sum = add(Tensor<T>::from_array(std::move(a)), Tensor<T>::from_array(std::move(b)));
  return sum.array();
}

// Decoder tail shared by the streaming step and the finish flush.
template <typename T>
Array<T> stream_decoder(const SeparatorWeights<T>& w, StreamState<T>& st, Array<T> cur,
                        bool flush) {
  const SeparatorConfig& cfg = st.cfg;
  const std::int64_t v_levels = cfg.n_levels();
  const std::int64_t crop_head = cfg.kernel_size - cfg.stride;
  for (std::int64_t v = v_levels - 2; v >= 0; --v) {
    Array<T> upc =
        cur.dim(1) > 0
            ? stream_tconv(w.up_w[static_cast<std::size_t>(v)], w.up_b[static_cast<std::size_t>(v)],
                           cfg.stride, crop_head, st.up[static_cast<std::size_t>(v)], cur, true)
            : Array<T>({cfg.level_dim(v), 0});
    if (flush) {
      // remaining raw columns receive no further input; emit them now
      auto& ts = st.up[static_cast<std::size_t>(v)];
      Tensor<T> tailv = add_channel_bias(Tensor<T>::from_array(ts.pending),
                                         w.up_b[static_cast<std::size_t>(v)]);
      tailv = relu(tailv);
      Array<T> merged({cfg.level_dim(v), upc.dim(1) + tailv.dim(1)});
      for (std::int64_t cdim = 0; cdim < cfg.level_dim(v); ++cdim) {
        std::copy_n(upc.ptr() + cdim * upc.dim(1), upc.dim(1), merged.ptr() + cdim * merged.dim(1));
        std::copy_n(tailv.values().data() + cdim * tailv.dim(1), tailv.dim(1),
                    merged.ptr() + cdim * merged.dim(1) + upc.dim(1));
      }
      upc = std::move(merged);
    }
    if (upc.dim(1) == 0) {
      cur = Array<T>({cfg.level_dim(v), 0});
      continue;
    }
    Array<T> sk = st.skip[static_cast<std::size_t>(v)].pop(upc.dim(1));
    Tensor<T> proj = add_channel_bias(
        matmul(w.skip_w[static_cast<std::size_t>(v)], Tensor<T>::from_array(std::move(sk))),
        w.skip_b[static_cast<std::size_t>(v)]);
    Tensor<T> merged = add(Tensor<T>::from_array(std::move(upc)), proj);
    const std::int64_t s = cfg.n_stages - 1 - v;
    cur = stream_stage(cfg.stage_config(s), w.stages[static_cast<std::size_t>(s)],
                       st.stage_fwd[static_cast<std::size_t>(s)],
                       st.stage_rev[static_cast<std::size_t>(s)], merged.array());
  }
  Array<T> full = cur.dim(1) > 0
                      ? stream_tconv(w.upf_w, w.upf_b, cfg.stride, crop_head, st.upf, cur, true)
                      : Array<T>({cfg.base_dim, 0});
  if (flush) {
    Tensor<T> tailv = relu(add_channel_bias(Tensor<T>::from_array(st.upf.pending), w.upf_b));
    Array<T> merged({cfg.base_dim, full.dim(1) + tailv.dim(1)});
    for (std::int64_t cdim = 0; cdim < cfg.base_dim; ++cdim) {
      std::copy_n(full.ptr() + cdim * full.dim(1), full.dim(1), merged.ptr() + cdim * merged.dim(1));
      std::copy_n(tailv.values().data() + cdim * tailv.dim(1), tailv.dim(1),
                  merged.ptr() + cdim * merged.dim(1) + full.dim(1));
    }
    full = std::move(merged);
  }
  if (full.dim(1) == 0) return Array<T>({cfg.n_sources, 0});
  Tensor<T> out = add_channel_bias(matmul(w.head_w, Tensor<T>::from_array(std::move(full))),
                                   w.head_b);
  return out.array();
}

}  // namespace detail

// Feeds one frame; returns every newly completed output sample ([n_sources x m],
// m <= frame length). Outputs lag the input by lookahead_samples(cfg).
template <typename T>
Array<T> forward_streaming(const SeparatorWeights<T>& w, const Array<T>& frame,
                           StreamState<T>& st) {
  if (st.cfg != w.cfg) throw ConfigError("stream state built for a different configuration");
  if (st.finished) throw ConfigError("stream already finished");
  if (frame.ndim() != 2 || frame.dim(0) != 1)
    throw ShapeError("forward_streaming: frame must be [1 x n]");
  const SeparatorConfig& cfg = st.cfg;
  const std::int64_t n = frame.dim(1);
  if (n <= 0 || n % cfg.pad_multiple() != 0)
    throw ConfigError("forward_streaming: frame length must be a positive multiple of " +
                      std::to_string(cfg.pad_multiple()));
  const std::int64_t v_levels = cfg.n_levels();

  Array<T> cur = detail::stream_conv(w.stem_w, w.stem_b, cfg.stride, st.stem, frame, true);
  for (std::int64_t v = 0; v + 1 < v_levels; ++v) {
    cur = detail::stream_stage(cfg.stage_config(v), w.stages[static_cast<std::size_t>(v)],
                               st.stage_fwd[static_cast<std::size_t>(v)],
                               st.stage_rev[static_cast<std::size_t>(v)], cur);
    st.skip[static_cast<std::size_t>(v)].push(cur);
    cur = detail::stream_conv(w.down_w[static_cast<std::size_t>(v)],
                              w.down_b[static_cast<std::size_t>(v)], cfg.stride,
                              st.down[static_cast<std::size_t>(v)], cur, true);
  }
  cur = detail::stream_stage(cfg.stage_config(v_levels - 1),
                             w.stages[static_cast<std::size_t>(v_levels - 1)],
                             st.stage_fwd[static_cast<std::size_t>(v_levels - 1)],
                             st.stage_rev[static_cast<std::size_t>(v_levels - 1)], cur);
  return detail::stream_decoder(w, st, std::move(cur), false);
}

// Emits the trailing lookahead window once the input stream has ended. The
// state cannot be fed afterwards.
template <typename T>
Array<T> streaming_finish(const SeparatorWeights<T>& w, StreamState<T>& st) {
  if (st.cfg != w.cfg) throw ConfigError("stream state built for a different configuration");
  if (st.finished) throw ConfigError("stream already finished");
  st.finished = true;
  const std::int64_t bott = st.cfg.n_levels() - 1;
  Array<T> empty({st.cfg.level_dim(bott), 0});
  return detail::stream_decoder(w, st, std::move(empty), true);
}

// ---------------------------------------------------------------------------
// Carry serialization (bit-exact round trip)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_array(std::string& out, const Array<T>& a) {
  const std::uint64_t nd = a.shape.size();
  out.append(reinterpret_cast<const char*>(&nd), sizeof(nd));
  for (auto d : a.shape) {
    const std::int64_t v = d;
    out.append(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(T));
}

template <typename T>
Array<T> get_array(const std::string& in, std::size_t& pos) {
  auto need = [&](std::size_t n) {
    if (pos + n > in.size()) throw DataError("stream state blob truncated");
  };
  std::uint64_t nd = 0;
  need(sizeof(nd));
  std::memcpy(&nd, in.data() + pos, sizeof(nd));
  pos += sizeof(nd);
  Shape shape(nd);
  for (auto& d : shape) {
    need(sizeof(std::int64_t));
    std::memcpy(&d, in.data() + pos, sizeof(std::int64_t));
    pos += sizeof(std::int64_t);
  }
  Array<T> a(shape);
  need(a.data.size() * sizeof(T));
  std::memcpy(a.data.data(), in.data() + pos, a.data.size() * sizeof(T));
  pos += a.data.size() * sizeof(T);
  return a;
}

}  // namespace detail

template <typename T>
std::string save_stream_state(const StreamState<T>& st) {
  std::string out = "SEPMS1\n";
  {
    std::ostringstream cfgline;
    for (const auto& f : separator_config_fields()) cfgline << f.name << "=" << f.get(st.cfg) << ";";
    cfgline << "\n";
    out += cfgline.str();
  }
  detail::put_array(out, st.stem.tail);
  for (const auto& c : st.down) detail::put_array(out, c.tail);
  for (const auto& stage : {&st.stage_fwd, &st.stage_rev})
    for (const auto& blocks : *stage)
      for (const auto& b : blocks) {
        detail::put_array(out, b.conv_tail);
        detail::put_array(out, b.h);
      }
  for (const auto& u : st.up) {
    detail::put_array(out, u.pending);
    const std::int64_t seen = u.seen;
    out.append(reinterpret_cast<const char*>(&seen), sizeof(seen));
  }
  detail::put_array(out, st.upf.pending);
  const std::int64_t upf_seen = st.upf.seen;
  out.append(reinterpret_cast<const char*>(&upf_seen), sizeof(upf_seen));
  for (const auto& f : st.skip) {
    const std::uint64_t n = f.data.size();
    out.append(reinterpret_cast<const char*>(&n), sizeof(n));
    out.append(reinterpret_cast<const char*>(f.data.data()), f.data.size() * sizeof(T));
  }
  out.push_back(st.finished ? 1 : 0);
  return out;
}

template <typename T>
StreamState<T> load_stream_state(const std::string& blob) {
  std::size_t pos = 0;
  auto line = [&]() {
    const auto nl = blob.find('\n', pos);
    if (nl == std::string::npos) throw DataError("stream state header truncated");
    std::string s = blob.substr(pos, nl - pos);
    pos = nl + 1;
    return s;
  };
  if (line() != "SEPMS1") throw DataError("not a stream state blob");
  SeparatorConfig cfg;
  {
    const std::string cfgline = line();
    std::size_t p = 0;
    while (p < cfgline.size()) {
      const auto semi = cfgline.find(';', p);
      if (semi == std::string::npos) break;
      const std::string kv = cfgline.substr(p, semi - p);
      p = semi + 1;
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw DataError("bad stream state config");
      bool found = false;
      for (const auto& f : separator_config_fields())
        if (kv.substr(0, eq) == f.name) {
          f.set(cfg, kv.substr(eq + 1));
          found = true;
          break;
        }
      if (!found) throw DataError("unknown stream state field: " + kv);
    }
  }
  StreamState<T> st = make_stream_state<T>(cfg);
  st.stem.tail = detail::get_array<T>(blob, pos);
  for (auto& c : st.down) c.tail = detail::get_array<T>(blob, pos);
  for (auto* stage : {&st.stage_fwd, &st.stage_rev})
    for (auto& blocks : *stage)
      for (auto& b : blocks) {
        b.conv_tail = detail::get_array<T>(blob, pos);
        b.h = detail::get_array<T>(blob, pos);
      }
  auto need = [&](std::size_t n) {
    if (pos + n > blob.size()) throw DataError("stream state blob truncated");
  };
  for (auto& u : st.up) {
    u.pending = detail::get_array<T>(blob, pos);
    need(sizeof(std::int64_t));
    std::memcpy(&u.seen, blob.data() + pos, sizeof(std::int64_t));
    pos += sizeof(std::int64_t);
  }
  st.upf.pending = detail::get_array<T>(blob, pos);
  need(sizeof(std::int64_t));
  std::memcpy(&st.upf.seen, blob.data() + pos, sizeof(std::int64_t));
  pos += sizeof(std::int64_t);
  for (auto& f : st.skip) {
    std::uint64_t n = 0;
    need(sizeof(n));
    std::memcpy(&n, blob.data() + pos, sizeof(n));
    pos += sizeof(n);
    f.data.resize(n);
    need(n * sizeof(T));
    std::memcpy(f.data.data(), blob.data() + pos, n * sizeof(T));
    pos += n * sizeof(T);
  }
  need(1);
  st.finished = blob[pos] != 0;
  return st;
}

}  // namespace sepm
