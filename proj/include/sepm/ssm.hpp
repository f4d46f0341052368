#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <type_traits>
#include <utility>
#include <vector>

#include "sepm/parallel.hpp"
#include "sepm/tensor.hpp"

namespace sepm {

// Selective state-space layer: per-channel diagonal recurrence
//   h_t = Abar_t * h_{t-1} + Bbar_t * x_t,   y_t = <C_t, h_t> + D * x_t
// with input-dependent B_t, C_t and per-channel step size Delta_t, and
// zero-order-hold discretization
//   Abar = exp(Delta*a),  Bbar = ((exp(Delta*a) - 1) / (Delta*a)) * Delta * B.
// a < 0 is structural: it is stored as log(-a).

namespace zoh {

// series switch for (exp(z)-1)/z to avoid cancellation near 0
template <typename T>
inline constexpr T small_z() {
  return T(1e-4);
}

template <typename T>
inline T abar(T z) {
  return std::exp(z);
}

// phi(z) = (exp(z)-1)/z, with phi := 1 inside the small-|z| branch
template <typename T>
inline T phi(T z) {
  if (std::abs(z) < small_z<T>()) return T(1);
  return std::expm1(z) / z;
}

}  // namespace zoh

// d/dz[(exp(z)-1)/z] = (z*exp(z) - (exp(z)-1)) / z^2; 0 on the series branch
// so gradients match the function actually computed there.
template <typename T>
inline T zoh_dphi(T z) {
  if (std::abs(z) < zoh::small_z<T>()) return T(0);
  return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

// Abar = exp(dt*a), elementwise. dt must be positive.
template <typename T>
Tensor<T> discretize_a(const Tensor<T>& a, const Tensor<T>& dt) {
  if (a.shape() != dt.shape())
    throw ShapeError("discretize_a: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(dt.shape()));
  for (auto v : dt.values())
    if (!(v > T(0))) throw NumericError("discretize: Delta must be > 0");
  Array<T> out(a.shape());
  const T* pa = a.values().data();
  const T* pd = dt.values().data();
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data[i] = zoh::abar(pd[i] * pa[i]);
  auto an = a.node();
  auto dn = dt.node();
  return detail::make_op<T>(std::move(out), {a, dt}, [an, dn](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    const T* pa = an->value.data.data();
    const T* pd = dn->value.data.data();
    const T* y = self.value.data.data();
    const std::int64_t n = self.value.numel();
    if (detail::wants_grad(an)) {
      an->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) an->grad[i] += g[i] * pd[i] * y[i];
    }
    if (detail::wants_grad(dn)) {
      dn->ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) dn->grad[i] += g[i] * pa[i] * y[i];
    }
  });
}

// Bbar = phi(dt*a) * dt * b, elementwise, with the small-|z| series branch.
template <typename T>
Tensor<T> discretize_b(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& dt) {
  if (a.shape() != b.shape() || a.shape() != dt.shape())
    throw ShapeError("discretize_b: shapes must match");
  for (auto v : dt.values())
    if (!(v > T(0))) throw NumericError("discretize: Delta must be > 0");
  Array<T> out(a.shape());
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  const T* pd = dt.values().data();
  for (std::int64_t i = 0; i < a.numel(); ++i)
    out.data[i] = zoh::phi(pd[i] * pa[i]) * pd[i] * pb[i];
  auto an = a.node();
  auto bn = b.node();
  auto dn = dt.node();
  return detail::make_op<T>(std::move(out), {a, b, dt}, [an, bn, dn](detail::Node<T>& self) mutable {
    const T* g = self.grad.data();
    const T* pa = an->value.data.data();
    const T* pb = bn->value.data.data();
    const T* pd = dn->value.data.data();
    const std::int64_t n = self.value.numel();
    const bool wa = detail::wants_grad(an), wb = detail::wants_grad(bn), wd = detail::wants_grad(dn);
    if (wa) an->ensure_grad();
    if (wb) bn->ensure_grad();
    if (wd) dn->ensure_grad();
    for (std::int64_t i = 0; i < n; ++i) {
      const T z = pd[i] * pa[i];
      const T p = zoh::phi(z);
      const T dp = zoh_dphi(z);
      if (wa) an->grad[i] += g[i] * pd[i] * pd[i] * pb[i] * dp;
      if (wb) bn->grad[i] += g[i] * pd[i] * p;
      if (wd) dn->grad[i] += g[i] * (pb[i] * p + pd[i] * pb[i] * dp * pa[i]);
    }
  });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& a, const Tensor<T>& b,
                                           const Tensor<T>& dt) {
  return {discretize_a(a, dt), discretize_b(a, b, dt)};
}

// Associative combine for the affine maps h -> a*h + b: applying (a1,b1)
// first and then (a2,b2) composes to (a2*a1, a2*b1 + b2).
template <typename T>
inline std::pair<T, T> ssm_combine(std::pair<T, T> first, std::pair<T, T> second) {
  return {second.first * first.first, second.first * first.second + second.second};
}

enum class ScanAlgo { Sequential, Parallel };

template <typename T>
struct SsmParams {
  std::int64_t n_state = 8;
  std::int64_t dt_rank = 1;
  Tensor<T> a_log;    // [d x N], a = -exp(a_log)
  Tensor<T> w_b;      // [N x d]
  Tensor<T> w_c;      // [N x d]
  Tensor<T> w_dt_lo;  // [R x d]
  Tensor<T> w_dt;     // [d x R]
  Tensor<T> dt_bias;  // [d]
  Tensor<T> d_skip;   // [d], direct feedthrough; ignored when use_skip=false
  bool use_skip = true;

  std::int64_t d_channels() const { return a_log.dim(0); }
};

inline std::int64_t default_dt_rank(std::int64_t d_model) { return (d_model + 15) / 16; }

template <typename T>
SsmParams<T> init_ssm_params(std::int64_t d, std::int64_t n_state, std::int64_t dt_rank, Rng& rng,
                             bool use_skip = true, bool requires_grad = true) {
  SsmParams<T> p;
  p.n_state = n_state;
  p.dt_rank = dt_rank;
  p.use_skip = use_skip;
  Array<T> alog({d, n_state});
  for (std::int64_t c = 0; c < d; ++c)
    for (std::int64_t n = 0; n < n_state; ++n)
      alog.at2(c, n) = static_cast<T>(std::log(static_cast<double>(n + 1)));
  p.a_log = Tensor<T>::from_array(std::move(alog), requires_grad);
  const T wscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  p.w_b = Tensor<T>::rand_uniform({n_state, d}, rng, -wscale, wscale, requires_grad);
  p.w_c = Tensor<T>::rand_uniform({n_state, d}, rng, -wscale, wscale, requires_grad);
  p.w_dt_lo = Tensor<T>::rand_uniform({dt_rank, d}, rng, -wscale, wscale, requires_grad);
  const T rscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dt_rank)));
  p.w_dt = Tensor<T>::rand_uniform({d, dt_rank}, rng, -rscale, rscale, requires_grad);
  // bias chosen so softplus(bias) lands in [1e-3, 1e-1]
  Array<T> bias({d});
  for (std::int64_t c = 0; c < d; ++c) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    bias.data[static_cast<std::size_t>(c)] = static_cast<T>(std::log(std::expm1(dt)));
  }
  p.dt_bias = Tensor<T>::from_array(std::move(bias), requires_grad);
  p.d_skip = Tensor<T>::full({d}, T(1), requires_grad);
  return p;
}

namespace detail {

// One recurrence step for all channels; shared verbatim by the batch
// sequential scan and the streaming scan_step so they agree bit-for-bit.
template <typename T>
inline void scan_tick(std::int64_t d, std::int64_t n_state, const T* a_log, const T* b_t,
                      const T* c_t, const T* delta_t, const T* d_skip, const T* x_t, T* h,
                      T* y_t) {
  for (std::int64_t ch = 0; ch < d; ++ch) {
    const T dt = delta_t[ch];
    const T x = x_t[ch];
    T* hrow = h + ch * n_state;
    const T* arow = a_log + ch * n_state;
    T y = T(0);
    for (std::int64_t n = 0; n < n_state; ++n) {
      const T a = -std::exp(arow[n]);
      const T z = dt * a;
      const T ab = zoh::abar(z);
      const T bb = zoh::phi(z) * dt * b_t[n];
      hrow[n] = ab * hrow[n] + bb * x;
      y += c_t[n] * hrow[n];
    }
    if (d_skip) y += d_skip[ch] * x;
    y_t[ch] = y;
  }
}

}  // namespace detail

// Fused selective-scan op over a whole sequence.
//   x      [d x L]   (already gated/activated input)
//   b, c   [N x L]   per-timestep input/readout vectors
//   delta  [d x L]   positive step sizes
//   d_skip [d]       optional feedthrough (undefined tensor to disable)
// Returns y [d x L]; writes the final hidden state to *h_final if non-null.
template <typename T>
Tensor<T> ssm_scan(const Tensor<T>& x, const Tensor<T>& a_log, const Tensor<T>& b,
                   const Tensor<T>& c, const Tensor<T>& delta, const Tensor<T>& d_skip,
                   ScanAlgo algo = ScanAlgo::Sequential,
                   const Array<std::type_identity_t<T>>* h0 = nullptr,
                   Array<std::type_identity_t<T>>* h_final = nullptr) {
  const std::int64_t d = x.dim(0), l = x.dim(1);
  const std::int64_t n_state = a_log.dim(1);
  if (a_log.dim(0) != d || b.ndim() != 2 || b.dim(0) != n_state || b.dim(1) != l ||
      c.shape() != b.shape() || delta.shape() != x.shape())
    throw ShapeError("ssm_scan: inconsistent shapes");
  if (h0 && (h0->shape != Shape{d, n_state}))
    throw ShapeError("ssm_scan: h0 must be [d x n_state]");
  for (auto v : delta.values())
    if (!(v > T(0))) throw NumericError("ssm_scan: Delta must be > 0");
  const bool has_skip = d_skip.defined();
  if (has_skip && (d_skip.ndim() != 1 || d_skip.dim(0) != d))
    throw ShapeError("ssm_scan: d_skip must be [d]");

  const bool needs_grad = x.requires_grad() || a_log.requires_grad() || b.requires_grad() ||
                          c.requires_grad() || delta.requires_grad() ||
                          (has_skip && d_skip.requires_grad());

  Array<T> y({d, l});
  // h history (h_t for t = 0..L-1) kept only when a backward pass may need it
  auto hist = std::make_shared<std::vector<T>>();
  if (needs_grad) hist->resize(static_cast<std::size_t>(l * d * n_state));
  Array<T> hinit({d, n_state});
  if (h0) hinit = *h0;

  const T* xp = x.values().data();
  const T* ap = a_log.values().data();
  const T* bp = b.values().data();
  const T* cp = c.values().data();
  const T* dp = delta.values().data();
  const T* skp = has_skip ? d_skip.values().data() : nullptr;

  if (algo == ScanAlgo::Sequential) {
    // column-major walk; channels are independent
    std::vector<T> bt(static_cast<std::size_t>(n_state)), ct(static_cast<std::size_t>(n_state));
    std::vector<T> xt(static_cast<std::size_t>(d)), dt(static_cast<std::size_t>(d)),
        yt(static_cast<std::size_t>(d));
    Array<T> h = hinit;
    for (std::int64_t t = 0; t < l; ++t) {
      for (std::int64_t n = 0; n < n_state; ++n) {
        bt[n] = bp[n * l + t];
        ct[n] = cp[n * l + t];
      }
      for (std::int64_t ch = 0; ch < d; ++ch) {
        xt[ch] = xp[ch * l + t];
        dt[ch] = dp[ch * l + t];
      }
      detail::scan_tick(d, n_state, ap, bt.data(), ct.data(), dt.data(), skp, xt.data(),
                        h.ptr(), yt.data());
      for (std::int64_t ch = 0; ch < d; ++ch) y.data[ch * l + t] = yt[ch];
      if (needs_grad)
        std::copy_n(h.ptr(), d * n_state, hist->data() + t * d * n_state);
    }
    if (h_final) *h_final = h;
  } else {
    // Blelloch scan over the affine maps (Abar, Bbar*x) per (channel, state).
    Array<T> h_last({d, n_state});
    parallel_for(d, [&](std::int64_t c0, std::int64_t c1) {
      std::int64_t lp = 1;
      while (lp < l) lp <<= 1;
      std::vector<T> ea(static_cast<std::size_t>(lp * n_state)), eb(static_cast<std::size_t>(lp * n_state));
      std::vector<T> oa(static_cast<std::size_t>(l * n_state)), ob(static_cast<std::size_t>(l * n_state));
      for (std::int64_t ch = c0; ch < c1; ++ch) {
        const T* arow = ap + ch * n_state;
        for (std::int64_t t = 0; t < l; ++t) {
          const T dtv = dp[ch * l + t];
          const T xv = xp[ch * l + t];
          for (std::int64_t n = 0; n < n_state; ++n) {
            const T a = -std::exp(arow[n]);
            const T z = dtv * a;
            ea[t * n_state + n] = zoh::abar(z);
            eb[t * n_state + n] = zoh::phi(z) * dtv * bp[n * l + t] * xv;
          }
        }
        for (std::int64_t t = l; t < lp; ++t)
          for (std::int64_t n = 0; n < n_state; ++n) {
            ea[t * n_state + n] = T(1);
            eb[t * n_state + n] = T(0);
          }
        std::copy_n(ea.data(), l * n_state, oa.data());
        std::copy_n(eb.data(), l * n_state, ob.data());
        // upsweep
        for (std::int64_t step = 1; step < lp; step <<= 1)
          for (std::int64_t i = 2 * step - 1; i < lp; i += 2 * step) {
            const std::int64_t j = i - step;
            for (std::int64_t n = 0; n < n_state; ++n) {
              const T a1 = ea[j * n_state + n], b1 = eb[j * n_state + n];
              const T a2 = ea[i * n_state + n], b2 = eb[i * n_state + n];
              ea[i * n_state + n] = a2 * a1;
              eb[i * n_state + n] = a2 * b1 + b2;
            }
          }
        // downsweep -> exclusive prefixes
        for (std::int64_t n = 0; n < n_state; ++n) {
          ea[(lp - 1) * n_state + n] = T(1);
          eb[(lp - 1) * n_state + n] = T(0);
        }
        for (std::int64_t step = lp >> 1; step >= 1; step >>= 1)
          for (std::int64_t i = 2 * step - 1; i < lp; i += 2 * step) {
            const std::int64_t j = i - step;
            for (std::int64_t n = 0; n < n_state; ++n) {
              const T ta = ea[j * n_state + n], tb = eb[j * n_state + n];
              ea[j * n_state + n] = ea[i * n_state + n];
              eb[j * n_state + n] = eb[i * n_state + n];
              // parent prefix (now in slot i) is applied first, old left after
              const T pa = ea[j * n_state + n], pb = eb[j * n_state + n];
              ea[i * n_state + n] = ta * pa;
              eb[i * n_state + n] = ta * pb + tb;
            }
          }
        // inclusive = combine(exclusive, element); then h_t and readout
        for (std::int64_t t = 0; t < l; ++t) {
          T yv = T(0);
          for (std::int64_t n = 0; n < n_state; ++n) {
            const T ia = oa[t * n_state + n] * ea[t * n_state + n];
            const T ib = oa[t * n_state + n] * eb[t * n_state + n] + ob[t * n_state + n];
            const T ht = ia * hinit.at2(ch, n) + ib;
            if (needs_grad) (*hist)[(t * d + ch) * n_state + n] = ht;
            if (t == l - 1) h_last.at2(ch, n) = ht;
            yv += cp[n * l + t] * ht;
          }
          if (skp) yv += skp[ch] * xp[ch * l + t];
          y.data[ch * l + t] = yv;
        }
      }
    }, 1);
    if (h_final) *h_final = h_last;
  }

  auto xn = x.node();
  auto an = a_log.node();
  auto bn = b.node();
  auto cn = c.node();
  auto dn = delta.node();
  auto skn = has_skip ? d_skip.node() : nullptr;
  auto h0_saved = std::make_shared<Array<T>>(hinit);

  std::vector<Tensor<T>> parents = {x, a_log, b, c, delta};
  if (has_skip) parents.push_back(d_skip);

  return detail::make_op<T>(
      std::move(y), parents,
      [xn, an, bn, cn, dn, skn, hist, h0_saved, d, l, n_state](detail::Node<T>& self) mutable {
        const T* g = self.grad.data();
        const T* xp = xn->value.data.data();
        const T* ap = an->value.data.data();
        const T* bp = bn->value.data.data();
        const T* cp = cn->value.data.data();
        const T* dp = dn->value.data.data();
        const T* skp = skn ? skn->value.data.data() : nullptr;
        const std::vector<T>& h = *hist;

        const bool wx = detail::wants_grad(xn), wa = detail::wants_grad(an),
                   wb = detail::wants_grad(bn), wc = detail::wants_grad(cn),
                   wd = detail::wants_grad(dn), wsk = skn && detail::wants_grad(skn);
        if (wx) xn->ensure_grad();
        if (wa) an->ensure_grad();
        if (wb) bn->ensure_grad();
        if (wc) cn->ensure_grad();
        if (wd) dn->ensure_grad();
        if (wsk) skn->ensure_grad();

        // serial over channels: the b/c gradients accumulate across channels,
        // so a channel-parallel version would race on them
        {
          const std::int64_t ch0 = 0, ch1 = d;
          std::vector<T> hhat(static_cast<std::size_t>(n_state));
          for (std::int64_t ch = ch0; ch < ch1; ++ch) {
            std::fill(hhat.begin(), hhat.end(), T(0));
            const T* arow = ap + ch * n_state;
            for (std::int64_t t = l - 1; t >= 0; --t) {
              const T gy = g[ch * l + t];
              const T xv = xp[ch * l + t];
              const T dtv = dp[ch * l + t];
              T dx_acc = T(0);
              if (skp) {
                if (wsk) skn->grad[ch] += gy * xv;
                dx_acc += gy * skp[ch];
              }
              for (std::int64_t n = 0; n < n_state; ++n) {
                const T ht = h[(t * d + ch) * n_state + n];
                const T hprev = t > 0 ? h[((t - 1) * d + ch) * n_state + n] : h0_saved->at2(ch, n);
                if (wc) cn->grad[n * l + t] += gy * ht;
                T hh = hhat[n] + gy * cp[n * l + t];
                // through the update h_t = ab*h_{t-1} + bb*x_t
                const T a = -std::exp(arow[n]);
                const T z = dtv * a;
                const T ez = std::exp(z);
                const T p = zoh::phi(z);
                const T dpz = zoh_dphi(z);
                const T bv = bp[n * l + t];
                const T bb = p * dtv * bv;
                const T dab = hh * hprev;  // dL/dAbar
                const T dbb = hh * xv;     // dL/dBbar
                dx_acc += hh * bb;
                if (wb) bn->grad[n * l + t] += dbb * dtv * p;
                if (wa) {
                  // via a: Abar -> dt*ez ; Bbar -> dt^2*b*phi'
                  const T da = dab * dtv * ez + dbb * dtv * dtv * bv * dpz;
                  an->grad[ch * n_state + n] += da * a;  // chain through a = -exp(a_log)
                }
                if (wd) {
                  const T dd = dab * a * ez + dbb * (bv * p + dtv * bv * dpz * a);
                  dn->grad[ch * l + t] += dd;
                }
                hh *= ez;  // propagate to h_{t-1}
                hhat[n] = hh;
              }
              if (wx) xn->grad[ch * l + t] += dx_acc;
            }
          }
        }
      });
}

template <typename T>
struct ScanResult {
  Tensor<T> y;
  Array<T> h_final;
};

namespace detail {

template <typename T>
ScanResult<T> scan_with_algo(const SsmParams<T>& p, const Tensor<T>& x,
                             const Array<std::type_identity_t<T>>* h0, ScanAlgo algo) {
  const Tensor<T> b = matmul(p.w_b, x);
  const Tensor<T> c = matmul(p.w_c, x);
  const Tensor<T> delta =
      softplus(add_channel_bias(matmul(p.w_dt, matmul(p.w_dt_lo, x)), p.dt_bias));
  ScanResult<T> out;
  Tensor<T> skip = p.use_skip ? p.d_skip : Tensor<T>();
  out.y = ssm_scan(x, p.a_log, b, c, delta, skip, algo, h0, &out.h_final);
  return out;
}

}  // namespace detail

// Reference left-to-right recurrence.
template <typename T>
ScanResult<T> scan_sequential(const SsmParams<T>& p, const Tensor<T>& x,
                              const Array<std::type_identity_t<T>>* h0 = nullptr) {
  return detail::scan_with_algo(p, x, h0, ScanAlgo::Sequential);
}

// Work-efficient associative-scan evaluation of the same map.
template <typename T>
ScanResult<T> scan_parallel(const SsmParams<T>& p, const Tensor<T>& x,
                            const Array<std::type_identity_t<T>>* h0 = nullptr) {
  return detail::scan_with_algo(p, x, h0, ScanAlgo::Parallel);
}

// Single-timestep streaming form. x_t and y_t are [d]; h is [d x n_state] and
// is updated in place. Matches scan_sequential bit-for-bit step by step.
template <typename T>
void scan_step(const SsmParams<T>& p, const T* x_t, Array<T>& h, T* y_t) {
  const std::int64_t d = p.d_channels();
  const std::int64_t n = p.n_state;
  const std::int64_t r = p.dt_rank;
  if (h.shape != Shape{d, n}) throw ShapeError("scan_step: state must be [d x n_state]");
  std::vector<T> bt(static_cast<std::size_t>(n)), ct(static_cast<std::size_t>(n)),
      lo(static_cast<std::size_t>(r)), dt(static_cast<std::size_t>(d));
  const T* wb = p.w_b.values().data();
  const T* wc = p.w_c.values().data();
  for (std::int64_t i = 0; i < n; ++i) {
    T accb = T(0), accc = T(0);
    for (std::int64_t j = 0; j < d; ++j) {
      accb += wb[i * d + j] * x_t[j];
      accc += wc[i * d + j] * x_t[j];
    }
    bt[i] = accb;
    ct[i] = accc;
  }
  const T* wlo = p.w_dt_lo.values().data();
  for (std::int64_t i = 0; i < r; ++i) {
    T acc = T(0);
    for (std::int64_t j = 0; j < d; ++j) acc += wlo[i * d + j] * x_t[j];
    lo[i] = acc;
  }
  const T* wdt = p.w_dt.values().data();
  const T* bias = p.dt_bias.values().data();
  for (std::int64_t i = 0; i < d; ++i) {
    T acc = T(0);
    for (std::int64_t j = 0; j < r; ++j) acc += wdt[i * r + j] * lo[j];
    dt[i] = detail::softplus_scalar(acc + bias[i]);
  }
  detail::scan_tick(d, n, p.a_log.values().data(), bt.data(), ct.data(), dt.data(),
                    p.use_skip ? p.d_skip.values().data() : nullptr, x_t, h.ptr(), y_t);
}

}  // namespace sepm
