#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "sepm/tensor.hpp"

namespace sepm {

// Separation objectives and evaluation metrics. All ratios carry a small eps
// in numerator and denominator so silent segments cannot blow up a division.
inline constexpr double kMetricEps = 1e-8;

namespace detail {

template <typename T>
Tensor<T> dot_t(const Tensor<T>& a, const Tensor<T>& b) {
  return sum(mul(a, b));
}

template <typename T>
Tensor<T> log10_t(const Tensor<T>& x) {
  return mul_scalar(log_(x), static_cast<T>(1.0 / std::log(10.0)));
}

template <typename T>
void check_pair(const Tensor<T>& estimate, const Tensor<T>& reference) {
  if (estimate.ndim() != 1 || reference.ndim() != 1 ||
      estimate.numel() != reference.numel())
    throw ShapeError("metric: estimate " + shape_str(estimate.shape()) + " vs reference " +
                     shape_str(reference.shape()));
  double power = 0.0;
  for (auto v : reference.values()) power += static_cast<double>(v) * static_cast<double>(v);
  if (power == 0.0) throw NumericError("metric: reference signal is identically zero");
}

}  // namespace detail

// Scale-invariant signal-to-distortion ratio in dB:
//   alpha = <est, ref> / (||ref||^2 + eps)
//   si_sdr = 10*log10((||alpha*ref||^2 + eps) / (||alpha*ref - est||^2 + eps))
// Differentiable in the estimate (and reference).
template <typename T>
Tensor<T> si_sdr(const Tensor<T>& estimate, const Tensor<T>& reference,
                 T eps = static_cast<T>(kMetricEps)) {
  detail::check_pair(estimate, reference);
  Tensor<T> alpha = div(detail::dot_t(estimate, reference),
                        add_scalar(detail::dot_t(reference, reference), eps));
  Tensor<T> target = mul(reference, alpha);
  Tensor<T> err = sub(target, estimate);
  Tensor<T> num = add_scalar(detail::dot_t(target, target), eps);
  Tensor<T> den = add_scalar(detail::dot_t(err, err), eps);
  return mul_scalar(detail::log10_t(div(num, den)), T(10));
}

// Plain (non-scale-invariant) ratio: alpha fixed to 1.
template <typename T>
Tensor<T> sdr(const Tensor<T>& estimate, const Tensor<T>& reference,
              T eps = static_cast<T>(kMetricEps)) {
  detail::check_pair(estimate, reference);
  Tensor<T> err = sub(reference, estimate);
  Tensor<T> num = add_scalar(detail::dot_t(reference, reference), eps);
  Tensor<T> den = add_scalar(detail::dot_t(err, err), eps);
  return mul_scalar(detail::log10_t(div(num, den)), T(10));
}

// One per-pair measurement inside the permutation search.
struct MetricValue {
  double value_db = 0.0;
  bool clamped = false;  // clamped => value_db == -threshold applied
};

template <typename T>
struct UpitResult {
  Tensor<T> loss;                      // scalar, differentiable through the chosen assignment
  std::vector<std::size_t> permutation;  // permutation[i] = index of estimate matched to ref i
  std::vector<MetricValue> pair_metrics; // per reference, for the chosen assignment
};

// Utterance-level permutation-invariant loss:
//   loss = min_pi mean_i max(-si_sdr(est_{pi(i)}, ref_i), -clamp_db)
// The permutation search is exhaustive (n! assignments; fine for the 2-4
// sources this artifact targets). Ties pick the lexicographically first
// permutation.
template <typename T>
UpitResult<T> upit_loss(const std::vector<Tensor<T>>& estimates,
                        const std::vector<Tensor<T>>& references, T clamp_db = T(30)) {
  const std::size_t n = references.size();
  if (estimates.size() != n)
    throw ShapeError("upit_loss: " + std::to_string(estimates.size()) + " estimates vs " +
                     std::to_string(n) + " references");
  if (n == 0) throw ShapeError("upit_loss: empty inputs");
  if (n > 6) throw ConfigError("upit_loss: exhaustive search over n! assignments; n > 6 refused");

  // pairwise clamped negative ratios, shared across permutations
  std::vector<std::vector<Tensor<T>>> pair_neg(n, std::vector<Tensor<T>>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      pair_neg[i][j] = cmax(neg(si_sdr(estimates[j], references[i])), -clamp_db);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::size_t> best_perm;
  double best_value = 0.0;
  bool first = true;
  do {
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) value += static_cast<double>(pair_neg[i][perm[i]].item());
    value /= static_cast<double>(n);
    if (first || value < best_value) {
      first = false;
      best_value = value;
      best_perm = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  UpitResult<T> out;
  out.permutation = best_perm;
  Tensor<T> acc;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor<T>& term = pair_neg[i][best_perm[i]];
    acc = i == 0 ? term : add(acc, term);
    MetricValue mv;
    mv.value_db = -static_cast<double>(term.item());
    mv.clamped = static_cast<double>(term.item()) == -static_cast<double>(clamp_db);
    out.pair_metrics.push_back(mv);
  }
  out.loss = mul_scalar(acc, static_cast<T>(1.0 / static_cast<double>(n)));
  return out;
}

// Mean best-permutation SI-SDR of the estimates minus the mixture baseline
// (the mixture scored against every reference). Unclamped; pure metric.
template <typename T>
double si_sdr_improvement(const std::vector<Tensor<T>>& estimates,
                          const std::vector<Tensor<T>>& references, const Tensor<T>& mixture) {
  const std::size_t n = references.size();
  if (estimates.size() != n || n == 0) throw ShapeError("si_sdr_improvement: count mismatch");
  std::vector<std::vector<double>> score(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      score[i][j] = static_cast<double>(si_sdr(estimates[j], references[i]).item());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += score[i][perm[i]];
    best = std::max(best, v / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));

  double baseline = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    baseline += static_cast<double>(si_sdr(mixture, references[i]).item());
  baseline /= static_cast<double>(n);
  return best - baseline;
}

// Non-scale-invariant counterpart (reported alongside; alpha = 1).
template <typename T>
double sdr_improvement(const std::vector<Tensor<T>>& estimates,
                       const std::vector<Tensor<T>>& references, const Tensor<T>& mixture) {
  const std::size_t n = references.size();
  if (estimates.size() != n || n == 0) throw ShapeError("sdr_improvement: count mismatch");
  std::vector<std::vector<double>> score(n, std::vector<double>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      score[i][j] = static_cast<double>(sdr(estimates[j], references[i]).item());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = -1e300;
  do {
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i) v += score[i][perm[i]];
    best = std::max(best, v / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  double baseline = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    baseline += static_cast<double>(sdr(mixture, references[i]).item());
  baseline /= static_cast<double>(n);
  return best - baseline;
}

}  // namespace sepm
