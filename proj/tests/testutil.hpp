#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sepm/tensor.hpp"

namespace testutil {

// Central-difference gradient check against the tape. Rebuilds the loss from
// the leaves' current values on every call, so the analytic path and the
// probed path are the same function. Relative error uses
// |analytic - fd| / max(1, |fd|).
struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst;
};

inline GradCheck gradcheck(const std::function<sepm::Tensor<double>()>& build_loss,
                           std::vector<std::pair<std::string, sepm::Tensor<double>>> leaves,
                           double step = 1e-5) {
  using sepm::Tensor;
  for (auto& [name, t] : leaves) t.zero_grad();
  Tensor<double> loss = build_loss();
  sepm::backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& [name, t] : leaves) {
    if (!t.has_grad())
      analytic.emplace_back(t.values().size(), 0.0);
    else
      analytic.push_back(t.grad());
  }

  GradCheck res;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& t = leaves[li].second;
    auto& vals = t.values_mut();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double lp = build_loss().item();
      vals[i] = keep - step;
      const double lm = build_loss().item();
      vals[i] = keep;
      const double fd = (lp - lm) / (2.0 * step);
      const double rel = std::abs(analytic[li][i] - fd) / std::max(1.0, std::abs(fd));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = leaves[li].first + "[" + std::to_string(i) + "] analytic=" +
                    std::to_string(analytic[li][i]) + " fd=" + std::to_string(fd);
      }
    }
  }
  return res;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

}  // namespace testutil
