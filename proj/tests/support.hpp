#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "naln/ops.hpp"
#include "naln/rng.hpp"
#include "naln/tensor.hpp"

namespace naln::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<double> to_vec(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Scalar loss sum(y * r) for a fixed random r, so every output element
/// contributes a distinct weight to the gradient.
inline Tensor project(const Tensor& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return ops::sum(ops::mul(y, random_tensor(y.shape(), rng)));
}

struct GradCheck {
  double max_rel_err = 0;
  std::string worst;
  std::size_t checked = 0;
};

/// Compares reverse-mode gradients of `loss` with central differences for
/// every element of `params`. The relative error denominator is
/// max(|analytic|, |numeric|, floor).
inline GradCheck check_gradients(const std::function<Tensor()>& loss,
                                 const std::vector<std::pair<std::string, Tensor>>& params, double h = 1e-5,
                                 double floor = 1e-6) {
  for (auto [name, p] : params) p.zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& [name, p] : params) {
    analytic.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                    : std::vector<double>(p.numel(), 0.0));
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto d = p.mutable_data();
    for (std::size_t j = 0; j < d.size(); ++j) {
      const double keep = d[j];
      d[j] = keep + h;
      const double fp = loss().item();
      d[j] = keep - h;
      const double fm = loss().item();
      d[j] = keep;
      const double num = (fp - fm) / (2 * h);
      const double a = analytic[i][j];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      ++out.checked;
      if (rel > out.max_rel_err) {
        out.max_rel_err = rel;
        char buf[96];
        std::snprintf(buf, sizeof buf, "] analytic %.3e numeric %.3e", a, num);
        out.worst = params[i].first + "[" + std::to_string(j) + buf;
      }
    }
  }
  return out;
}

}  // namespace naln::test
