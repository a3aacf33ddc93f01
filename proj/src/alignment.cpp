#include "naln/alignment.hpp"

#include <algorithm>
#include <cmath>

#include "naln/error.hpp"
#include "naln/init.hpp"
#include "naln/ops.hpp"

namespace naln {

AlignmentStats compute_stats(const Tensor& features) {
  if (features.rank() != 2 && features.rank() != 3) {
    throw DimensionError("compute_stats: expected [K,C] or [K,C,T], got " + shape_str(features.shape()));
  }
  const std::size_t K = features.dim(0), C = features.dim(1);
  const std::size_t T = features.rank() == 3 ? features.dim(2) : 1;
  if (K == 0) throw EmptySetError("compute_stats: no trials");
  auto x = features.data();
  AlignmentStats st;
  st.n_trials = K;
  st.n_timepoints = T;
  st.mean.resize(C);
  st.std.resize(C);
  const double n = static_cast<double>(K * T);
  std::vector<double> partial(K);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) s += x[(k * C + c) * T + t];
      partial[k] = s;
    }
    const double m = ops::order_invariant_sum(partial) / n;
    for (std::size_t k = 0; k < K; ++k) {
      double s = 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        const double d = x[(k * C + c) * T + t] - m;
        s += d * d;
      }
      partial[k] = s;
    }
    st.mean[c] = m;
    st.std[c] = std::sqrt(ops::order_invariant_sum(partial) / n);
  }
  return st;
}

StatAlignLayer StatAlignLayer::create(std::size_t channels, double epsilon) {
  if (!(epsilon > 0)) throw ParameterError("StatAlignLayer: epsilon must be > 0");
  return StatAlignLayer{Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), epsilon};
}

Tensor StatAlignLayer::forward(const Tensor& x, const std::vector<std::size_t>& bounds) const {
  return ops::channel_affine(ops::group_standardize(x, bounds, epsilon), weight, bias);
}

Tensor standardize(const Tensor& features, const AlignmentStats& stats, const StatAlignLayer& layer) {
  if (features.rank() < 2 || features.dim(1) != stats.channels() || layer.channels() != stats.channels()) {
    throw DimensionError("standardize: features " + shape_str(features.shape()) + ", stats for " +
                         std::to_string(stats.channels()) + " channels, layer for " +
                         std::to_string(layer.channels()));
  }
  const std::size_t C = stats.channels();
  std::vector<double> inv(C), shift(C);
  for (std::size_t c = 0; c < C; ++c) {
    inv[c] = 1.0 / std::max(stats.std[c], layer.epsilon);
    shift[c] = -stats.mean[c] * inv[c];
  }
  Tensor z = ops::channel_affine(features, Tensor({C}, std::move(inv)), Tensor({C}, std::move(shift)));
  return ops::channel_affine(z, layer.weight, layer.bias);
}

DeepSetAlign DeepSetAlign::create(std::size_t n, const Rng& init) {
  if (n < 2) throw ParameterError("DeepSetAlign: feature dimension must be >= 2 so the readout can shrink it");
  const std::size_t r = readout_dim(n);
  return DeepSetAlign{uniform_fan_in({r, n}, n, init.derive("gamma")), Tensor::zeros({r}, true),
                      uniform_fan_in({n, n + r}, n + r, init.derive("lambda")), Tensor::zeros({n}, true)};
}

Tensor DeepSetAlign::forward(const Tensor& features) const {
  if (features.rank() != 2 || features.dim(1) != feature_dim()) {
    throw DimensionError("deepset: expected [K," + std::to_string(feature_dim()) + "], got " +
                         shape_str(features.shape()));
  }
  const std::size_t K = features.dim(0);
  if (K == 0) throw EmptySetError("deepset: empty trial set");
  Tensor readout = ops::elu(ops::linear(ops::mean_rows(features), gamma_weight, gamma_bias));
  Tensor joined = ops::concat({features, ops::broadcast_rows(readout, K)}, 1);
  return ops::elu(ops::linear(joined, lambda_weight, lambda_bias));
}

Tensor DeepSetAlign::forward_groups(const Tensor& features, const std::vector<std::size_t>& bounds) const {
  if (bounds.size() < 2 || bounds.front() != 0 || bounds.back() != features.dim(0)) {
    throw ContractError("deepset: group bounds must cover all rows");
  }
  if (bounds.size() == 2) return forward(features);
  std::vector<Tensor> parts;
  for (std::size_t g = 0; g + 1 < bounds.size(); ++g) {
    if (bounds[g + 1] <= bounds[g]) throw EmptySetError("deepset: empty subject group " + std::to_string(g));
    parts.push_back(forward(ops::slice_rows(features, bounds[g], bounds[g + 1])));
  }
  return ops::concat(parts, 0);
}

Tensor DeepSetAlign::forward_channels(const Tensor& features, const std::vector<std::size_t>& bounds) const {
  if (features.rank() != 3) throw DimensionError("deepset: expected [K,C,T], got " + shape_str(features.shape()));
  const std::size_t K = features.dim(0), C = features.dim(1), T = features.dim(2);
  std::vector<std::size_t> row_bounds(bounds);
  for (auto& b : row_bounds) b *= T;
  Tensor rows = ops::reshape(ops::transpose(features, 1, 2), {K * T, C});
  Tensor out = forward_groups(rows, row_bounds);
  return ops::transpose(ops::reshape(out, {K, T, C}), 1, 2);
}

Tensor deepset_forward(const Tensor& features, const DeepSetAlign& module) { return module.forward(features); }

}  // namespace naln
