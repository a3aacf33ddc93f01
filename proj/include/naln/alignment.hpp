#pragma once

#include <cstddef>
#include <vector>

#include "naln/rng.hpp"
#include "naln/tensor.hpp"

namespace naln {

/// Per-channel statistics of one subject's features, taken across its
/// trials and (for [K,C,T] input) time.
struct AlignmentStats {
  std::vector<double> mean;
  std::vector<double> std;  // population definition
  std::size_t n_trials = 0;
  std::size_t n_timepoints = 0;

  std::size_t channels() const { return mean.size(); }
};

AlignmentStats compute_stats(const Tensor& features);

/// Per-subject standardization followed by a shared per-channel affine map.
struct StatAlignLayer {
  Tensor weight;  // [C], starts at 1
  Tensor bias;    // [C], starts at 0
  double epsilon = 1e-5;

  static StatAlignLayer create(std::size_t channels, double epsilon = 1e-5);
  std::size_t channels() const { return weight.numel(); }

  /// Standardizes each subject group of `x` ([K,C] or [K,C,T]) with its
  /// own statistics; `bounds` are group start offsets plus K.
  Tensor forward(const Tensor& x, const std::vector<std::size_t>& bounds) const;
};

/// weight * (x - mean) / max(std, epsilon) + bias with fixed statistics.
Tensor standardize(const Tensor& features, const AlignmentStats& stats, const StatAlignLayer& layer);

/// Deep-set update: the mean over a subject's feature vectors is compressed
/// by gamma (N -> R, ELU) and concatenated to every vector before lambda
/// ((N+R) -> N, ELU) maps it back.
struct DeepSetAlign {
  Tensor gamma_weight;   // [R,N]
  Tensor gamma_bias;     // [R]
  Tensor lambda_weight;  // [N,N+R]
  Tensor lambda_bias;    // [N]

  static std::size_t readout_dim(std::size_t n) { return n / 4 > 1 ? n / 4 : 1; }
  static DeepSetAlign create(std::size_t n, const Rng& init);

  std::size_t feature_dim() const { return lambda_weight.dim(0); }
  std::size_t readout_size() const { return gamma_weight.dim(0); }

  /// [K,N] rows of one subject.
  Tensor forward(const Tensor& features) const;
  /// [K,N] with several subject groups.
  Tensor forward_groups(const Tensor& features, const std::vector<std::size_t>& bounds) const;
  /// [K,C,T]: every (trial, time) column is a set element of size C, so the
  /// readout averages over a subject's trials and time.
  Tensor forward_channels(const Tensor& features, const std::vector<std::size_t>& bounds) const;
};

Tensor deepset_forward(const Tensor& features, const DeepSetAlign& module);

}  // namespace naln
