#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "naln/tensor.hpp"

namespace naln {

/// A block of equally shaped trials with labels and subject identity.
struct TrialSet {
  Tensor data;  // [N, C, T]
  std::vector<int> labels;
  std::vector<int> subject_ids;
  int dataset_id = 0;
  double fs_hz = 1.0;
  int n_classes = 0;
  std::vector<std::string> channel_names;

  std::size_t n_trials() const { return labels.size(); }
  std::size_t n_channels() const { return channel_names.size(); }
  std::size_t n_samples() const { return data.defined() && data.rank() == 3 ? data.dim(2) : 0; }

  /// Throws DataError when the invariants do not hold.
  void validate() const;

  /// Trials at `indices`, in that order.
  TrialSet subset(const std::vector<std::size_t>& indices) const;
  /// Distinct subject ids in order of first appearance.
  std::vector<int> subjects() const;
  /// Indices of the trials of `subject`, in file order.
  std::vector<std::size_t> indices_of_subject(int subject) const;
  /// Read-only view of one trial, [C*T] row-major.
  std::span<const double> trial(std::size_t i) const;
};

/// Gathers trials of several sets into one [K, C, T] tensor.
Tensor gather_trials(const std::vector<std::pair<const TrialSet*, std::size_t>>& refs);

}  // namespace naln
