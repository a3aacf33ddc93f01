#include "naln/trialset.hpp"

#include <algorithm>

#include "naln/error.hpp"

namespace naln {

void TrialSet::validate() const {
  const std::size_t n = labels.size();
  if (subject_ids.size() != n) {
    throw DataError("trial set: " + std::to_string(n) + " labels but " + std::to_string(subject_ids.size()) +
                    " subject ids");
  }
  if (!(fs_hz > 0)) throw DataError("trial set: sampling rate must be > 0");
  if (!data.defined() || data.rank() != 3) throw DataError("trial set: data must be [N,C,T]");
  if (data.dim(0) != n || data.dim(1) != channel_names.size()) {
    throw DataError("trial set: data shape " + shape_str(data.shape()) + " vs " + std::to_string(n) + " trials, " +
                    std::to_string(channel_names.size()) + " channel names");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) {
      throw DataError("trial set: label " + std::to_string(labels[i]) + " of trial " + std::to_string(i) +
                      " outside [0, " + std::to_string(n_classes) + ")");
    }
  }
}

TrialSet TrialSet::subset(const std::vector<std::size_t>& indices) const {
  TrialSet out;
  out.dataset_id = dataset_id;
  out.fs_hz = fs_hz;
  out.n_classes = n_classes;
  out.channel_names = channel_names;
  const std::size_t C = data.dim(1), T = data.dim(2), row = C * T;
  std::vector<double> buf;
  buf.reserve(indices.size() * row);
  auto d = data.data();
  for (auto i : indices) {
    if (i >= n_trials()) throw IndexError("trial index " + std::to_string(i) + " out of range");
    buf.insert(buf.end(), d.begin() + i * row, d.begin() + (i + 1) * row);
    out.labels.push_back(labels[i]);
    out.subject_ids.push_back(subject_ids[i]);
  }
  out.data = Tensor({indices.size(), C, T}, std::move(buf));
  return out;
}

std::vector<int> TrialSet::subjects() const {
  std::vector<int> out;
  for (int s : subject_ids) {
    if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
  }
  return out;
}

std::vector<std::size_t> TrialSet::indices_of_subject(int subject) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) {
    if (subject_ids[i] == subject) out.push_back(i);
  }
  return out;
}

std::span<const double> TrialSet::trial(std::size_t i) const {
  const std::size_t row = data.dim(1) * data.dim(2);
  return data.data().subspan(i * row, row);
}

Tensor gather_trials(const std::vector<std::pair<const TrialSet*, std::size_t>>& refs) {
  if (refs.empty()) throw EmptySetError("gather_trials: no trials");
  const std::size_t C = refs[0].first->data.dim(1), T = refs[0].first->data.dim(2);
  std::vector<double> buf;
  buf.reserve(refs.size() * C * T);
  for (const auto& [set, i] : refs) {
    if (set->data.dim(1) != C || set->data.dim(2) != T) {
      throw DimensionError("gather_trials: trial shapes differ across sets");
    }
    auto t = set->trial(i);
    buf.insert(buf.end(), t.begin(), t.end());
  }
  return Tensor({refs.size(), C, T}, std::move(buf));
}

}  // namespace naln
