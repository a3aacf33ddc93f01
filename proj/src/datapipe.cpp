#include "naln/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "json.hpp"
#include "naln/error.hpp"

namespace naln {

std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> FoldPlan::resolve(
    const TrialSet& calib) const {
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> out;
  for (const auto& f : folds) {
    if (kind == Kind::by_trial) {
      for (auto i : f.val_indices) {
        if (i >= calib.n_trials()) throw IndexError("fold plan references trial " + std::to_string(i));
      }
      out.emplace_back(f.train_indices, f.val_indices);
      continue;
    }
    std::vector<std::size_t> train, val;
    for (std::size_t i = 0; i < calib.n_trials(); ++i) {
      const int s = calib.subject_ids[i];
      if (std::find(f.val_subjects.begin(), f.val_subjects.end(), s) != f.val_subjects.end()) {
        val.push_back(i);
      } else if (std::find(f.train_subjects.begin(), f.train_subjects.end(), s) != f.train_subjects.end()) {
        train.push_back(i);
      }
    }
    out.emplace_back(std::move(train), std::move(val));
  }
  return out;
}

FoldPlan make_folds_loso_repeated(const std::vector<int>& subjects, std::size_t repeats) {
  std::vector<int> uniq;
  for (int s : subjects) {
    if (std::find(uniq.begin(), uniq.end(), s) == uniq.end()) uniq.push_back(s);
  }
  if (uniq.size() < 2) throw ParameterError("leave-one-subject-out needs >= 2 subjects, got " + std::to_string(uniq.size()));
  if (repeats < 1) throw ParameterError("leave-one-subject-out needs repeats >= 1");
  FoldPlan plan;
  plan.kind = FoldPlan::Kind::by_subject;
  for (std::size_t r = 0; r < repeats; ++r) {
    for (int held : uniq) {
      Fold f;
      f.val_subjects = {held};
      for (int s : uniq) {
        if (s != held) f.train_subjects.push_back(s);
      }
      plan.folds.push_back(std::move(f));
    }
  }
  return plan;
}

FoldPlan make_folds_unstratified(std::size_t n_trials, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw ParameterError("unstratified folds need k >= 2");
  if (k > n_trials) {
    throw ParameterError("cannot split " + std::to_string(n_trials) + " trials into " + std::to_string(k) + " folds");
  }
  auto perm = Rng(seed).derive("folds").permutation(n_trials);
  FoldPlan plan;
  plan.kind = FoldPlan::Kind::by_trial;
  std::size_t at = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t size = n_trials / k + (i < n_trials % k ? 1 : 0);
    Fold f;
    f.val_indices.assign(perm.begin() + at, perm.begin() + at + size);
    std::sort(f.val_indices.begin(), f.val_indices.end());
    at += size;
    plan.folds.push_back(std::move(f));
  }
  for (auto& f : plan.folds) {
    for (std::size_t t = 0; t < n_trials; ++t) {
      if (!std::binary_search(f.val_indices.begin(), f.val_indices.end(), t)) f.train_indices.push_back(t);
    }
  }
  return plan;
}

SamplerWeights oversample_weights(std::size_t source_n, std::size_t calib_n) {
  if (calib_n == 0) throw ParameterError("oversampling needs at least one calibration trial");
  SamplerWeights w;
  w.weight.assign(source_n, 1.0);
  const double calib_w = source_n == 0 ? 1.0 : static_cast<double>(source_n) / static_cast<double>(calib_n);
  w.weight.insert(w.weight.end(), calib_n, calib_w);
  return w;
}

std::vector<double> class_weights(const std::vector<double>& counts, const std::vector<std::vector<int>>& merge_groups) {
  const std::size_t C = counts.size();
  if (C == 0) throw ParameterError("class_weights: no classes");
  std::vector<double> importance(C, 1.0);
  std::vector<bool> grouped(C, false);
  for (const auto& g : merge_groups) {
    for (int c : g) {
      if (c < 0 || static_cast<std::size_t>(c) >= counts.size()) {
        throw ParameterError("class_weights: merge group names class " + std::to_string(c));
      }
      if (grouped[c]) throw ParameterError("class_weights: class " + std::to_string(c) + " in two merge groups");
      grouped[c] = true;
      importance[c] = 1.0 / static_cast<double>(g.size());
    }
  }
  std::vector<double> w(C);
  double total = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (!(counts[c] > 0)) throw DataError("class_weights: class " + std::to_string(c) + " has zero count");
    w[c] = importance[c] / counts[c];
    total += w[c];
  }
  for (auto& v : w) v *= static_cast<double>(C) / total;
  return w;
}

ChunkBatcher::ChunkBatcher(std::vector<PoolEntry> pool, std::size_t subjects_per_batch, std::size_t trials_per_subject,
                           std::uint64_t seed, std::uint64_t epoch)
    : pool_(std::move(pool)),
      subjects_per_batch_(subjects_per_batch),
      trials_per_subject_(trials_per_subject),
      rng_(Rng(seed).derive("batches").derive(epoch)) {
  if (subjects_per_batch == 0 || trials_per_subject == 0) {
    throw ParameterError("batcher: subjects_per_batch and trials_per_subject must be >= 1");
  }
  std::vector<const TrialSet*> sets;
  for (std::size_t i = 0; i < pool_.size(); ++i) {
    const auto& e = pool_[i];
    if (!(e.weight > 0)) throw ParameterError("batcher: sampling weights must be > 0");
    auto it = std::find(sets.begin(), sets.end(), e.set);
    if (it == sets.end()) it = sets.insert(sets.end(), e.set);
    const Key key{e.set->dataset_id, static_cast<std::size_t>(it - sets.begin()), e.set->subject_ids[e.index]};
    auto& s = subjects_[key];
    s.dataset = e.set->dataset_id;
    s.entries.push_back(i);
    s.mass += e.weight;
  }
  for (const auto& [key, s] : subjects_) by_dataset_[s.dataset].push_back(key);
  const std::size_t per_batch = subjects_per_batch * trials_per_subject;
  n_batches_ = pool_.empty() ? 0 : (pool_.size() + per_batch - 1) / per_batch;
}

std::size_t ChunkBatcher::draw_trial(Subject& s) {
  if (s.cursor == s.cycle.size()) {
    auto perm = rng_.permutation(s.entries.size());
    s.cycle.clear();
    for (auto p : perm) s.cycle.push_back(s.entries[p]);
    s.cursor = 0;
  }
  return s.cycle[s.cursor++];
}

std::optional<Batch> ChunkBatcher::next() {
  if (emitted_ >= n_batches_) return std::nullopt;
  ++emitted_;

  double total = 0;
  for (const auto& [ds, keys] : by_dataset_) {
    for (const auto& k : keys) total += subjects_.at(k).mass;
  }
  double u = rng_.uniform() * total;
  const std::vector<Key>* keys = nullptr;
  int dataset = 0;
  double ds_mass = 0;
  for (const auto& [ds, ks] : by_dataset_) {
    double m = 0;
    for (const auto& k : ks) m += subjects_.at(k).mass;
    keys = &ks;
    dataset = ds;
    ds_mass = m;
    if (u < m) break;
    u -= m;
  }

  std::vector<std::pair<Key, std::size_t>> draws;  // subject, draw count
  for (std::size_t i = 0; i < subjects_per_batch_; ++i) {
    double v = rng_.uniform() * ds_mass;
    Key pick = keys->back();
    for (const auto& k : *keys) {
      const double m = subjects_.at(k).mass;
      if (v < m) {
        pick = k;
        break;
      }
      v -= m;
    }
    auto it = std::find_if(draws.begin(), draws.end(), [&](const auto& d) { return d.first == pick; });
    if (it == draws.end()) {
      draws.emplace_back(pick, 1);
    } else {
      ++it->second;
    }
  }

  Batch b;
  b.head = static_cast<std::size_t>(dataset);
  b.bounds.push_back(0);
  std::vector<std::pair<const TrialSet*, std::size_t>> refs;
  for (const auto& [key, count] : draws) {
    auto& s = subjects_.at(key);
    for (std::size_t j = 0; j < count * trials_per_subject_; ++j) {
      const auto& e = pool_[draw_trial(s)];
      b.entries.push_back(e);
      b.labels.push_back(e.set->labels[e.index]);
      refs.emplace_back(e.set, e.index);
    }
    b.bounds.push_back(b.entries.size());
  }
  b.chunk = gather_trials(refs);
  return b;
}

std::vector<Batch> subject_chunk_batches(const TrialSet& trials, std::size_t subjects_per_batch,
                                         std::size_t trials_per_subject, const SamplerWeights& weights,
                                         std::uint64_t seed, std::uint64_t epoch) {
  if (weights.weight.size() != trials.n_trials()) {
    throw ParameterError("batcher: " + std::to_string(weights.weight.size()) + " weights for " +
                         std::to_string(trials.n_trials()) + " trials");
  }
  std::vector<PoolEntry> pool;
  for (std::size_t i = 0; i < trials.n_trials(); ++i) pool.push_back({&trials, i, weights.weight[i]});
  ChunkBatcher batcher(std::move(pool), subjects_per_batch, trials_per_subject, seed, epoch);
  std::vector<Batch> out;
  while (auto b = batcher.next()) out.push_back(std::move(*b));
  return out;
}

// ---- synthetic data ---------------------------------------------------------

void SynthSpec::validate() const {
  auto fail = [](const std::string& m) { throw ParameterError("synth spec: " + m); };
  if (n_subjects < 1) fail("n_subjects must be >= 1");
  if (trials_per_class < 1) fail("trials_per_class must be >= 1");
  if (n_classes < 2) fail("n_classes must be >= 2");
  if (n_channels < 1 || n_samples < 1) fail("n_channels and n_samples must be >= 1");
  if (!(fs_hz > 0)) fail("fs_hz must be > 0");
  if (!(snr > 0)) fail("snr must be > 0");
  if (!(scale_min > 0) || !(scale_min <= scale_max)) fail("scale range must satisfy 0 < min <= max");
  if (!(offset_min <= offset_max)) fail("offset range must satisfy min <= max");
  if (!(trial_jitter >= 0)) fail("trial_jitter must be >= 0");
  if (dataset_id < 0 || subject_offset < 0) fail("dataset_id and subject_offset must be >= 0");
}

std::string SynthSpec::to_json() const {
  nlohmann::json j;
  j["n_subjects"] = n_subjects;
  j["trials_per_class"] = trials_per_class;
  j["n_classes"] = n_classes;
  j["n_channels"] = n_channels;
  j["n_samples"] = n_samples;
  j["fs_hz"] = fs_hz;
  if (std::isinf(snr)) {
    j["snr"] = "inf";
  } else {
    j["snr"] = snr;
  }
  j["shift"] = shift;
  j["scale_range"] = {scale_min, scale_max};
  j["offset_range"] = {offset_min, offset_max};
  j["trial_jitter"] = trial_jitter;
  j["dataset_id"] = dataset_id;
  j["subject_offset"] = subject_offset;
  j["template_seed"] = template_seed;
  return j.dump();
}

SynthSpec SynthSpec::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("synth spec: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParameterError("synth spec: expected a JSON object");
  SynthSpec s;
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "n_subjects") s.n_subjects = v.get<std::size_t>();
      else if (key == "trials_per_class") s.trials_per_class = v.get<std::size_t>();
      else if (key == "n_classes") s.n_classes = v.get<std::size_t>();
      else if (key == "n_channels") s.n_channels = v.get<std::size_t>();
      else if (key == "n_samples") s.n_samples = v.get<std::size_t>();
      else if (key == "fs_hz") s.fs_hz = v.get<double>();
      else if (key == "snr") {
        if (v.is_string() && v.get<std::string>() == "inf") s.snr = std::numeric_limits<double>::infinity();
        else s.snr = v.get<double>();
      }
      else if (key == "shift") s.shift = v.get<bool>();
      else if (key == "scale_range") { s.scale_min = v.at(0).get<double>(); s.scale_max = v.at(1).get<double>(); }
      else if (key == "offset_range") { s.offset_min = v.at(0).get<double>(); s.offset_max = v.at(1).get<double>(); }
      else if (key == "trial_jitter") s.trial_jitter = v.get<double>();
      else if (key == "dataset_id") s.dataset_id = v.get<int>();
      else if (key == "subject_offset") s.subject_offset = v.get<int>();
      else if (key == "template_seed") s.template_seed = v.get<std::uint64_t>();
      else throw ParameterError("synth spec: unknown key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParameterError(std::string("synth spec: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<std::string> montage_names(std::size_t n) {
  static const std::vector<std::string> m64{
      "FC5", "FC3", "FC1", "FCz", "FC2", "FC4", "FC6", "C5",  "C3",  "C1",  "Cz",  "C2",  "C4",  "C6",  "CP5", "CP3",
      "CP1", "CPz", "CP2", "CP4", "CP6", "Fp1", "Fpz", "Fp2", "AF7", "AF3", "AFz", "AF4", "AF8", "F7",  "F5",  "F3",
      "F1",  "Fz",  "F2",  "F4",  "F6",  "F8",  "FT7", "FT8", "T7",  "T8",  "T9",  "T10", "TP7", "TP8", "P7",  "P5",
      "P3",  "P1",  "Pz",  "P2",  "P4",  "P6",  "P8",  "PO7", "PO3", "POz", "PO4", "PO8", "O1",  "Oz",  "O2",  "Iz"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(i < m64.size() ? m64[i] : "Ch" + std::to_string(i + 1));
  return out;
}

TrialSet synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  using std::numbers::pi;
  const std::size_t C = spec.n_channels, T = spec.n_samples, Y = spec.n_classes;
  constexpr std::size_t kSources = 3;

  // Shared waveforms: each source is two sinusoids inside [4 Hz, fmax].
  Rng trng = Rng(spec.template_seed).derive("templates");
  const double fmax = std::max(5.0, std::min(30.0, 0.35 * spec.fs_hz));
  std::vector<std::vector<double>> sources(kSources, std::vector<double>(T));
  for (auto& s : sources) {
    const double f1 = trng.uniform(4.0, fmax), f2 = trng.uniform(4.0, fmax);
    const double p1 = trng.uniform(0, 2 * pi), p2 = trng.uniform(0, 2 * pi);
    for (std::size_t t = 0; t < T; ++t) {
      const double tt = static_cast<double>(t) / spec.fs_hz;
      s[t] = std::sin(2 * pi * f1 * tt + p1) + 0.5 * std::sin(2 * pi * f2 * tt + p2);
    }
  }
  std::vector<std::vector<double>> wave(C, std::vector<double>(T, 0.0));
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t j = 0; j < kSources; ++j) {
      const double a = trng.normal();
      for (std::size_t t = 0; t < T; ++t) wave[c][t] += a * sources[j][t];
    }
    double ss = 0;
    for (double v : wave[c]) ss += v * v;
    const double rms = std::sqrt(ss / static_cast<double>(T));
    for (auto& v : wave[c]) v /= rms > 0 ? rms : 1.0;
  }
  // Class y scales channel c by pattern[y][c].
  std::vector<std::vector<double>> pattern(Y, std::vector<double>(C));
  for (auto& row : pattern) {
    for (auto& v : row) v = std::exp(0.5 * trng.normal());
  }

  const double noise_sd = std::isinf(spec.snr) ? 0.0 : 1.0 / spec.snr;
  const std::size_t per_subject = spec.trials_per_class * Y;
  const std::size_t N = spec.n_subjects * per_subject;
  TrialSet out;
  out.dataset_id = spec.dataset_id;
  out.fs_hz = spec.fs_hz;
  out.n_classes = static_cast<int>(Y);
  out.channel_names = montage_names(C);
  std::vector<double> data;
  data.reserve(N * C * T);
  for (std::size_t s = 0; s < spec.n_subjects; ++s) {
    Rng srng = Rng(seed).derive("subject").derive(s);
    std::vector<double> scale(C, 1.0), offset(C, 0.0);
    if (spec.shift) {
      for (std::size_t c = 0; c < C; ++c) {
        scale[c] = srng.uniform(spec.scale_min, spec.scale_max);
        offset[c] = srng.uniform(spec.offset_min, spec.offset_max);
      }
    }
    const auto order = srng.permutation(per_subject);
    for (std::size_t i = 0; i < per_subject; ++i) {
      const std::size_t y = order[i] % Y;
      const double gain = 1.0 + spec.trial_jitter * srng.normal();
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
          double v = gain * pattern[y][c] * wave[c][t];
          if (noise_sd > 0) v += noise_sd * srng.normal();
          data.push_back(static_cast<float>(scale[c] * v + offset[c]));
        }
      }
      out.labels.push_back(static_cast<int>(y));
      out.subject_ids.push_back(spec.subject_offset + static_cast<int>(s));
    }
  }
  out.data = Tensor({N, C, T}, std::move(data));
  return out;
}

}  // namespace naln
