#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "naln/rng.hpp"
#include "naln/tensor.hpp"
#include "naln/trialset.hpp"

namespace naln {

// ---- EEGT container -------------------------------------------------------

std::vector<std::uint8_t> encode_eegt(const TrialSet& trials);
TrialSet decode_eegt(const std::vector<std::uint8_t>& bytes);
void write_eegt(const TrialSet& trials, const std::string& path);
TrialSet read_eegt(const std::string& path);

// ---- Fold planning ----------------------------------------------------------

struct Fold {
  // Subject-level plans fill the subject lists; trial-level plans fill the
  // index lists. Indices refer to the calibration set.
  std::vector<int> train_subjects;
  std::vector<int> val_subjects;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

struct FoldPlan {
  enum class Kind { by_subject, by_trial };
  Kind kind = Kind::by_subject;
  std::vector<Fold> folds;

  std::size_t size() const { return folds.size(); }
  /// Resolves each fold to (train indices, val indices) into `calib`.
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> resolve(const TrialSet& calib) const;
};

/// Leave-one-subject-out, repeated: fold r*n + i holds out subjects[i].
FoldPlan make_folds_loso_repeated(const std::vector<int>& subjects, std::size_t repeats);
/// k folds over a seeded permutation of the trials; sizes differ by <= 1.
FoldPlan make_folds_unstratified(std::size_t n_trials, std::size_t k, std::uint64_t seed);

// ---- Sampling weights -----------------------------------------------------

struct SamplerWeights {
  std::vector<double> weight;
};

/// Source trials first (weight 1), then calibration trials with
/// source_n / calib_n each, so both splits carry equal total mass.
SamplerWeights oversample_weights(std::size_t source_n, std::size_t calib_n);

/// Loss weights proportional to importance / count, where each logical class
/// has importance 1 split equally over the members of its merge group.
/// Normalized to mean 1. `counts` may be fractional sampling masses.
std::vector<double> class_weights(const std::vector<double>& counts,
                                  const std::vector<std::vector<int>>& merge_groups = {});

// ---- Subject-chunked batching -----------------------------------------------

/// One trial available to the batcher.
struct PoolEntry {
  const TrialSet* set;
  std::size_t index;
  double weight;
};

struct Batch {
  Tensor chunk;                     // [K, C, T]
  std::vector<std::size_t> bounds;  // subject groups, [0, ..., K]
  std::size_t head = 0;             // dataset id of every trial in the batch
  std::vector<int> labels;
  std::vector<PoolEntry> entries;
};

/// Draws minibatches made of whole subject groups.
///
/// Each batch picks one dataset, then `subjects_per_batch` subjects from it
/// (with replacement, proportional to subject sampling mass); every draw adds
/// `trials_per_subject` trials of that subject taken from a per-epoch
/// shuffled cycle. Expected trial frequency is proportional to its weight.
/// An epoch has ceil(pool size / (subjects_per_batch * trials_per_subject))
/// batches and is fully determined by (seed, epoch).
class ChunkBatcher {
 public:
  ChunkBatcher(std::vector<PoolEntry> pool, std::size_t subjects_per_batch, std::size_t trials_per_subject,
               std::uint64_t seed, std::uint64_t epoch);

  std::optional<Batch> next();
  std::size_t batches_per_epoch() const { return n_batches_; }

 private:
  struct Subject {
    int dataset;
    std::vector<std::size_t> entries;  // into pool_
    double mass = 0;
    std::vector<std::size_t> cycle;
    std::size_t cursor = 0;
  };

  std::size_t draw_trial(Subject& s);

  std::vector<PoolEntry> pool_;
  std::size_t subjects_per_batch_, trials_per_subject_;
  Rng rng_;
  // (dataset id, trial set ordinal, subject id): equal ids in different
  // files are different subjects.
  using Key = std::tuple<int, std::size_t, int>;
  std::map<Key, Subject> subjects_;
  std::map<int, std::vector<Key>> by_dataset_;
  std::size_t n_batches_ = 0, emitted_ = 0;
};

/// All batches of one epoch over a single trial set.
std::vector<Batch> subject_chunk_batches(const TrialSet& trials, std::size_t subjects_per_batch,
                                         std::size_t trials_per_subject, const SamplerWeights& weights,
                                         std::uint64_t seed, std::uint64_t epoch);

// ---- Synthetic covariate-shifted data ---------------------------------------

struct SynthSpec {
  std::size_t n_subjects = 6;
  std::size_t trials_per_class = 40;
  std::size_t n_classes = 4;
  std::size_t n_channels = 8;
  std::size_t n_samples = 256;
  double fs_hz = 128.0;
  // Amplitude ratio of the class signal to white noise; infinity disables noise.
  double snr = 2.0;
  bool shift = true;
  double scale_min = 0.5, scale_max = 3.0;
  double offset_min = -2.0, offset_max = 2.0;
  double trial_jitter = 0.1;
  int dataset_id = 0;
  int subject_offset = 0;
  // Class templates depend only on this seed, so sets generated with
  // different data seeds share the same labeling rule.
  std::uint64_t template_seed = 0;

  void validate() const;
  std::string to_json() const;
  static SynthSpec from_json(const std::string& text);
};

/// Class-specific spatial amplitude patterns over shared band-limited
/// waveforms, plus noise, then a per-subject per-channel affine corruption.
TrialSet synth_generate(const SynthSpec& spec, std::uint64_t seed);

/// Standard 10-10 names for the first `n` channels (generic names past 64).
std::vector<std::string> montage_names(std::size_t n);

}  // namespace naln
