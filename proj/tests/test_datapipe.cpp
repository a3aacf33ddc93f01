#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "naln/alignment.hpp"
#include "naln/datapipe.hpp"
#include "naln/error.hpp"
#include "support.hpp"

using namespace naln;
using naln::test::to_vec;

namespace {

TrialSet tiny_set() {
  TrialSet t;
  t.data = Tensor({1, 2, 1}, {0.5, -2.0});
  t.labels = {1};
  t.subject_ids = {7};
  t.dataset_id = 3;
  t.fs_hz = 100.0;
  t.n_classes = 2;
  t.channel_names = {"A", "Bc"};
  return t;
}

void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void putf(std::vector<std::uint8_t>& b, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put32(b, v);
}

TrialSet labelled_set(std::size_t subjects, std::size_t per_subject, int dataset = 0, int offset = 0) {
  SynthSpec s;
  s.n_subjects = subjects;
  s.trials_per_class = per_subject / 4;
  s.n_channels = 2;
  s.n_samples = 4;
  s.dataset_id = dataset;
  s.subject_offset = offset;
  return synth_generate(s, 5);
}

double corr(std::span<const double> a, std::span<const double> b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += (a[i] - ma) * (b[i] - mb);
    aa += (a[i] - ma) * (a[i] - ma);
    bb += (b[i] - mb) * (b[i] - mb);
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

TEST_CASE("EEGT byte layout") {
  std::vector<std::uint8_t> want{'E', 'E', 'G', 'T'};
  put32(want, 1);
  put32(want, 1);
  put32(want, 2);
  put32(want, 1);
  putf(want, 100.0f);
  put32(want, 2);
  put32(want, 3);
  put32(want, 2);
  want.insert(want.end(), {1, 0, 'A', 2, 0, 'B', 'c'});
  put32(want, 1);
  put32(want, 7);
  putf(want, 0.5f);
  putf(want, -2.0f);
  CHECK(encode_eegt(tiny_set()) == want);
}

TEST_CASE("EEGT round trip and errors") {
  SynthSpec spec;
  spec.n_subjects = 3;
  spec.trials_per_class = 3;
  const TrialSet set = synth_generate(spec, 9);
  const auto path = (std::filesystem::temp_directory_path() / "naln_roundtrip.eegt").string();
  write_eegt(set, path);
  const TrialSet back = read_eegt(path);
  CHECK(to_vec(back.data) == to_vec(set.data));
  CHECK(back.labels == set.labels);
  CHECK(back.subject_ids == set.subject_ids);
  CHECK(back.channel_names == set.channel_names);
  CHECK(back.fs_hz == set.fs_hz);
  CHECK(back.n_classes == set.n_classes);
  CHECK(encode_eegt(back) == encode_eegt(set));
  std::filesystem::remove(path);

  auto bytes = encode_eegt(set);
  for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
    std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    try {
      decode_eegt(t);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
  }
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_eegt(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(decode_eegt(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(decode_eegt(bad), FormatError);
  CHECK_THROWS_AS(read_eegt("/nonexistent/x.eegt"), DataError);

  TrialSet empty = tiny_set();
  empty.data = Tensor::zeros({0, 2, 5});
  empty.labels.clear();
  empty.subject_ids.clear();
  const TrialSet e2 = decode_eegt(encode_eegt(empty));
  CHECK(e2.n_trials() == 0);
  CHECK(e2.n_samples() == 5);
}

TEST_CASE("repeated leave-one-subject-out") {
  const std::vector<int> subjects{3, 5, 8, 9, 11};
  const auto plan = make_folds_loso_repeated(subjects, 2);
  REQUIRE(plan.size() == 10);
  std::map<int, int> held;
  for (std::size_t r = 0; r < 2; ++r) {
    std::set<int> union_val;
    for (std::size_t i = 0; i < 5; ++i) {
      const auto& f = plan.folds[r * 5 + i];
      REQUIRE(f.val_subjects.size() == 1);
      ++held[f.val_subjects[0]];
      union_val.insert(f.val_subjects[0]);
      CHECK(std::find(f.train_subjects.begin(), f.train_subjects.end(), f.val_subjects[0]) == f.train_subjects.end());
      CHECK(f.train_subjects.size() == 4);
    }
    CHECK(union_val == std::set<int>(subjects.begin(), subjects.end()));
  }
  for (int s : subjects) CHECK(held[s] == 2);
  CHECK(make_folds_loso_repeated({1, 2}, 1).size() == 2);
  CHECK_THROWS_AS(make_folds_loso_repeated({1}, 2), ParameterError);
  CHECK_THROWS_AS(make_folds_loso_repeated({1, 2}, 0), ParameterError);

  const TrialSet calib = labelled_set(3, 8);
  const auto resolved = make_folds_loso_repeated(calib.subjects(), 1).resolve(calib);
  for (const auto& [train, val] : resolved) {
    CHECK(train.size() + val.size() == calib.n_trials());
    for (auto v : val)
      for (auto t : train) CHECK(calib.subject_ids[v] != calib.subject_ids[t]);
  }
}

TEST_CASE("unstratified folds") {
  auto plan = make_folds_unstratified(100, 10, 1);
  REQUIRE(plan.size() == 10);
  for (const auto& f : plan.folds) CHECK(f.val_indices.size() == 10);
  for (const auto& f : make_folds_unstratified(10, 10, 1).folds) CHECK(f.val_indices.size() == 1);

  for (std::size_t n : {103u, 37u, 11u}) {
    auto p = make_folds_unstratified(n, 10, 7);
    std::size_t lo = n, hi = 0;
    std::vector<int> seen(n, 0);
    for (const auto& f : p.folds) {
      lo = std::min(lo, f.val_indices.size());
      hi = std::max(hi, f.val_indices.size());
      for (auto i : f.val_indices) ++seen[i];
      CHECK(f.train_indices.size() + f.val_indices.size() == n);
    }
    CHECK(hi - lo <= 1);
    for (int s : seen) CHECK(s == 1);
  }
  const auto a = make_folds_unstratified(50, 10, 3), b = make_folds_unstratified(50, 10, 3),
             c = make_folds_unstratified(50, 10, 4);
  bool differs = false;
  for (std::size_t i = 0; i < 10; ++i) {
    CHECK(a.folds[i].val_indices == b.folds[i].val_indices);
    differs = differs || a.folds[i].val_indices != c.folds[i].val_indices;
  }
  CHECK(differs);
  CHECK_THROWS_AS(make_folds_unstratified(5, 10, 1), ParameterError);
}

TEST_CASE("oversampling weights") {
  auto w = oversample_weights(900, 100);
  REQUIRE(w.weight.size() == 1000);
  for (std::size_t i = 0; i < 900; ++i) CHECK(w.weight[i] == 1.0);
  for (std::size_t i = 900; i < 1000; ++i) CHECK(w.weight[i] == 9.0);
  for (double v : oversample_weights(0, 7).weight) CHECK(v == 1.0);
  CHECK_THROWS_AS(oversample_weights(10, 0), ParameterError);

  // Weighted draws land on calibration half the time.
  auto w2 = oversample_weights(300, 40);
  std::vector<double> cum;
  double total = 0;
  for (double v : w2.weight) cum.push_back(total += v);
  Rng rng(3);
  std::size_t hits = 0;
  const std::size_t n = 100000;
  for (std::size_t i = 0; i < n; ++i) {
    const auto idx = std::upper_bound(cum.begin(), cum.end(), rng.uniform() * total) - cum.begin();
    hits += idx >= 300;
  }
  CHECK(std::abs(static_cast<double>(hits) / n - 0.5) <= 0.01);
}

TEST_CASE("class weights") {
  auto w = class_weights({100, 100, 100, 100}, {{2, 3}});
  CHECK(w[0] / w[2] == doctest::Approx(2.0));
  CHECK(w[1] / w[3] == doctest::Approx(2.0));
  CHECK((w[0] + w[1] + w[2] + w[3]) / 4 == doctest::Approx(1.0));
  for (double v : class_weights({5, 5, 5}, {})) CHECK(v == doctest::Approx(1.0));
  auto w2 = class_weights({50, 100}, {});
  CHECK(w2[0] == doctest::Approx(4.0 / 3));
  CHECK(w2[1] == doctest::Approx(2.0 / 3));
  CHECK_THROWS_AS(class_weights({10, 0, 5}, {}), DataError);
}

TEST_CASE("subject-chunked batches") {
  SUBCASE("one subject, all trials") {
    const TrialSet one = labelled_set(1, 12);
    auto batches = subject_chunk_batches(one, 1, 12, oversample_weights(0, 12), 1, 0);
    REQUIRE(batches.size() == 1);
    CHECK(batches[0].bounds == std::vector<std::size_t>{0, 12});
    std::set<std::size_t> idx;
    for (const auto& e : batches[0].entries) idx.insert(e.index);
    CHECK(idx.size() == 12);
  }
  SUBCASE("determinism and grouping") {
    const TrialSet set = labelled_set(5, 16, 2);
    const auto w = oversample_weights(0, set.n_trials());
    auto a = subject_chunk_batches(set, 3, 4, w, 11, 2);
    auto b = subject_chunk_batches(set, 3, 4, w, 11, 2);
    auto c = subject_chunk_batches(set, 3, 4, w, 11, 3);
    REQUIRE(a.size() == (80 + 11) / 12);
    bool differs = false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(to_vec(a[i].chunk) == to_vec(b[i].chunk));
      CHECK(a[i].bounds == b[i].bounds);
      differs = differs || to_vec(a[i].chunk) != to_vec(c[i].chunk);
      CHECK(a[i].head == 2);
      for (std::size_t g = 0; g + 1 < a[i].bounds.size(); ++g) {
        std::set<int> subj;
        for (std::size_t k = a[i].bounds[g]; k < a[i].bounds[g + 1]; ++k) subj.insert(set.subject_ids[a[i].entries[k].index]);
        CHECK(subj.size() == 1);
        CHECK((a[i].bounds[g + 1] - a[i].bounds[g]) % 4 == 0);
      }
      // Chunk rows are the referenced trials.
      const std::size_t per = 2 * 4;
      for (std::size_t k = 0; k < a[i].entries.size(); ++k) {
        CHECK(std::equal(a[i].chunk.data().begin() + k * per, a[i].chunk.data().begin() + (k + 1) * per,
                         set.data.data().begin() + a[i].entries[k].index * per));
        CHECK(a[i].labels[k] == set.labels[a[i].entries[k].index]);
      }
    }
    CHECK(differs);
  }
  SUBCASE("oversampled calibration gets half of the draws") {
    const TrialSet source = labelled_set(6, 40, 0, 0);
    const TrialSet calib = labelled_set(2, 8, 0, 100);
    std::vector<PoolEntry> pool;
    for (std::size_t i = 0; i < source.n_trials(); ++i) pool.push_back({&source, i, 1.0});
    const auto w = oversample_weights(source.n_trials(), calib.n_trials());
    for (std::size_t i = 0; i < calib.n_trials(); ++i) pool.push_back({&calib, i, w.weight[source.n_trials() + i]});
    std::size_t calib_hits = 0, total = 0, batches = 0;
    for (std::uint64_t epoch = 0; batches < 10000; ++epoch) {
      ChunkBatcher batcher(pool, 4, 2, 17, epoch);
      while (auto b = batcher.next()) {
        ++batches;
        for (const auto& e : b->entries) {
          calib_hits += e.set == &calib;
          ++total;
        }
      }
    }
    CHECK(std::abs(static_cast<double>(calib_hits) / total - 0.5) <= 0.02);
  }
  SUBCASE("same subject id in two files stays two subjects") {
    const TrialSet a = labelled_set(1, 8), b = labelled_set(1, 8);
    std::vector<PoolEntry> pool;
    for (std::size_t i = 0; i < 8; ++i) pool.push_back({&a, i, 1.0});
    for (std::size_t i = 0; i < 8; ++i) pool.push_back({&b, i, 1.0});
    ChunkBatcher batcher(pool, 8, 2, 1, 0);
    while (auto batch = batcher.next()) {
      for (std::size_t g = 0; g + 1 < batch->bounds.size(); ++g) {
        std::set<const TrialSet*> sets;
        for (std::size_t k = batch->bounds[g]; k < batch->bounds[g + 1]; ++k) sets.insert(batch->entries[k].set);
        CHECK(sets.size() == 1);
      }
    }
  }
  CHECK_THROWS_AS(subject_chunk_batches(labelled_set(1, 4), 0, 4, oversample_weights(0, 4), 1, 0), ParameterError);
}

TEST_CASE("synthetic generator") {
  SynthSpec spec;
  CHECK(synth_generate(spec, 1).n_trials() == 960);
  CHECK(to_vec(synth_generate(spec, 1).data) == to_vec(synth_generate(spec, 1).data));
  CHECK(to_vec(synth_generate(spec, 1).data) != to_vec(synth_generate(spec, 2).data));

  SynthSpec bad = spec;
  bad.n_classes = 1;
  CHECK_THROWS_AS(synth_generate(bad, 1), ParameterError);
  bad = spec;
  bad.scale_min = -1;
  CHECK_THROWS_AS(synth_generate(bad, 1), ParameterError);

  SynthSpec rt = spec;
  rt.snr = INFINITY;
  rt.subject_offset = 4;
  const SynthSpec back = SynthSpec::from_json(rt.to_json());
  CHECK(back.to_json() == rt.to_json());
  CHECK(std::isinf(back.snr));
  CHECK_THROWS_AS(SynthSpec::from_json(R"({"n_subjects": 2, "nope": 1})"), ParameterError);

  SUBCASE("clean classes correlate across subjects") {
    SynthSpec s;
    s.n_subjects = 3;
    s.trials_per_class = 2;
    s.snr = INFINITY;
    s.shift = false;
    s.trial_jitter = 0;
    const TrialSet set = synth_generate(s, 3);
    const std::size_t per = set.n_channels() * set.n_samples();
    for (std::size_t i = 0; i < set.n_trials(); ++i)
      for (std::size_t j = i + 1; j < set.n_trials(); ++j) {
        if (set.labels[i] != set.labels[j] || set.subject_ids[i] == set.subject_ids[j]) continue;
        CHECK(corr(set.trial(i), set.trial(j)) > 0.99);
      }
    (void)per;
  }
  SUBCASE("shift moves channel means and standardization undoes it") {
    SynthSpec s;
    s.n_subjects = 4;
    s.trials_per_class = 10;
    s.snr = 50;
    const TrialSet set = synth_generate(s, 4);
    std::vector<TrialSet> subj;
    std::vector<AlignmentStats> stats;
    for (int id : set.subjects()) {
      subj.push_back(set.subset(set.indices_of_subject(id)));
      stats.push_back(compute_stats(subj.back().data));
    }
    double max_delta = 0;
    for (std::size_t a = 0; a < stats.size(); ++a)
      for (std::size_t b = a + 1; b < stats.size(); ++b)
        for (std::size_t c = 0; c < set.n_channels(); ++c)
          max_delta = std::max(max_delta, std::abs(stats[a].mean[c] - stats[b].mean[c]));
    CHECK(max_delta > 0.5);

    const auto layer = StatAlignLayer::create(set.n_channels());
    std::vector<Tensor> z;
    for (std::size_t k = 0; k < subj.size(); ++k) z.push_back(standardize(subj[k].data, stats[k], layer));
    const std::size_t per = set.n_channels() * set.n_samples();
    // Class-mean standardized trials agree across subjects.
    for (int y = 0; y < 4; ++y) {
      std::vector<std::vector<double>> means;
      for (std::size_t k = 0; k < subj.size(); ++k) {
        std::vector<double> m(per, 0.0);
        double n = 0;
        for (std::size_t i = 0; i < subj[k].n_trials(); ++i) {
          if (subj[k].labels[i] != y) continue;
          for (std::size_t j = 0; j < per; ++j) m[j] += z[k].data()[i * per + j];
          ++n;
        }
        for (auto& v : m) v /= n;
        means.push_back(m);
      }
      for (std::size_t a = 0; a < means.size(); ++a)
        for (std::size_t b = a + 1; b < means.size(); ++b) CHECK(corr(means[a], means[b]) > 0.95);
    }
  }
}
