#include "naln/training.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "json.hpp"
#include "naln/error.hpp"
#include "naln/ops.hpp"

namespace naln {

using nlohmann::json;

TrainConfig TrainConfig::sleep_default() {
  TrainConfig c;
  c.epochs = 15;
  c.lr = 1e-3;
  c.weight_decay = 1e-3;
  c.dropout_p = 0.25;
  c.label_smoothing = 0.0;
  c.merge_groups.clear();
  return c;
}

TrainConfig TrainConfig::motor_imagery_default() { return TrainConfig{}; }

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("train config: epochs must be >= 1");
  if (!(lr > 0)) throw ParameterError("train config: lr must be > 0");
  if (!(weight_decay >= 0)) throw ParameterError("train config: weight_decay must be >= 0");
  if (!(dropout_p >= 0 && dropout_p < 1)) throw ParameterError("train config: dropout must lie in [0, 1)");
  if (!(label_smoothing >= 0 && label_smoothing < 1)) {
    throw ParameterError("train config: label_smoothing must lie in [0, 1)");
  }
  if (subjects_per_batch < 1 || trials_per_subject < 1) {
    throw ParameterError("train config: batch sizes must be >= 1");
  }
}

std::string TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["lr"] = lr;
  j["weight_decay"] = weight_decay;
  j["dropout_p"] = dropout_p;
  j["label_smoothing"] = label_smoothing;
  j["class_weights"] = class_weights;
  j["merge_groups"] = merge_groups;
  j["seed"] = seed;
  j["subjects_per_batch"] = subjects_per_batch;
  j["trials_per_subject"] = trials_per_subject;
  return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text, TrainConfig c) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("train config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParameterError("train config: expected a JSON object");
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "lr") c.lr = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "dropout_p") c.dropout_p = v.get<double>();
      else if (key == "label_smoothing") c.label_smoothing = v.get<double>();
      else if (key == "class_weights") c.class_weights = v.get<std::vector<double>>();
      else if (key == "merge_groups") c.merge_groups = v.get<std::vector<std::vector<int>>>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "subjects_per_batch") c.subjects_per_batch = v.get<std::size_t>();
      else if (key == "trials_per_subject") c.trials_per_subject = v.get<std::size_t>();
      else throw ParameterError("train config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("train config: ") + e.what());
  }
  return c;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& class_weights,
                     double smoothing) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B,C], got " + shape_str(logits.shape()));
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (targets.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(B) + " rows");
  }
  if (!class_weights.empty() && class_weights.size() != C) {
    throw DimensionError("cross_entropy: " + std::to_string(class_weights.size()) + " class weights for " +
                         std::to_string(C) + " classes");
  }
  if (!(smoothing >= 0 && smoothing < 1)) throw ParameterError("cross_entropy: smoothing must lie in [0, 1)");
  double total_w = 0;
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= C) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range for " + std::to_string(C) + " classes");
    }
    total_w += class_weights.empty() ? 1.0 : class_weights[t];
  }
  if (!(total_w > 0)) throw ParameterError("cross_entropy: total sample weight must be > 0");
  std::vector<double> coef(B * C);
  for (std::size_t b = 0; b < B; ++b) {
    const double w = (class_weights.empty() ? 1.0 : class_weights[targets[b]]) / total_w;
    for (std::size_t c = 0; c < C; ++c) {
      const double q = (1 - smoothing) * (static_cast<int>(c) == targets[b] ? 1.0 : 0.0) + smoothing / static_cast<double>(C);
      coef[b * C + c] = -w * q;
    }
  }
  return ops::sum(ops::mul(ops::log_softmax(logits), Tensor({B, C}, std::move(coef))));
}

void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr, double weight_decay) {
  if (state.m.empty()) {
    for (auto& [name, p] : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adam: optimizer state does not match parameter list");
  for (auto& [name, p] : params) {
    for (double g : p.grad()) {
      if (std::isnan(g)) throw TrainingError("adam: NaN gradient in parameter " + name);
    }
  }
  ++state.step;
  const double bc1 = 1 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto theta = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j] + weight_decay * theta[j];
      m[j] = state.beta1 * m[j] + (1 - state.beta1) * gj;
      v[j] = state.beta2 * v[j] + (1 - state.beta2) * gj * gj;
      theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + state.eps);
    }
  }
}

std::vector<double> per_class_recall(const std::vector<int>& preds, const std::vector<int>& labels, int n_classes) {
  if (preds.size() != labels.size()) {
    throw MetricError("recall: " + std::to_string(preds.size()) + " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw MetricError("recall: no trials");
  std::vector<double> hit(n_classes, 0), total(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= n_classes) throw MetricError("recall: label " + std::to_string(labels[i]) + " out of range");
    total[labels[i]] += 1;
    if (preds[i] == labels[i]) hit[labels[i]] += 1;
  }
  std::vector<double> r(n_classes);
  for (int c = 0; c < n_classes; ++c) {
    if (total[c] == 0) throw MetricError("recall undefined: class " + std::to_string(c) + " absent from labels");
    r[c] = hit[c] / total[c];
  }
  return r;
}

double uar(const std::vector<int>& preds, const std::vector<int>& labels, int n_classes) {
  auto r = per_class_recall(preds, labels, n_classes);
  double s = 0;
  for (double v : r) s += v;
  return s / static_cast<double>(n_classes);
}

namespace {

// UAR over the classes that occur in `labels`; small held-out splits may miss some.
double uar_present(const std::vector<int>& preds, const std::vector<int>& labels, int n_classes) {
  std::vector<double> hit(n_classes, 0), total(n_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total[labels[i]] += 1;
    if (preds[i] == labels[i]) hit[labels[i]] += 1;
  }
  double s = 0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (total[c] > 0) {
      s += hit[c] / total[c];
      ++present;
    }
  }
  if (present == 0) throw MetricError("recall: no labelled trials");
  return s / present;
}

}  // namespace

Tensor combine_four_to_three(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) != 4) {
    throw DimensionError("combine_four_to_three: expected [B,4], got " + shape_str(logits.shape()));
  }
  const std::size_t B = logits.dim(0);
  auto x = logits.data();
  std::vector<double> out(B * 3);
  for (std::size_t b = 0; b < B; ++b) {
    const double a = x[b * 4 + 2], c = x[b * 4 + 3];
    const double m = std::max(a, c);
    out[b * 3] = x[b * 4];
    out[b * 3 + 1] = x[b * 4 + 1];
    out[b * 3 + 2] = std::isinf(m) && m < 0 ? m : m + std::log(std::exp(a - m) + std::exp(c - m));
  }
  return Tensor({B, 3}, std::move(out));
}

Tensor ensemble_logits(const std::vector<Tensor>& per_fold_logits) {
  if (per_fold_logits.empty()) throw EmptySetError("ensemble: no fold logits");
  const Shape& shape = per_fold_logits[0].shape();
  // Running mean, so identical folds reproduce their logits exactly.
  std::vector<double> acc(per_fold_logits[0].numel(), 0.0);
  double k = 0;
  for (const auto& t : per_fold_logits) {
    if (t.shape() != shape) {
      throw DimensionError("ensemble: shape " + shape_str(t.shape()) + " differs from " + shape_str(shape));
    }
    k += 1;
    auto d = t.data();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (d[i] - acc[i]) / k;
  }
  return Tensor(shape, std::move(acc));
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows: expected [B,C]");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  auto x = logits.data();
  std::vector<int> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    out[b] = static_cast<int>(std::max_element(x.begin() + b * C, x.begin() + (b + 1) * C) - (x.begin() + b * C));
  }
  return out;
}

Tensor predict_subjects(const Model& model, const TrialSet& trials, std::size_t head) {
  NoGradGuard no_grad;
  const std::size_t N = trials.n_trials(), C = model.config().classes_per_head;
  std::vector<double> out(N * C);
  for (int s : trials.subjects()) {
    const auto idx = trials.indices_of_subject(s);
    const TrialSet group = trials.subset(idx);
    Tensor logits = model.forward(group.data, {0, idx.size()}, head);
    auto l = logits.data();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(l.begin() + i * C, C, out.begin() + idx[i] * C);
  }
  return Tensor({N, C}, std::move(out));
}

double CvResult::mean_uar() const {
  if (folds.empty()) return 0;
  double s = 0;
  for (const auto& f : folds) s += f.val_uar;
  return s / static_cast<double>(folds.size());
}

double CvResult::std_uar() const {
  if (folds.size() < 2) return 0;
  const double m = mean_uar();
  double s = 0;
  for (const auto& f : folds) s += (f.val_uar - m) * (f.val_uar - m);
  return std::sqrt(s / static_cast<double>(folds.size() - 1));
}

namespace {

// Activations are large, short-lived buffers; keep them on the heap instead
// of paying an mmap/munmap pair per tensor.
void tune_allocator() {
#ifdef __GLIBC__
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
  });
#endif
}

}  // namespace

Model train_model(const std::vector<PoolEntry>& pool, const ModelConfig& model_config, const TrainConfig& config,
                  std::size_t fold, const std::function<void(std::size_t, double)>& on_epoch) {
  config.validate();
  if (pool.empty()) throw DataError("training pool is empty");
  tune_allocator();
  ModelConfig mc = model_config;
  mc.dropout_p = config.dropout_p;
  const Rng root(config.seed);
  Model model = Model::build(mc, root.derive("fold").derive(fold).key());

  const std::size_t n_classes = mc.classes_per_head;
  std::vector<double> weights = config.class_weights;
  if (weights.empty()) {
    // Inverse frequency over the expected (oversampled) class mass.
    std::vector<double> mass(n_classes, 0.0);
    for (const auto& e : pool) {
      const int y = e.set->labels[e.index];
      if (static_cast<std::size_t>(y) >= n_classes) {
        throw DataError("label " + std::to_string(y) + " exceeds the model's " + std::to_string(n_classes) + " classes");
      }
      mass[y] += e.weight;
    }
    std::vector<int> present;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (mass[c] > 0) present.push_back(static_cast<int>(c));
    }
    std::vector<double> counts;
    std::vector<std::vector<int>> groups;
    for (int c : present) counts.push_back(mass[c]);
    for (const auto& g : config.merge_groups) {
      std::vector<int> mapped;
      for (int c : g) {
        auto it = std::find(present.begin(), present.end(), c);
        if (it != present.end()) mapped.push_back(static_cast<int>(it - present.begin()));
      }
      if (mapped.size() > 1) groups.push_back(mapped);
    }
    const auto w = class_weights(counts, groups);
    weights.assign(n_classes, 0.0);
    for (std::size_t i = 0; i < present.size(); ++i) weights[present[i]] = w[i];
  }

  AdamState adam;
  const Rng dropout_root = root.derive("dropout").derive(fold);
  const std::uint64_t data_seed = root.derive("data").derive(fold).key();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    ChunkBatcher batcher(pool, config.subjects_per_batch, config.trials_per_subject, data_seed, epoch);
    double loss_sum = 0;
    std::size_t n = 0;
    while (auto batch = batcher.next()) {
      model.zero_grad();
      Rng drng = dropout_root.derive(step++);
      Tensor logits = model.forward(batch->chunk, batch->bounds, batch->head, Mode::train, drng);
      Tensor loss = cross_entropy(logits, batch->labels, weights, config.label_smoothing);
      loss.backward();
      adam_step(model.parameters(), adam, config.lr, config.weight_decay);
      loss_sum += loss.item();
      ++n;
    }
    if (on_epoch) on_epoch(epoch, n ? loss_sum / static_cast<double>(n) : 0.0);
  }
  model.zero_grad();
  return model;
}

namespace {

template <typename E>
bool rethrow_as(const std::exception& e, const std::string& prefix) {
  if (dynamic_cast<const E*>(&e)) throw E(prefix + e.what());
  return false;
}

[[noreturn]] void rethrow_with_fold(const std::exception& e, std::size_t fold) {
  const std::string p = "fold " + std::to_string(fold) + ": ";
  rethrow_as<DimensionError>(e, p) || rethrow_as<ParameterError>(e, p) || rethrow_as<DataError>(e, p) ||
      rethrow_as<FormatError>(e, p) || rethrow_as<IndexError>(e, p) || rethrow_as<EmptySetError>(e, p) ||
      rethrow_as<EmptyOutputError>(e, p) || rethrow_as<BuildError>(e, p) || rethrow_as<MetricError>(e, p) ||
      rethrow_as<ContractError>(e, p);
  throw TrainingError(p + e.what());
}

}  // namespace

CvResult run_cv(const std::vector<TrialSet>& sources, const TrialSet& calib, const FoldPlan& plan,
                const ModelConfig& model_config, const TrainConfig& config, const CvOptions& options) {
  config.validate();
  calib.validate();
  for (const auto& s : sources) {
    s.validate();
    if (s.n_channels() != calib.n_channels() || s.n_samples() != calib.n_samples()) {
      throw DimensionError("source set has " + std::to_string(s.n_channels()) + "x" + std::to_string(s.n_samples()) +
                           " trials, calibration has " + std::to_string(calib.n_channels()) + "x" +
                           std::to_string(calib.n_samples()));
    }
  }
  if (plan.size() == 0) throw ParameterError("fold plan is empty");
  const auto resolved = plan.resolve(calib);
  std::size_t source_n = 0;
  for (const auto& s : sources) source_n += s.n_trials();
  const auto head = static_cast<std::size_t>(calib.dataset_id);

  CvResult result;
  result.folds.resize(plan.size());
  std::vector<Tensor> test_logits(plan.size());

  auto run_fold = [&](std::size_t f) {
    const auto& [train_idx, val_idx] = resolved[f];
    if (val_idx.empty()) throw DataError("fold has no validation trials");
    std::vector<PoolEntry> pool;
    for (const auto& s : sources) {
      for (std::size_t i = 0; i < s.n_trials(); ++i) pool.push_back({&s, i, 1.0});
    }
    if (!train_idx.empty()) {
      const auto w = oversample_weights(source_n, train_idx.size());
      for (std::size_t j = 0; j < train_idx.size(); ++j) pool.push_back({&calib, train_idx[j], w.weight[source_n + j]});
    }
    std::function<void(std::size_t, double)> cb;
    if (options.on_epoch) cb = [&, f](std::size_t e, double l) { options.on_epoch(f, e, l); };
    Model model = train_model(pool, model_config, config, f, cb);

    FoldResult& r = result.folds[f];
    r.fold = f;
    r.val_indices = val_idx;
    const TrialSet val = calib.subset(val_idx);
    r.val_logits = predict_subjects(model, val, head);
    r.val_uar = uar_present(argmax_rows(r.val_logits), val.labels, static_cast<int>(model.config().classes_per_head));
    if (options.checkpoint_dir) {
      char name[32];
      std::snprintf(name, sizeof name, "fold_%02zu.naln", f);
      r.checkpoint = name;
      model.save(*options.checkpoint_dir + "/" + name);
    }
    if (options.test) test_logits[f] = predict_subjects(model, *options.test, static_cast<std::size_t>(options.test->dataset_id));
  };

  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, plan.size()));
  std::vector<std::exception_ptr> errors(plan.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t f = next++; f < plan.size(); f = next++) {
      try {
        run_fold(f);
      } catch (...) {
        errors[f] = std::current_exception();
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t j = 0; j < jobs; ++j) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  for (std::size_t f = 0; f < errors.size(); ++f) {
    if (!errors[f]) continue;
    try {
      std::rethrow_exception(errors[f]);
    } catch (const std::exception& e) {
      rethrow_with_fold(e, f);
    }
  }
  if (options.test) result.test_logits = ensemble_logits(test_logits);
  return result;
}

std::string fold_results_json(const std::vector<FoldResult>& folds) {
  json arr = json::array();
  for (const auto& f : folds) {
    json j;
    j["fold"] = f.fold;
    j["val_uar"] = f.val_uar;
    j["val_indices"] = f.val_indices;
    json rows = json::array();
    const std::size_t C = f.val_logits.defined() ? f.val_logits.dim(1) : 0;
    for (std::size_t i = 0; i < f.val_indices.size(); ++i) {
      auto d = f.val_logits.data();
      rows.push_back(std::vector<double>(d.begin() + i * C, d.begin() + (i + 1) * C));
    }
    j["val_logits"] = rows;
    j["checkpoint"] = f.checkpoint;
    arr.push_back(j);
  }
  return arr.dump(1) + "\n";
}

std::string predictions_csv(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("predictions_csv: expected [N,C]");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  std::string out = "trial_index";
  for (std::size_t c = 0; c < C; ++c) out += ",logit_" + std::to_string(c);
  out += ",pred\n";
  const auto preds = argmax_rows(logits);
  auto d = logits.data();
  char buf[40];
  for (std::size_t i = 0; i < N; ++i) {
    out += std::to_string(i);
    for (std::size_t c = 0; c < C; ++c) {
      std::snprintf(buf, sizeof buf, ",%.17g", d[i * C + c]);
      out += buf;
    }
    out += "," + std::to_string(preds[i]) + "\n";
  }
  return out;
}

}  // namespace naln
