#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "naln/datapipe.hpp"
#include "naln/model.hpp"
#include "naln/tensor.hpp"
#include "naln/trialset.hpp"

namespace naln {

struct TrainConfig {
  std::size_t epochs = 200;
  double lr = 5e-4;
  double weight_decay = 1e-3;
  double dropout_p = 0.25;
  double label_smoothing = 0.1;
  // Empty: derived from the oversampled class mass of each fold.
  std::vector<double> class_weights;
  // Logical class groups for the derived weights, e.g. {{2, 3}}.
  std::vector<std::vector<int>> merge_groups{{2, 3}};
  std::uint64_t seed = 0;
  std::size_t subjects_per_batch = 4;
  std::size_t trials_per_subject = 16;

  static TrainConfig sleep_default();
  static TrainConfig motor_imagery_default();

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text, TrainConfig base);
};

/// Label-smoothed, class-weighted cross-entropy, averaged with the target
/// class weights as sample weights.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& class_weights,
                     double smoothing);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;
};

/// Adam with bias correction and L2 decay added to the gradient. Parameters
/// that received no gradient this step are left untouched.
void adam_step(std::vector<std::pair<std::string, Tensor>>& params, AdamState& state, double lr, double weight_decay);

std::vector<double> per_class_recall(const std::vector<int>& preds, const std::vector<int>& labels, int n_classes);
/// Unweighted average recall; every class must occur in `labels`.
double uar(const std::vector<int>& preds, const std::vector<int>& labels, int n_classes);

/// (left, right, feet, rest) -> (left, right, feet or rest), summing the
/// last two class probabilities in log space.
Tensor combine_four_to_three(const Tensor& logits);
Tensor ensemble_logits(const std::vector<Tensor>& per_fold_logits);
std::vector<int> argmax_rows(const Tensor& logits);

/// Eval-mode logits for every trial, each subject's trials forwarded together.
Tensor predict_subjects(const Model& model, const TrialSet& trials, std::size_t head);

struct FoldResult {
  std::size_t fold = 0;
  double val_uar = 0;
  std::vector<std::size_t> val_indices;  // into the calibration set
  Tensor val_logits;                     // [n_val, classes]
  std::string checkpoint;
};

struct CvOptions {
  std::size_t jobs = 1;
  // When set, fold models are written as <dir>/fold_XX.naln.
  std::optional<std::string> checkpoint_dir;
  // When set, every fold model predicts this split and the logits are averaged.
  const TrialSet* test = nullptr;
  // Called with (fold, epoch, mean loss) after each epoch; may run on worker threads.
  std::function<void(std::size_t, std::size_t, double)> on_epoch;
};

struct CvResult {
  std::vector<FoldResult> folds;
  Tensor test_logits;  // undefined without a test split
  double mean_uar() const;
  double std_uar() const;
};

/// Trains one model on `pool` and returns it. Seeds derive from
/// (config.seed, fold).
Model train_model(const std::vector<PoolEntry>& pool, const ModelConfig& model_config, const TrainConfig& config,
                  std::size_t fold, const std::function<void(std::size_t, double)>& on_epoch = {});

/// Cross-validation over the calibration set. Every fold trains on all
/// source trials plus its calibration training part, oversampled to equal
/// mass, and is scored on its held-out calibration part.
CvResult run_cv(const std::vector<TrialSet>& sources, const TrialSet& calib, const FoldPlan& plan,
                const ModelConfig& model_config, const TrainConfig& config, const CvOptions& options = {});

std::string fold_results_json(const std::vector<FoldResult>& folds);
std::string predictions_csv(const Tensor& logits);

}  // namespace naln
