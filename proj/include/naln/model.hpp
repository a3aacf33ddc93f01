#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "naln/alignment.hpp"
#include "naln/rng.hpp"
#include "naln/tensor.hpp"

namespace naln {

enum class Task { sleep, motor_imagery };

std::string task_name(Task task);
Task parse_task(const std::string& name);

/// Architecture description for the modified EEGInception network.
struct ModelConfig {
  Task task = Task::motor_imagery;
  std::size_t in_channels = 30;
  std::size_t in_samples = 640;
  std::size_t temporal_filters_per_branch = 8;
  std::size_t spatial_depth_multiplier = 2;
  std::vector<std::size_t> branch_dilations{1, 2, 4};
  std::vector<std::size_t> block2_dilations{1, 2, 4};
  std::size_t temporal_kernel = 15;
  std::size_t block2_kernel = 5;
  std::size_t stage3_kernel = 7;
  std::size_t stage4_kernel = 3;
  std::size_t pool1_kernel = 4;
  std::size_t pool2_kernel = 8;
  std::size_t final_pool_kernel = 8;  // 0 selects global average pooling
  bool constant_channels = false;
  std::size_t n_heads = 3;
  std::size_t classes_per_head = 4;
  double dropout_p = 0.25;
  bool align_input = true;
  bool align_layers = false;
  bool deepset = true;
  double align_epsilon = 1e-5;
  // Reference variant: undilated, non-separable kernels with the same
  // receptive field. Used to measure the parameter savings.
  bool dense_kernels = false;

  static ModelConfig sleep_default();
  static ModelConfig motor_imagery_default();

  bool global_average() const { return final_pool_kernel == 0; }
  std::size_t block1_channels() const;
  std::size_t block2_channels() const;
  std::size_t stage3_channels() const;
  std::size_t stage4_channels() const;
  /// Temporal receptive field, in samples, of block-1 branch `b`.
  std::size_t branch_receptive_field(std::size_t b) const;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  bool operator==(const ModelConfig&) const = default;
};

enum class Mode { train, eval };

/// Group offsets for contiguous runs of equal subject ids: [0, ..., K].
std::vector<std::size_t> subject_bounds(const std::vector<int>& subject_ids);

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }

  /// Logits [K, classes_per_head] for `chunk` [K, C, T]. `bounds` partitions
  /// the trials into subject groups; alignment never mixes groups. The rng
  /// drives dropout and is untouched in eval mode.
  Tensor forward(const Tensor& chunk, const std::vector<std::size_t>& bounds, std::size_t head, Mode mode,
                 Rng& rng) const;
  /// Eval-mode convenience overload.
  Tensor forward(const Tensor& chunk, const std::vector<std::size_t>& bounds, std::size_t head) const;
  /// Final representation before the heads, [K, feature_dim()].
  Tensor features(const Tensor& chunk, const std::vector<std::size_t>& bounds, Mode mode, Rng& rng) const;

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t parameter_count() const;
  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  void zero_grad();

  std::vector<std::uint8_t> serialize() const;
  static Model deserialize(const std::vector<std::uint8_t>& bytes);
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  struct Block1Branch {
    std::size_t dilation;
    Tensor temporal_weight, temporal_bias, spatial_weight;
  };
  struct SeparableConv {
    std::size_t dilation = 1;
    std::size_t pool = 1;  // same-padded average pool ahead of the conv
    Tensor depthwise_weight;  // [C,1,K], or the dense kernel [F,C,K]
    Tensor pointwise_weight;  // [F,C,1], undefined when dense
    Tensor bias;              // [F]
  };
  struct Head {
    Tensor weight, bias;
  };

  explicit Model(ModelConfig config) : config_(std::move(config)) {}
  Tensor& add_param(const std::string& name, Tensor t);
  Tensor apply_separable(const SeparableConv& conv, const Tensor& x) const;
  Tensor post_stage(const Tensor& x, const std::vector<std::size_t>& bounds, std::size_t align_index, Mode mode,
                    Rng& rng) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Block1Branch> block1_;
  std::vector<SeparableConv> block2_;
  SeparableConv stage3_, stage4_;
  // Statistical alignment: [input?] then one per stage boundary when enabled.
  StatAlignLayer input_align_;
  std::vector<StatAlignLayer> layer_align_;
  DeepSetAlign stage3_deepset_, final_deepset_;
  std::vector<Head> heads_;
  std::size_t feature_dim_ = 0;
};

}  // namespace naln
