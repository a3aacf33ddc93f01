#include "naln/model.hpp"

#include <algorithm>

#include "binary_io.hpp"
#include "json.hpp"
#include "naln/error.hpp"
#include "naln/init.hpp"
#include "naln/ops.hpp"

namespace naln {

using nlohmann::json;

std::string task_name(Task task) { return task == Task::sleep ? "sleep" : "mi"; }

Task parse_task(const std::string& name) {
  if (name == "sleep") return Task::sleep;
  if (name == "mi" || name == "motor_imagery") return Task::motor_imagery;
  throw ParameterError("unknown task '" + name + "' (expected sleep or mi)");
}

ModelConfig ModelConfig::sleep_default() {
  ModelConfig c;
  c.task = Task::sleep;
  c.in_channels = 2;
  c.in_samples = 3000;
  c.temporal_filters_per_branch = 8;
  c.spatial_depth_multiplier = 4;
  c.branch_dilations = {2, 4, 8};
  c.pool2_kernel = 16;
  c.final_pool_kernel = 0;
  c.constant_channels = true;
  c.n_heads = 1;
  c.classes_per_head = 6;
  c.align_input = true;
  c.align_layers = true;
  c.deepset = false;
  return c;
}

ModelConfig ModelConfig::motor_imagery_default() { return ModelConfig{}; }

std::size_t ModelConfig::block1_channels() const {
  return branch_dilations.size() * temporal_filters_per_branch * spatial_depth_multiplier;
}

std::size_t ModelConfig::block2_channels() const {
  const std::size_t nb = block2_dilations.size();
  if (constant_channels) return block1_channels();
  return nb * std::max<std::size_t>(1, temporal_filters_per_branch * spatial_depth_multiplier / 2);
}

std::size_t ModelConfig::stage3_channels() const {
  return constant_channels ? block2_channels() : std::max<std::size_t>(1, block2_channels() / 2);
}

std::size_t ModelConfig::stage4_channels() const {
  return constant_channels ? stage3_channels() : std::max<std::size_t>(1, stage3_channels() / 2);
}

std::size_t ModelConfig::branch_receptive_field(std::size_t b) const {
  if (b >= branch_dilations.size()) throw IndexError("branch index out of range");
  const std::size_t d = branch_dilations[b];
  const std::size_t conv = d * (temporal_kernel - 1) + 1;
  return dense_kernels ? conv : conv + (d - 1);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw BuildError("model config: " + msg); };
  if (in_channels == 0 || in_samples == 0) fail("input dimensions must be >= 1");
  if (temporal_filters_per_branch == 0) fail("temporal_filters_per_branch must be >= 1");
  if (spatial_depth_multiplier == 0) fail("spatial_depth_multiplier must be >= 1");
  if (n_heads == 0 || classes_per_head < 2) fail("need >= 1 head with >= 2 classes");
  if (!(dropout_p >= 0 && dropout_p < 1)) fail("dropout_p must lie in [0, 1)");
  if (!(align_epsilon > 0)) fail("align_epsilon must be > 0");
  for (const auto* dil : {&branch_dilations, &block2_dilations}) {
    if (dil->empty()) fail("dilation lists must be non-empty");
    for (std::size_t i = 0; i < dil->size(); ++i) {
      if ((*dil)[i] == 0) fail("dilations must be >= 1");
      if (i && (*dil)[i] <= (*dil)[i - 1]) fail("dilations must be strictly increasing");
    }
  }
  for (auto [k, name] : {std::pair{temporal_kernel, "temporal_kernel"}, {block2_kernel, "block2_kernel"},
                         {stage3_kernel, "stage3_kernel"}, {stage4_kernel, "stage4_kernel"}}) {
    if (k == 0 || k % 2 == 0) fail(std::string(name) + " must be odd so same padding keeps the length");
  }
  if (pool1_kernel == 0 || pool2_kernel == 0) fail("pool kernels must be >= 1");
  if (constant_channels && block1_channels() % block2_dilations.size() != 0) {
    fail("block2: " + std::to_string(block1_channels()) + " channels cannot split evenly over " +
         std::to_string(block2_dilations.size()) + " branches");
  }
}

std::string ModelConfig::to_json() const {
  json j;
  j["task"] = task_name(task);
  j["in_channels"] = in_channels;
  j["in_samples"] = in_samples;
  j["temporal_filters_per_branch"] = temporal_filters_per_branch;
  j["spatial_depth_multiplier"] = spatial_depth_multiplier;
  j["branch_dilations"] = branch_dilations;
  j["block2_dilations"] = block2_dilations;
  j["temporal_kernel"] = temporal_kernel;
  j["block2_kernel"] = block2_kernel;
  j["stage3_kernel"] = stage3_kernel;
  j["stage4_kernel"] = stage4_kernel;
  j["pool1_kernel"] = pool1_kernel;
  j["pool2_kernel"] = pool2_kernel;
  j["final_pool_kernel"] = final_pool_kernel;
  j["constant_channels"] = constant_channels;
  j["n_heads"] = n_heads;
  j["classes_per_head"] = classes_per_head;
  j["dropout_p"] = dropout_p;
  j["align_input"] = align_input;
  j["align_layers"] = align_layers;
  j["deepset"] = deepset;
  j["align_epsilon"] = align_epsilon;
  j["dense_kernels"] = dense_kernels;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("model config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParameterError("model config: expected a JSON object");
  ModelConfig c = j.contains("task") && j["task"] == "sleep" ? sleep_default() : motor_imagery_default();
  try {
    for (auto& [key, v] : j.items()) {
      if (key == "task") c.task = parse_task(v.get<std::string>());
      else if (key == "in_channels") c.in_channels = v.get<std::size_t>();
      else if (key == "in_samples") c.in_samples = v.get<std::size_t>();
      else if (key == "temporal_filters_per_branch") c.temporal_filters_per_branch = v.get<std::size_t>();
      else if (key == "spatial_depth_multiplier") c.spatial_depth_multiplier = v.get<std::size_t>();
      else if (key == "branch_dilations") c.branch_dilations = v.get<std::vector<std::size_t>>();
      else if (key == "block2_dilations") c.block2_dilations = v.get<std::vector<std::size_t>>();
      else if (key == "temporal_kernel") c.temporal_kernel = v.get<std::size_t>();
      else if (key == "block2_kernel") c.block2_kernel = v.get<std::size_t>();
      else if (key == "stage3_kernel") c.stage3_kernel = v.get<std::size_t>();
      else if (key == "stage4_kernel") c.stage4_kernel = v.get<std::size_t>();
      else if (key == "pool1_kernel") c.pool1_kernel = v.get<std::size_t>();
      else if (key == "pool2_kernel") c.pool2_kernel = v.get<std::size_t>();
      else if (key == "final_pool_kernel") c.final_pool_kernel = v.get<std::size_t>();
      else if (key == "constant_channels") c.constant_channels = v.get<bool>();
      else if (key == "n_heads") c.n_heads = v.get<std::size_t>();
      else if (key == "classes_per_head") c.classes_per_head = v.get<std::size_t>();
      else if (key == "dropout_p") c.dropout_p = v.get<double>();
      else if (key == "align_input") c.align_input = v.get<bool>();
      else if (key == "align_layers") c.align_layers = v.get<bool>();
      else if (key == "deepset") c.deepset = v.get<bool>();
      else if (key == "align_epsilon") c.align_epsilon = v.get<double>();
      else if (key == "dense_kernels") c.dense_kernels = v.get<bool>();
      else throw ParameterError("model config: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("model config: ") + e.what());
  }
  return c;
}

std::vector<std::size_t> subject_bounds(const std::vector<int>& subject_ids) {
  std::vector<std::size_t> bounds{0};
  std::vector<int> seen;
  for (std::size_t i = 1; i <= subject_ids.size(); ++i) {
    if (i == subject_ids.size() || subject_ids[i] != subject_ids[i - 1]) {
      if (std::find(seen.begin(), seen.end(), subject_ids[i - 1]) != seen.end()) {
        throw ContractError("subject " + std::to_string(subject_ids[i - 1]) + " is not contiguous in the chunk");
      }
      seen.push_back(subject_ids[i - 1]);
      bounds.push_back(i);
    }
  }
  if (subject_ids.empty()) bounds.push_back(0);
  return bounds;
}

Tensor& Model::add_param(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, std::move(t));
  return params_.back().second;
}

namespace {

std::size_t pooled_length(std::size_t t, std::size_t k, const char* layer) {
  if (t < k) {
    throw BuildError(std::string(layer) + ": input length " + std::to_string(t) + " shorter than pool kernel " +
                     std::to_string(k));
  }
  return (t - k) / k + 1;
}

std::pair<std::size_t, std::size_t> same_pool_pads(std::size_t k) {
  const std::size_t left = (k - 1) / 2;
  return {left, k - 1 - left};
}

}  // namespace

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m(config);
  const ModelConfig& c = m.config_;
  const Rng init = Rng(seed).derive("init");
  const std::size_t E = c.in_channels, F = c.temporal_filters_per_branch, D = c.spatial_depth_multiplier;

  const std::size_t t1 = pooled_length(c.in_samples, c.pool1_kernel, "pool1");
  const std::size_t t2 = pooled_length(t1, c.pool2_kernel, "pool2");
  const std::size_t C1 = c.block1_channels(), C2 = c.block2_channels();
  const std::size_t C3 = c.stage3_channels(), C4 = c.stage4_channels();
  const std::size_t tf = c.global_average() ? 1 : pooled_length(t2, c.final_pool_kernel, "final_pool");
  m.feature_dim_ = c.global_average() ? C4 : C4 * tf;

  auto stat_layer = [&](const std::string& name, std::size_t channels) {
    StatAlignLayer layer = StatAlignLayer::create(channels, c.align_epsilon);
    layer.weight = m.add_param(name + ".weight", layer.weight);
    layer.bias = m.add_param(name + ".bias", layer.bias);
    return layer;
  };
  auto deepset_layer = [&](const std::string& name, std::size_t n) {
    if (n < 2) throw BuildError(name + ": deep-set alignment needs a feature dimension >= 2, got " + std::to_string(n));
    DeepSetAlign ds = DeepSetAlign::create(n, init.derive(name));
    ds.gamma_weight = m.add_param(name + ".gamma.weight", ds.gamma_weight);
    ds.gamma_bias = m.add_param(name + ".gamma.bias", ds.gamma_bias);
    ds.lambda_weight = m.add_param(name + ".lambda.weight", ds.lambda_weight);
    ds.lambda_bias = m.add_param(name + ".lambda.bias", ds.lambda_bias);
    return ds;
  };
  auto separable = [&](const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t dilation) {
    SeparableConv s;
    if (c.dense_kernels) {
      const std::size_t len = dilation * (k - 1) + 1;
      s.depthwise_weight = m.add_param(name + ".conv.weight", uniform_fan_in({out, in, len}, in * len, init.derive(name + ".conv")));
    } else {
      s.dilation = dilation;
      s.pool = dilation;
      s.depthwise_weight = m.add_param(name + ".depthwise.weight", uniform_fan_in({in, 1, k}, k, init.derive(name + ".depthwise")));
      s.pointwise_weight = m.add_param(name + ".pointwise.weight", uniform_fan_in({out, in, 1}, in, init.derive(name + ".pointwise")));
    }
    s.bias = m.add_param(name + ".bias", Tensor::zeros({out}));
    return s;
  };

  if (c.align_input) m.input_align_ = stat_layer("input_align", E);

  for (std::size_t b = 0; b < c.branch_dilations.size(); ++b) {
    const std::string name = "block1.branch" + std::to_string(b);
    const std::size_t d = c.branch_dilations[b];
    const std::size_t len = c.dense_kernels ? d * (c.temporal_kernel - 1) + 1 : c.temporal_kernel;
    Block1Branch br;
    br.dilation = d;
    br.temporal_weight = m.add_param(name + ".temporal.weight", uniform_fan_in({F, 1, len}, len, init.derive(name + ".temporal")));
    br.temporal_bias = m.add_param(name + ".temporal.bias", Tensor::zeros({F}));
    br.spatial_weight = m.add_param(name + ".spatial.weight", uniform_fan_in({F * D, 1, E, 1}, E, init.derive(name + ".spatial")));
    m.block1_.push_back(std::move(br));
  }
  if (c.align_layers) m.layer_align_.push_back(stat_layer("align1", C1));

  const std::size_t branch_out = C2 / c.block2_dilations.size();
  for (std::size_t b = 0; b < c.block2_dilations.size(); ++b) {
    m.block2_.push_back(separable("block2.branch" + std::to_string(b), C1, branch_out, c.block2_kernel, c.block2_dilations[b]));
  }
  if (c.align_layers) m.layer_align_.push_back(stat_layer("align2", C2));

  m.stage3_ = separable("stage3", C2, C3, c.stage3_kernel, 1);
  if (c.align_layers) m.layer_align_.push_back(stat_layer("align3", C3));
  if (c.deepset) m.stage3_deepset_ = deepset_layer("stage3_deepset", C3);

  m.stage4_ = separable("stage4", C3, C4, c.stage4_kernel, 1);
  if (c.align_layers) m.layer_align_.push_back(stat_layer("align4", C4));

  if (c.deepset) m.final_deepset_ = deepset_layer("final_deepset", m.feature_dim_);

  for (std::size_t h = 0; h < c.n_heads; ++h) {
    const std::string name = "head" + std::to_string(h);
    Head head;
    head.weight = m.add_param(name + ".weight",
                              uniform_fan_in({c.classes_per_head, m.feature_dim_}, m.feature_dim_, init.derive(name)));
    head.bias = m.add_param(name + ".bias", Tensor::zeros({c.classes_per_head}));
    m.heads_.push_back(std::move(head));
  }
  return m;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

Tensor Model::apply_separable(const SeparableConv& conv, const Tensor& x) const {
  if (!conv.pointwise_weight.defined()) {
    const std::size_t len = conv.depthwise_weight.dim(2);
    return ops::conv1d(x, conv.depthwise_weight, conv.bias, 1, 1, 1, ops::same_padding(len, 1));
  }
  Tensor h = x;
  if (conv.pool > 1) {
    auto [l, r] = same_pool_pads(conv.pool);
    h = ops::avg_pool1d(h, conv.pool, 1, l, r);
  }
  const std::size_t channels = x.dim(1), k = conv.depthwise_weight.dim(2);
  h = ops::conv1d(h, conv.depthwise_weight, Tensor{}, 1, conv.dilation, channels, ops::same_padding(k, conv.dilation));
  return ops::conv1d(h, conv.pointwise_weight, conv.bias, 1, 1, 1, 0);
}

Tensor Model::post_stage(const Tensor& x, const std::vector<std::size_t>& bounds, std::size_t align_index, Mode mode,
                         Rng& rng) const {
  Tensor h = x;
  if (config_.align_layers) h = layer_align_.at(align_index).forward(h, bounds);
  h = ops::elu(h);
  return ops::dropout(h, config_.dropout_p, rng, mode == Mode::train);
}

Tensor Model::features(const Tensor& chunk, const std::vector<std::size_t>& bounds, Mode mode, Rng& rng) const {
  const ModelConfig& c = config_;
  if (chunk.rank() != 3 || chunk.dim(1) != c.in_channels || chunk.dim(2) != c.in_samples) {
    throw DimensionError("model input: expected [K," + std::to_string(c.in_channels) + "," +
                         std::to_string(c.in_samples) + "], got " + shape_str(chunk.shape()));
  }
  const std::size_t K = chunk.dim(0), E = c.in_channels, T = c.in_samples;
  if (K == 0) throw EmptySetError("model input: empty chunk");
  if (bounds.size() < 2 || bounds.front() != 0 || bounds.back() != K) {
    throw ContractError("subject bounds must run from 0 to " + std::to_string(K));
  }
  for (std::size_t g = 0; g + 1 < bounds.size(); ++g) {
    if (bounds[g + 1] <= bounds[g]) throw EmptySetError("empty subject group " + std::to_string(g));
  }
  const bool training = mode == Mode::train;
  const std::size_t F = c.temporal_filters_per_branch, D = c.spatial_depth_multiplier;

  Tensor x = chunk;
  if (c.align_input) x = input_align_.forward(x, bounds);

  const Tensor per_electrode = ops::reshape(x, {K * E, 1, T});
  std::vector<Tensor> branches;
  for (const auto& br : block1_) {
    Tensor h = per_electrode;
    const std::size_t len = br.temporal_weight.dim(2);
    const std::size_t dilation = c.dense_kernels ? 1 : br.dilation;
    if (!c.dense_kernels && br.dilation > 1) {
      auto [l, r] = same_pool_pads(br.dilation);
      h = ops::avg_pool1d(h, br.dilation, 1, l, r);
    }
    h = ops::conv1d(h, br.temporal_weight, br.temporal_bias, 1, dilation, 1, ops::same_padding(len, dilation));
    h = ops::transpose(ops::reshape(h, {K, E, F, T}), 1, 2);
    h = ops::depthwise_conv_channels(h, br.spatial_weight, D);
    branches.push_back(ops::reshape(h, {K, F * D, T}));
  }
  x = post_stage(ops::concat(branches, 1), bounds, 0, mode, rng);
  x = ops::avg_pool1d(x, c.pool1_kernel, c.pool1_kernel);

  branches.clear();
  for (const auto& br : block2_) branches.push_back(apply_separable(br, x));
  x = post_stage(ops::concat(branches, 1), bounds, 1, mode, rng);
  x = ops::avg_pool1d(x, c.pool2_kernel, c.pool2_kernel);

  x = apply_separable(stage3_, x);
  if (c.align_layers) x = layer_align_.at(2).forward(x, bounds);
  x = ops::elu(x);
  if (c.deepset) x = stage3_deepset_.forward_channels(x, bounds);
  x = ops::dropout(x, c.dropout_p, rng, training);

  x = post_stage(apply_separable(stage4_, x), bounds, 3, mode, rng);

  if (c.global_average()) {
    x = ops::global_avg_pool(x);
  } else {
    x = ops::avg_pool1d(x, c.final_pool_kernel, c.final_pool_kernel);
    x = ops::reshape(x, {K, feature_dim_});
  }
  if (c.deepset) x = ops::dropout(final_deepset_.forward_groups(x, bounds), c.dropout_p, rng, training);
  return x;
}

Tensor Model::forward(const Tensor& chunk, const std::vector<std::size_t>& bounds, std::size_t head, Mode mode,
                      Rng& rng) const {
  if (head >= heads_.size()) {
    throw IndexError("head " + std::to_string(head) + " out of range (model has " + std::to_string(heads_.size()) +
                     " heads)");
  }
  Tensor f = features(chunk, bounds, mode, rng);
  return ops::linear(f, heads_[head].weight, heads_[head].bias);
}

Tensor Model::forward(const Tensor& chunk, const std::vector<std::size_t>& bounds, std::size_t head) const {
  Rng unused(0);
  return forward(chunk, bounds, head, Mode::eval, unused);
}

namespace {
constexpr char kCheckpointMagic[4] = {'N', 'A', 'L', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;
}  // namespace

std::vector<std::uint8_t> Model::serialize() const {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
  binio::put_u32(out, kCheckpointVersion);
  const std::string cfg = config_.to_json();
  binio::put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  binio::put_bytes(out, cfg);
  for (const auto& [name, t] : params_) {
    binio::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) binio::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.data()) binio::put_f64(out, v);
  }
  return out;
}

Model Model::deserialize(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) r.fail("bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version), 4);
  const std::uint32_t len = r.u32("config length");
  const std::size_t cfg_at = r.offset();
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(r.bytes(len, "config"));
  } catch (const ParameterError& e) {
    r.fail(e.what(), cfg_at);
  }
  Model m = build(cfg, 0);
  for (auto& [name, t] : m.params_) {
    const std::size_t at = r.offset();
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("tensor dim"));
    if (shape != t.shape()) {
      r.fail("parameter " + name + " has shape " + shape_str(shape) + ", expected " + shape_str(t.shape()), at);
    }
    r.need(8 * t.numel(), "tensor data");
    auto data = t.mutable_data();
    for (auto& v : data) v = r.f64("tensor data");
  }
  if (!r.at_end()) r.fail("trailing bytes after last parameter", r.offset());
  return m;
}

void Model::save(const std::filesystem::path& path) const { binio::write_file(path.string(), serialize()); }

Model Model::load(const std::filesystem::path& path) { return deserialize(binio::read_file(path.string())); }

}  // namespace naln
