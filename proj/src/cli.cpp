#include "naln/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "binary_io.hpp"
#include "json.hpp"
#include "naln/datapipe.hpp"
#include "naln/dsp.hpp"
#include "naln/error.hpp"
#include "naln/model.hpp"
#include "naln/training.hpp"

namespace naln {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fnv1a_hex(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string read_text(const std::string& path) {
  const auto bytes = binio::read_file(path);
  return {bytes.begin(), bytes.end()};
}

void write_text(const std::string& path, const std::string& text) {
  binio::write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

json input_record(const std::string& path) {
  return {{"path", path}, {"fnv1a64", fnv1a_hex(binio::read_file(path))}};
}

json manifest_base(const std::string& command) {
  json m;
  m["tool"] = "naln";
  m["version"] = kToolVersion;
  m["command"] = command;
  return m;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<double> parse_numbers(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& item : split_csv(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ParameterError(flag + ": not a number: '" + item + "'");
    }
  }
  return out;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

// ---- synth ------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  std::uint64_t seed = 0;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  const SynthSpec spec = SynthSpec::from_json(read_text(a.spec));
  const TrialSet set = synth_generate(spec, a.seed);
  write_eegt(set, a.out);
  json m = manifest_base("synth");
  m["seed"] = a.seed;
  m["spec"] = json::parse(spec.to_json());
  m["inputs"] = json::array({input_record(a.spec)});
  m["outputs"] = json::array({a.out});
  write_text(a.out + ".manifest.json", m.dump(2) + "\n");
  out << "wrote " << set.n_trials() << " trials x " << set.n_channels() << " channels x " << set.n_samples()
      << " samples to " << a.out << "\n";
}

// ---- preprocess -------------------------------------------------------------

struct PreprocessArgs {
  std::string in, out, channels, notch;
  double resample = 0, highpass = 0;
  bool car = false;
};

void cmd_preprocess(const PreprocessArgs& a, const CLI::App& sub, std::ostream& out) {
  const bool any_stage = sub.count("--channels") || sub.count("--resample") || sub.count("--highpass") ||
                         sub.count("--notch") || sub.count("--car");
  dsp::PreprocessOptions opt;
  if (!any_stage) {
    opt = dsp::PreprocessOptions::defaults();
  } else {
    if (sub.count("--channels") && a.channels != "all") opt.channels = split_csv(a.channels);
    if (sub.count("--resample")) opt.resample_hz = a.resample;
    if (sub.count("--highpass")) opt.highpass_hz = a.highpass;
    if (sub.count("--notch")) opt.notch_hz = parse_numbers(a.notch, "--notch");
    opt.car = a.car;
  }
  const TrialSet in = read_eegt(a.in);
  const TrialSet result = dsp::preprocess(in, opt);
  write_eegt(result, a.out);

  json m = manifest_base("preprocess");
  json chain = json::array();
  for (const auto& s : opt.describe()) chain.push_back(s);
  m["chain"] = chain;
  json o;
  if (opt.channels) o["channels"] = *opt.channels;
  if (opt.resample_hz) o["resample_hz"] = *opt.resample_hz;
  if (opt.highpass_hz) {
    o["highpass_hz"] = *opt.highpass_hz;
    o["highpass_order"] = opt.highpass_order;
  }
  o["notch_hz"] = opt.notch_hz;
  o["notch_q"] = opt.notch_q;
  o["car"] = opt.car;
  m["options"] = o;
  m["inputs"] = json::array({input_record(a.in)});
  m["outputs"] = json::array({a.out});
  write_text(a.out + ".manifest.json", m.dump(2) + "\n");
  for (const auto& s : opt.describe()) out << "stage: " << s << "\n";
  out << "wrote " << result.n_trials() << " trials x " << result.n_channels() << " channels x " << result.n_samples()
      << " samples at " << fmt_g(result.fs_hz) << " Hz to " << a.out << "\n";
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string task = "mi", calib, fold_scheme, out, config, test;
  std::vector<std::string> sources;
  std::uint64_t seed = 0;
  std::size_t jobs = 1, epochs = 0;
  double lr = 0;
  bool no_align = false, no_deepset = false, dry_run = false;
};

void cmd_train(const TrainArgs& a, const CLI::App& sub, std::ostream& out) {
  const Task task = parse_task(a.task);
  ModelConfig mc = task == Task::sleep ? ModelConfig::sleep_default() : ModelConfig::motor_imagery_default();
  TrainConfig tc = task == Task::sleep ? TrainConfig::sleep_default() : TrainConfig::motor_imagery_default();
  std::string scheme = task == Task::sleep ? "loso2" : "unstratified10";

  if (!a.config.empty()) {
    json file;
    try {
      file = json::parse(read_text(a.config));
    } catch (const json::exception& e) {
      throw ParameterError("config " + a.config + ": " + e.what());
    }
    if (!file.is_object()) throw ParameterError("config " + a.config + ": expected a JSON object");
    for (auto& [key, v] : file.items()) {
      if (key == "model") {
        json base = json::parse(mc.to_json());
        base.merge_patch(v);
        mc = ModelConfig::from_json(base.dump());
      } else if (key == "train") {
        tc = TrainConfig::from_json(v.dump(), tc);
      } else if (key == "fold_scheme") {
        if (!v.is_string()) throw ParameterError("config: fold_scheme must be a string");
        scheme = v.get<std::string>();
      } else {
        throw ParameterError("config " + a.config + ": unknown key '" + key + "'");
      }
    }
  }
  if (sub.count("--fold-scheme")) scheme = a.fold_scheme;
  if (sub.count("--seed")) tc.seed = a.seed;
  if (sub.count("--epochs")) tc.epochs = a.epochs;
  if (sub.count("--lr")) tc.lr = a.lr;
  if (a.no_align) {
    mc.align_input = false;
    mc.align_layers = false;
  }
  if (a.no_deepset) mc.deepset = false;
  tc.validate();

  std::vector<TrialSet> sources;
  for (const auto& p : a.sources) sources.push_back(read_eegt(p));
  const TrialSet calib = read_eegt(a.calib);
  std::optional<TrialSet> test;
  if (!a.test.empty()) test = read_eegt(a.test);

  mc.in_channels = calib.n_channels();
  mc.in_samples = calib.n_samples();
  int max_dataset = calib.dataset_id, max_classes = calib.n_classes;
  for (const auto& s : sources) {
    max_dataset = std::max(max_dataset, s.dataset_id);
    max_classes = std::max(max_classes, s.n_classes);
  }
  if (test) {
    max_dataset = std::max(max_dataset, test->dataset_id);
    if (test->n_channels() != calib.n_channels() || test->n_samples() != calib.n_samples()) {
      throw DimensionError("test set has " + std::to_string(test->n_channels()) + "x" +
                           std::to_string(test->n_samples()) + " trials, expected " +
                           std::to_string(calib.n_channels()) + "x" + std::to_string(calib.n_samples()));
    }
  }
  mc.n_heads = static_cast<std::size_t>(max_dataset) + 1;
  mc.classes_per_head = static_cast<std::size_t>(max_classes);
  mc.dropout_p = tc.dropout_p;
  mc.validate();

  FoldPlan plan;
  if (scheme == "loso2") {
    plan = make_folds_loso_repeated(calib.subjects(), 2);
  } else if (scheme == "unstratified10") {
    plan = make_folds_unstratified(calib.n_trials(), 10, Rng(tc.seed).derive("folds").key());
  } else {
    throw ParameterError("unknown fold scheme '" + scheme + "' (expected loso2 or unstratified10)");
  }

  out << "epochs=" << tc.epochs << " lr=" << fmt_g(tc.lr) << " wd=" << fmt_g(tc.weight_decay)
      << " dropout=" << fmt_g(tc.dropout_p) << "\n";

  fs::create_directories(a.out);
  json m = manifest_base("train");
  m["task"] = task_name(task);
  m["seed"] = tc.seed;
  m["fold_scheme"] = scheme;
  m["model"] = json::parse(mc.to_json());
  m["train"] = json::parse(tc.to_json());
  json inputs = json::object();
  json src = json::array();
  for (const auto& p : a.sources) src.push_back(input_record(p));
  inputs["sources"] = src;
  inputs["calib"] = input_record(a.calib);
  if (test) inputs["test"] = input_record(a.test);
  m["inputs"] = inputs;
  json outputs = json::array();
  for (std::size_t f = 0; f < plan.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "fold_%02zu.naln", f);
    outputs.push_back(name);
  }
  outputs.push_back("folds.json");
  if (test) outputs.push_back("test_predictions.csv");
  m["outputs"] = outputs;
  write_text((fs::path(a.out) / "manifest.json").string(), m.dump(2) + "\n");
  if (a.dry_run) {
    out << plan.size() << " folds planned; dry run, nothing trained\n";
    return;
  }

  CvOptions opt;
  opt.jobs = a.jobs;
  opt.checkpoint_dir = a.out;
  opt.test = test ? &*test : nullptr;
  const CvResult r = run_cv(sources, calib, plan, mc, tc, opt);

  write_text((fs::path(a.out) / "folds.json").string(), fold_results_json(r.folds));
  if (test) write_text((fs::path(a.out) / "test_predictions.csv").string(), predictions_csv(r.test_logits));
  for (const auto& f : r.folds) {
    char line[64];
    std::snprintf(line, sizeof line, "fold %zu uar=%.4f\n", f.fold, f.val_uar);
    out << line;
  }
  char line[64];
  std::snprintf(line, sizeof line, "mean uar=%.4f std=%.4f\n", r.mean_uar(), r.std_uar());
  out << line;
}

// ---- predict ----------------------------------------------------------------

struct PredictArgs {
  std::string models, data, out;
  bool three_class = false;
  int head = -1;
};

void cmd_predict(const PredictArgs& a, std::ostream& out) {
  if (!fs::is_directory(a.models)) throw DataError("model directory not found: " + a.models);
  std::vector<fs::path> paths;
  for (const auto& e : fs::directory_iterator(a.models)) {
    if (e.is_regular_file() && e.path().extension() == ".naln") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw DataError("no .naln checkpoints in " + a.models);
  const TrialSet data = read_eegt(a.data);
  const std::size_t head = a.head >= 0 ? static_cast<std::size_t>(a.head) : static_cast<std::size_t>(data.dataset_id);

  std::vector<Tensor> logits;
  json inputs = json::array();
  for (const auto& p : paths) {
    const Model model = Model::load(p);
    const auto& c = model.config();
    if (c.in_channels != data.n_channels() || c.in_samples != data.n_samples()) {
      throw DimensionError(p.filename().string() + " expects " + std::to_string(c.in_channels) + " channels x " +
                           std::to_string(c.in_samples) + " samples, found " + std::to_string(data.n_channels()) +
                           " x " + std::to_string(data.n_samples()));
    }
    if (head >= c.n_heads) {
      throw IndexError("head " + std::to_string(head) + " out of range for " + std::to_string(c.n_heads) + " heads");
    }
    logits.push_back(predict_subjects(model, data, head));
    inputs.push_back(input_record(p.string()));
  }
  Tensor ens = ensemble_logits(logits);
  if (a.three_class) ens = combine_four_to_three(ens);
  write_text(a.out, predictions_csv(ens));

  inputs.push_back(input_record(a.data));
  json m = manifest_base("predict");
  m["head"] = head;
  m["three_class"] = a.three_class;
  m["inputs"] = inputs;
  m["outputs"] = json::array({a.out});
  write_text(a.out + ".manifest.json", m.dump(2) + "\n");
  out << "wrote " << data.n_trials() << " predictions from " << paths.size() << " model(s) to " << a.out << "\n";
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string pred, data;
};

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  std::istringstream csv(read_text(a.pred));
  std::string header;
  if (!std::getline(csv, header)) throw DataError(a.pred + ": empty prediction file");
  const auto cols = split_csv(header);
  if (cols.size() < 3 || cols.front() != "trial_index" || cols.back() != "pred") {
    throw FormatError(a.pred + ": expected header trial_index,logit_*,pred");
  }
  const std::size_t n_logits = cols.size() - 2;
  std::vector<int> preds;
  std::string line;
  std::size_t row = 1;
  while (std::getline(csv, line)) {
    ++row;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != cols.size()) throw FormatError(a.pred + ": row " + std::to_string(row) + " has wrong column count");
    try {
      preds.push_back(std::stoi(f.back()));
    } catch (const std::logic_error&) {
      throw FormatError(a.pred + ": row " + std::to_string(row) + " has a bad pred value");
    }
  }
  TrialSet data = read_eegt(a.data);
  if (preds.size() != data.n_trials()) {
    throw DataError(a.pred + " has " + std::to_string(preds.size()) + " rows, data has " +
                    std::to_string(data.n_trials()) + " trials");
  }
  int n_classes = data.n_classes;
  std::vector<int> labels = data.labels;
  if (n_logits == 3 && n_classes == 4) {
    for (auto& y : labels) y = std::min(y, 2);
    n_classes = 3;
  }
  const auto recall = per_class_recall(preds, labels, n_classes);
  json j;
  j["uar"] = uar(preds, labels, n_classes);
  j["per_class_recall"] = recall;
  out << j.dump() << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Covariate-shift-aligned EEG decoding toolkit", "naln"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic covariate-shifted dataset");
  synth->add_option("--spec", sa.spec, "Synthetic spec JSON")->required();
  synth->add_option("--seed", sa.seed, "Generator seed");
  synth->add_option("--out", sa.out, "Output EEGT file")->required();

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Filter, resample and re-reference an EEGT file");
  pre->add_option("--in", pa.in, "Input EEGT file")->required();
  pre->add_option("--out", pa.out, "Output EEGT file")->required();
  pre->add_option("--channels", pa.channels, "Comma-separated channel names, or 'all'");
  pre->add_option("--resample", pa.resample, "Target sampling rate in Hz");
  pre->add_option("--highpass", pa.highpass, "Butterworth highpass cutoff in Hz");
  pre->add_option("--notch", pa.notch, "Comma-separated notch frequencies in Hz");
  pre->add_flag("--car", pa.car, "Common average reference");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Cross-validated training");
  train->add_option("--task", ta.task, "sleep or mi")->required();
  train->add_option("--source", ta.sources, "Source EEGT files");
  train->add_option("--calib", ta.calib, "Calibration EEGT file")->required();
  train->add_option("--fold-scheme", ta.fold_scheme, "loso2 or unstratified10");
  train->add_option("--seed", ta.seed, "Training seed");
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--config", ta.config, "JSON config with optional model, train and fold_scheme entries");
  train->add_option("--test", ta.test, "Unlabelled test EEGT file to predict with the fold ensemble");
  train->add_option("--jobs", ta.jobs, "Folds trained in parallel")->check(CLI::PositiveNumber);
  train->add_option("--epochs", ta.epochs, "Override the number of epochs");
  train->add_option("--lr", ta.lr, "Override the learning rate");
  train->add_flag("--no-align", ta.no_align, "Disable statistical alignment");
  train->add_flag("--no-deepset", ta.no_deepset, "Disable deep-set alignment");
  train->add_flag("--dry-run", ta.dry_run, "Resolve the configuration and write the manifest without training");

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Ensemble prediction with saved fold models");
  predict->add_option("--models", pr.models, "Directory of .naln checkpoints")->required();
  predict->add_option("--data", pr.data, "EEGT file")->required();
  predict->add_option("--out", pr.out, "Output CSV")->required();
  predict->add_flag("--three-class", pr.three_class, "Merge the last two of four classes");
  predict->add_option("--head", pr.head, "Output head (defaults to the data's dataset id)");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Score a prediction CSV");
  eval->add_option("--pred", ea.pred, "Prediction CSV")->required();
  eval->add_option("--data", ea.data, "Labelled EEGT file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* target = &app;
    for (const auto* sub : app.get_subcommands({})) {
      if (sub->parsed()) target = sub;
    }
    out << target->help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (synth->parsed()) cmd_synth(sa, out);
    else if (pre->parsed()) cmd_preprocess(pa, *pre, out);
    else if (train->parsed()) cmd_train(ta, *train, out);
    else if (predict->parsed()) cmd_predict(pr, out);
    else if (eval->parsed()) cmd_eval(ea, out);
    return 0;
  } catch (const TrainingError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 3;
  } catch (const ContractError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 3;
  } catch (const Error& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return 3;
  }
}

}  // namespace naln
