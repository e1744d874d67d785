// refexp: single entry point wiring synthesis, data handling, training,
// comprehension, generation, evaluation, and report rendering.
//
// Exit codes: 0 success; 1 internal error; 2 usage; 3 integrity/parse;
// 4 I/O; 5 domain/config. Failures print one line to stderr as
// "refexp: <category>: <message>".

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "CLI11.hpp"
#include "cli_support.hpp"
#include "json.hpp"
#include "refexp/errors.hpp"
#include "refexp/synth.hpp"

namespace refexp::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

/// Creates the parent directory of an output path and returns it (the
/// directory also receives config.resolved.json).
fs::path ensure_parent(const fs::path& out_path) {
  fs::path dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
  fs::create_directories(dir);
  return dir;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (const std::string& word : words) {
    if (!out.empty()) out += ' ';
    out += word;
  }
  return out;
}

// ---------------------------------------------------------------- data ----

struct DataValidateArgs {
  std::string annotations;
  std::string features;
  std::uint64_t seed = 1;
};

void run_data_validate(const DataValidateArgs& args) {
  Dataset dataset = load_dataset(args.annotations, args.features);
  std::printf("ok: scenes=%zu regions=%zu expressions=%zu feature_dim=%zu\n",
              dataset.scenes.size(), dataset.total_regions(), dataset.expressions.size(),
              dataset.feature_dim);
}

struct DataSplitArgs {
  std::string annotations;
  std::string features;
  std::string config_path;
  std::string mode;
  std::string out;
  double ratio = 0.0;
  int person_category = 0;
  double test_fraction = 0.0;
  std::uint64_t seed = 0;
  CLI::Option* mode_opt = nullptr;
  CLI::Option* ratio_opt = nullptr;
  CLI::Option* person_opt = nullptr;
  CLI::Option* fraction_opt = nullptr;
  CLI::Option* seed_opt = nullptr;
};

void run_data_split(const DataSplitArgs& args) {
  json file = load_config_file(args.config_path);
  Section section(file, "split");
  std::string mode = section.text("mode", "per-object");
  double ratio = section.number("ratio", 0.8);
  int person_category = static_cast<int>(section.id("person_category_id", 1));
  double test_fraction = section.number("test_fraction", 0.15);
  std::uint64_t seed = section.id("seed", 1);
  section.finish();
  if (args.mode_opt->count() > 0) mode = args.mode;
  if (args.ratio_opt->count() > 0) ratio = args.ratio;
  if (args.person_opt->count() > 0) person_category = args.person_category;
  if (args.fraction_opt->count() > 0) test_fraction = args.test_fraction;
  if (args.seed_opt->count() > 0) seed = args.seed;

  Dataset dataset = load_dataset(args.annotations, args.features);
  ordered_json out;
  if (mode == "per-object") {
    PerObjectSplit split = split_per_object(dataset, ratio, seed);
    out = ordered_json{{"mode", mode},
                       {"ratio", ratio},
                       {"seed", seed},
                       {"train_regions", split.train_regions},
                       {"test_regions", split.test_regions}};
    std::printf("split: train_regions=%zu test_regions=%zu\n", split.train_regions.size(),
                split.test_regions.size());
  } else if (mode == "people-vs-objects") {
    PeopleVsObjectsSplit split =
        split_people_vs_objects(dataset, person_category, test_fraction, seed);
    out = ordered_json{{"mode", mode},
                       {"person_category_id", person_category},
                       {"test_fraction", test_fraction},
                       {"seed", seed},
                       {"train_scenes", split.train_scenes},
                       {"test_people_scenes", split.test_people_scenes},
                       {"test_objects_scenes", split.test_objects_scenes}};
    std::printf("split: train_scenes=%zu testA_scenes=%zu testB_scenes=%zu\n",
                split.train_scenes.size(), split.test_people_scenes.size(),
                split.test_objects_scenes.size());
  } else {
    throw DomainError("unknown split mode '" + mode + "' (per-object|people-vs-objects)");
  }

  fs::path out_path(args.out);
  fs::path out_dir = ensure_parent(out_path);
  write_json(out_path, out);
  ordered_json resolved{{"command", "data split"},
                        {"inputs", {{"annotations", args.annotations}, {"features", args.features}}},
                        {"split", ordered_json(out)}};
  resolved["split"].erase("train_regions");
  resolved["split"].erase("test_regions");
  resolved["split"].erase("train_scenes");
  resolved["split"].erase("test_people_scenes");
  resolved["split"].erase("test_objects_scenes");
  write_resolved_config(out_dir, resolved);
}

void add_data(CLI::App& app) {
  CLI::App* data = app.add_subcommand("data", "validate datasets and build splits");
  data->require_subcommand(1);

  auto validate_args = std::make_shared<DataValidateArgs>();
  CLI::App* validate = data->add_subcommand("validate", "load a dataset and report its shape");
  validate->add_option("annotations", validate_args->annotations, "annotation JSON")->required();
  validate->add_option("features", validate_args->features, "binary feature file")->required();
  validate->add_option("--seed", validate_args->seed, "accepted for interface uniformity");
  validate->callback([validate_args]() { run_data_validate(*validate_args); });

  auto split_args = std::make_shared<DataSplitArgs>();
  CLI::App* split = data->add_subcommand("split", "partition a dataset for training");
  split->add_option("--annotations", split_args->annotations, "annotation JSON")->required();
  split->add_option("--features", split_args->features, "binary feature file")->required();
  split->add_option("--config", split_args->config_path, "sectioned JSON config");
  split_args->mode_opt = split->add_option("--mode", split_args->mode, "split mode")
                             ->check(CLI::IsMember({"per-object", "people-vs-objects"}));
  split_args->ratio_opt =
      split->add_option("--ratio", split_args->ratio, "train fraction (per-object)");
  split_args->person_opt = split->add_option("--person-category", split_args->person_category,
                                             "person category id (people-vs-objects)");
  split_args->fraction_opt = split->add_option("--test-fraction", split_args->test_fraction,
                                               "test share per eligible pool");
  split_args->seed_opt = split->add_option("--seed", split_args->seed, "shuffle seed");
  split->add_option("--out", split_args->out, "split JSON path")->required();
  split->callback([split_args]() { run_data_split(*split_args); });
}

// --------------------------------------------------------------- synth ----

struct SynthArgs {
  std::string config_path;
  std::string out_dir;
  SynthConfig flags;
  CLI::Option* num_scenes = nullptr;
  CLI::Option* min_objects = nullptr;
  CLI::Option* max_objects = nullptr;
  CLI::Option* num_categories = nullptr;
  CLI::Option* relative_fraction = nullptr;
  CLI::Option* noise_sigma = nullptr;
  CLI::Option* location_words = nullptr;
  CLI::Option* seed = nullptr;
};

ordered_json synth_config_json(const SynthConfig& config) {
  return ordered_json{{"num_scenes", config.num_scenes},
                      {"min_objects", config.min_objects},
                      {"max_objects", config.max_objects},
                      {"num_categories", config.num_categories},
                      {"relative_fraction", config.relative_fraction},
                      {"noise_sigma", config.noise_sigma},
                      {"allow_location_words", config.allow_location_words},
                      {"seed", config.seed}};
}

void run_synth(const SynthArgs& args) {
  json file = load_config_file(args.config_path);
  Section section(file, "synth");
  SynthConfig config;
  config.num_scenes = section.count("num_scenes", config.num_scenes);
  config.min_objects = section.count("min_objects", config.min_objects);
  config.max_objects = section.count("max_objects", config.max_objects);
  config.num_categories = section.count("num_categories", config.num_categories);
  config.relative_fraction = section.number("relative_fraction", config.relative_fraction);
  config.noise_sigma = section.number("noise_sigma", config.noise_sigma);
  config.allow_location_words = section.flag("allow_location_words", config.allow_location_words);
  config.seed = section.id("seed", config.seed);
  section.finish();
  if (args.num_scenes->count() > 0) config.num_scenes = args.flags.num_scenes;
  if (args.min_objects->count() > 0) config.min_objects = args.flags.min_objects;
  if (args.max_objects->count() > 0) config.max_objects = args.flags.max_objects;
  if (args.num_categories->count() > 0) config.num_categories = args.flags.num_categories;
  if (args.relative_fraction->count() > 0) config.relative_fraction = args.flags.relative_fraction;
  if (args.noise_sigma->count() > 0) config.noise_sigma = args.flags.noise_sigma;
  if (args.location_words->count() > 0)
    config.allow_location_words = args.flags.allow_location_words;
  if (args.seed->count() > 0) config.seed = args.flags.seed;

  SynthResult result = synthesize(config);
  write_synth(result, args.out_dir);
  write_resolved_config(args.out_dir, ordered_json{{"command", "synth"},
                                                   {"synth", synth_config_json(config)},
                                                   {"out_dir", args.out_dir}});
  std::printf("synth: scenes=%zu regions=%zu expressions=%zu -> %s\n",
              result.dataset.scenes.size(), result.dataset.total_regions(),
              result.dataset.expressions.size(), args.out_dir.c_str());
}

void add_synth(CLI::App& app) {
  auto args = std::make_shared<SynthArgs>();
  CLI::App* cmd = app.add_subcommand("synth", "generate a synthetic referring corpus");
  cmd->add_option("--config", args->config_path, "sectioned JSON config");
  cmd->add_option("--out-dir", args->out_dir, "output directory")->required();
  args->num_scenes = cmd->add_option("--num-scenes", args->flags.num_scenes, "scene count");
  args->min_objects = cmd->add_option("--min-objects", args->flags.min_objects, "objects >=");
  args->max_objects = cmd->add_option("--max-objects", args->flags.max_objects, "objects <=");
  args->num_categories =
      cmd->add_option("--num-categories", args->flags.num_categories, "category nouns used");
  args->relative_fraction = cmd->add_option("--relative-fraction", args->flags.relative_fraction,
                                            "share of comparison-only scenes");
  args->noise_sigma =
      cmd->add_option("--noise-sigma", args->flags.noise_sigma, "feature noise sigma");
  args->location_words = cmd->add_flag("--location-words,!--no-location-words",
                                       args->flags.allow_location_words,
                                       "allow spatial wording (off emulates the taboo rule)");
  args->seed = cmd->add_option("--seed", args->flags.seed, "generator seed");
  cmd->callback([args]() { run_synth(*args); });
}

// --------------------------------------------------------------- train ----

struct TrainArgs {
  std::string config_path;
  std::string annotations;
  std::string features;
  std::string out_dir;
  std::string split_file;
  std::string split_side;
  int min_count = 1;
  CLI::Option* min_count_opt = nullptr;
  FeatureFlags feature_flags;

  std::size_t word_dim = 0, visual_dim = 0, hidden_dim = 0, max_length = 0;
  CLI::Option *word_opt = nullptr, *visual_opt = nullptr, *hidden_opt = nullptr,
              *length_opt = nullptr;

  std::string objective;
  double mmi_weight = 0.0, learning_rate = 0.0, grad_clip_norm = 0.0, lr_decay = 0.0,
         validation_fraction = 0.0;
  bool tied = false;
  std::size_t epochs = 0, batch_scenes = 0, lr_decay_epochs = 0, max_negatives = 0;
  std::uint64_t seed = 0;
  CLI::Option *objective_opt = nullptr, *mmi_weight_opt = nullptr, *tied_opt = nullptr,
              *lr_opt = nullptr, *clip_opt = nullptr, *epochs_opt = nullptr,
              *batch_opt = nullptr, *seed_opt = nullptr, *decay_opt = nullptr,
              *decay_epochs_opt = nullptr, *val_opt = nullptr, *negatives_opt = nullptr;
};

int resolve_min_count(const json& file, const CLI::Option* opt, int flag_value) {
  Section section(file, "data");
  int min_count = static_cast<int>(section.id("min_count", 1));
  section.finish();
  if (opt->count() > 0) min_count = flag_value;
  if (min_count < 1) throw DomainError("min_count must be >= 1");
  return min_count;
}

ordered_json model_config_json(const ModelConfig& config) {
  return ordered_json{{"word_dim", config.word_dim},     {"visual_dim", config.visual_dim},
                      {"hidden_dim", config.hidden_dim}, {"vocab_size", config.vocab_size},
                      {"input_dim", config.input_dim},   {"max_length", config.max_length},
                      {"epsilon", config.epsilon}};
}

ordered_json train_config_json(const TrainConfig& config) {
  return ordered_json{{"objective", objective_name(config.objective)},
                      {"mmi_weight", config.mmi_weight},
                      {"tied", config.tied},
                      {"learning_rate", config.learning_rate},
                      {"grad_clip_norm", config.grad_clip_norm},
                      {"epochs", config.epochs},
                      {"batch_scenes", config.batch_scenes},
                      {"seed", config.seed},
                      {"lr_decay", config.lr_decay},
                      {"lr_decay_epochs", config.lr_decay_epochs},
                      {"validation_fraction", config.validation_fraction},
                      {"max_negatives", config.max_negatives}};
}

void run_train(const TrainArgs& args) {
  json file = load_config_file(args.config_path);
  int min_count = resolve_min_count(file, args.min_count_opt, args.min_count);
  FeatureConfig features = args.feature_flags.resolve(file);

  Section model_section(file, "model");
  ModelConfig model_config;
  model_config.word_dim = model_section.count("word_dim", model_config.word_dim);
  model_config.visual_dim = model_section.count("visual_dim", model_config.visual_dim);
  model_config.hidden_dim = model_section.count("hidden_dim", model_config.hidden_dim);
  model_config.max_length = model_section.count("max_length", model_config.max_length);
  model_config.epsilon = model_section.number("epsilon", model_config.epsilon);
  model_section.finish();
  if (args.word_opt->count() > 0) model_config.word_dim = args.word_dim;
  if (args.visual_opt->count() > 0) model_config.visual_dim = args.visual_dim;
  if (args.hidden_opt->count() > 0) model_config.hidden_dim = args.hidden_dim;
  if (args.length_opt->count() > 0) model_config.max_length = args.max_length;

  Section train_section(file, "train");
  TrainConfig train_config;
  train_config.objective =
      objective_from_name(train_section.text("objective", objective_name(train_config.objective)));
  train_config.mmi_weight = train_section.number("mmi_weight", train_config.mmi_weight);
  train_config.tied = train_section.flag("tied", train_config.tied);
  train_config.learning_rate = train_section.number("learning_rate", train_config.learning_rate);
  train_config.grad_clip_norm =
      train_section.number("grad_clip_norm", train_config.grad_clip_norm);
  train_config.epochs = train_section.count("epochs", train_config.epochs);
  train_config.batch_scenes = train_section.count("batch_scenes", train_config.batch_scenes);
  train_config.seed = train_section.id("seed", train_config.seed);
  train_config.lr_decay = train_section.number("lr_decay", train_config.lr_decay);
  train_config.lr_decay_epochs =
      train_section.count("lr_decay_epochs", train_config.lr_decay_epochs);
  train_config.validation_fraction =
      train_section.number("validation_fraction", train_config.validation_fraction);
  train_config.max_negatives = train_section.count("max_negatives", train_config.max_negatives);
  train_section.finish();
  if (args.objective_opt->count() > 0) train_config.objective = objective_from_name(args.objective);
  if (args.mmi_weight_opt->count() > 0) train_config.mmi_weight = args.mmi_weight;
  if (args.tied_opt->count() > 0) train_config.tied = args.tied;
  if (args.lr_opt->count() > 0) train_config.learning_rate = args.learning_rate;
  if (args.clip_opt->count() > 0) train_config.grad_clip_norm = args.grad_clip_norm;
  if (args.epochs_opt->count() > 0) train_config.epochs = args.epochs;
  if (args.batch_opt->count() > 0) train_config.batch_scenes = args.batch_scenes;
  if (args.seed_opt->count() > 0) train_config.seed = args.seed;
  if (args.decay_opt->count() > 0) train_config.lr_decay = args.lr_decay;
  if (args.decay_epochs_opt->count() > 0) train_config.lr_decay_epochs = args.lr_decay_epochs;
  if (args.val_opt->count() > 0) train_config.validation_fraction = args.validation_fraction;
  if (args.negatives_opt->count() > 0) train_config.max_negatives = args.max_negatives;
  train_config.validate();

  LoadedData data = load_and_encode(args.annotations, args.features, min_count);
  std::vector<std::uint64_t> filter;
  if (!args.split_file.empty()) {
    filter = load_split_side(data.dataset, args.split_file, args.split_side);
  }

  model_config.vocab_size = data.vocab.size();
  model_config.input_dim = bundle_dim(data.dataset.feature_dim, features);
  model_config.validate();
  SpeakerModel model(model_config);
  model.init_params(train_config.seed);
  model.set_vocab_hash(data.vocab.hash());

  fs::create_directories(args.out_dir);
  fs::path out(args.out_dir);
  TrainResult result = train(model, data.dataset, filter, features, train_config,
                             (out / "model.ckpt").string(), (out / "metrics.csv").string());

  write_json(out / "validation.json",
             ordered_json{{"validation_scenes", result.validation_scenes},
                          {"best_epoch", result.best_epoch},
                          {"best_val_accuracy", result.best_val_accuracy}});
  write_resolved_config(
      out, ordered_json{{"command", "train"},
                        {"inputs",
                         {{"annotations", args.annotations},
                          {"features", args.features},
                          {"split_file", args.split_file},
                          {"split_side", args.split_side}}},
                        {"data", {{"min_count", min_count}}},
                        {"model", model_config_json(model_config)},
                        {"features", FeatureFlags::to_json(features)},
                        {"train", train_config_json(train_config)},
                        {"out_dir", args.out_dir}});
  std::printf("train: epochs=%zu best_epoch=%zu best_val_accuracy=%.4f -> %s\n",
              result.epochs.size(), result.best_epoch, result.best_val_accuracy,
              (out / "model.ckpt").string().c_str());
}

void add_train(CLI::App& app) {
  auto args = std::make_shared<TrainArgs>();
  CLI::App* cmd = app.add_subcommand("train", "fit a speaker model");
  cmd->add_option("--config", args->config_path, "sectioned JSON config");
  cmd->add_option("--annotations", args->annotations, "annotation JSON")->required();
  cmd->add_option("--features", args->features, "binary feature file")->required();
  cmd->add_option("--out-dir", args->out_dir, "checkpoint/metrics directory")->required();
  cmd->add_option("--split-file", args->split_file, "split JSON limiting training regions");
  cmd->add_option("--split-side", args->split_side, "side of --split-file to train on")
      ->default_val("train");
  args->min_count_opt =
      cmd->add_option("--min-count", args->min_count, "vocabulary frequency threshold");
  args->feature_flags.attach(cmd);

  args->word_opt = cmd->add_option("--word-dim", args->word_dim, "word embedding width");
  args->visual_opt = cmd->add_option("--visual-dim", args->visual_dim, "projected visual width");
  args->hidden_opt = cmd->add_option("--hidden-dim", args->hidden_dim, "LSTM state width");
  args->length_opt =
      cmd->add_option("--model-max-length", args->max_length, "decode cap stored in the model");

  args->objective_opt = cmd->add_option("--objective", args->objective, "training objective")
                            ->check(CLI::IsMember({"mle", "mmi"}));
  args->mmi_weight_opt =
      cmd->add_option("--mmi-weight", args->mmi_weight, "lambda on the ratio terms");
  args->tied_opt = cmd->add_flag("--tied,!--untied", args->tied, "tie same-category decoding");
  args->lr_opt = cmd->add_option("--learning-rate", args->learning_rate, "SGD step size");
  args->clip_opt = cmd->add_option("--grad-clip-norm", args->grad_clip_norm, "gradient norm cap");
  args->epochs_opt = cmd->add_option("--epochs", args->epochs, "optimization epochs");
  args->batch_opt = cmd->add_option("--batch-scenes", args->batch_scenes, "scenes per batch");
  args->seed_opt = cmd->add_option("--seed", args->seed, "initialization/shuffle seed");
  args->decay_opt = cmd->add_option("--lr-decay", args->lr_decay, "step decay factor");
  args->decay_epochs_opt =
      cmd->add_option("--lr-decay-epochs", args->lr_decay_epochs, "epochs between decays");
  args->val_opt = cmd->add_option("--validation-fraction", args->validation_fraction,
                                  "held-out share of training scenes");
  args->negatives_opt =
      cmd->add_option("--max-negatives", args->max_negatives, "MMI candidate cap");
  cmd->callback([args]() { run_train(*args); });
}

// ---------------------------------------------------- comprehend / eval ----

struct ComprehendArgs {
  std::string checkpoint;
  std::string annotations;
  std::string features;
  std::string config_path;
  std::string candidates = "gt";
  std::string detection_features;
  std::string split_file;
  std::string split_side;
  std::string out;
  std::string label;
  int min_count = 1;
  std::size_t workers = 1;
  std::uint64_t seed = 1;
  CLI::Option* min_count_opt = nullptr;
  FeatureFlags feature_flags;
};

void run_comprehend(const ComprehendArgs& args) {
  json file = load_config_file(args.config_path);
  int min_count = resolve_min_count(file, args.min_count_opt, args.min_count);
  FeatureConfig features = args.feature_flags.resolve(file);

  LoadedData data = load_and_encode(args.annotations, args.features, min_count);
  SpeakerModel model = SpeakerModel::load(args.checkpoint);
  verify_vocab(model, data.vocab);

  std::vector<std::uint64_t> filter;
  if (!args.split_file.empty()) {
    filter = load_split_side(data.dataset, args.split_file, args.split_side);
  }

  DetectionSet detections;
  const DetectionSet* detections_ptr = nullptr;
  if (args.candidates != "gt") {
    if (args.detection_features.empty()) {
      throw DomainError("--candidates <detections.json> requires --detection-features");
    }
    detections = load_detections(args.candidates, args.detection_features);
    detections_ptr = &detections;
  }

  ComprehensionResult result =
      run_comprehension(data.dataset, filter, model, features, detections_ptr, args.workers);

  std::string label = args.label.empty() ? fs::path(args.out).stem().string() : args.label;
  fs::path out_dir = ensure_parent(args.out);
  write_json(fs::path(args.out),
             ordered_json{{"task", "comprehension"},
                          {"label", label},
                          {"metrics", comprehension_metrics_json(result)},
                          {"splits", ordered_json::object()}});
  write_resolved_config(
      out_dir, ordered_json{{"command", "comprehend"},
                            {"inputs",
                             {{"checkpoint", args.checkpoint},
                              {"annotations", args.annotations},
                              {"features", args.features},
                              {"candidates", args.candidates},
                              {"detection_features", args.detection_features},
                              {"split_file", args.split_file},
                              {"split_side", args.split_side}}},
                            {"data", {{"min_count", min_count}}},
                            {"features", FeatureFlags::to_json(features)},
                            {"workers", args.workers},
                            {"seed", args.seed},
                            {"out", args.out}});
  std::printf("comprehension: accuracy=%.4f (%zu/%zu) missing=%zu\n", result.accuracy(),
              result.correct, result.total, result.scenes_missing_detections);
}

void add_comprehend(CLI::App& app) {
  auto args = std::make_shared<ComprehendArgs>();
  CLI::App* cmd = app.add_subcommand("comprehend", "rank candidate regions for each expression");
  cmd->add_option("--checkpoint", args->checkpoint, "trained model checkpoint")->required();
  cmd->add_option("--annotations", args->annotations, "annotation JSON")->required();
  cmd->add_option("--features", args->features, "binary feature file")->required();
  cmd->add_option("--config", args->config_path, "sectioned JSON config");
  cmd->add_option("--candidates", args->candidates,
                  "gt for annotated regions, or a detections JSON path");
  cmd->add_option("--detection-features", args->detection_features,
                  "feature file keyed by detection ids");
  cmd->add_option("--split-file", args->split_file, "split JSON limiting evaluated regions");
  cmd->add_option("--split-side", args->split_side, "side of --split-file to evaluate")
      ->default_val("test");
  cmd->add_option("--out", args->out, "report JSON path")->required();
  cmd->add_option("--label", args->label, "report label (defaults to the output stem)");
  args->min_count_opt =
      cmd->add_option("--min-count", args->min_count, "vocabulary frequency threshold");
  cmd->add_option("--workers", args->workers, "scene-parallel evaluation threads")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));
  cmd->add_option("--seed", args->seed, "accepted for interface uniformity");
  args->feature_flags.attach(cmd);
  cmd->callback([args]() { run_comprehend(*args); });
}

// ------------------------------------------------------------ generate ----

struct GenerateArgs {
  std::string checkpoint;
  std::string annotations;
  std::string features;
  std::string config_path;
  std::string split_file;
  std::string split_side;
  std::string out;
  int min_count = 1;
  std::size_t workers = 1;
  std::uint64_t seed = 1;
  CLI::Option* min_count_opt = nullptr;
  FeatureFlags feature_flags;
  GenerationFlags generation_flags;
};

void run_generate(const GenerateArgs& args) {
  json file = load_config_file(args.config_path);
  int min_count = resolve_min_count(file, args.min_count_opt, args.min_count);
  FeatureConfig features = args.feature_flags.resolve(file);
  GenerationOptions options = args.generation_flags.resolve(file);

  LoadedData data = load_and_encode(args.annotations, args.features, min_count);
  SpeakerModel model = SpeakerModel::load(args.checkpoint);
  verify_vocab(model, data.vocab);

  std::vector<std::uint64_t> filter;
  if (!args.split_file.empty()) {
    filter = load_split_side(data.dataset, args.split_file, args.split_side);
  }

  std::vector<RegionGeneration> generations =
      run_generation(model, data.vocab, data.dataset, filter, features, options, args.workers);

  ordered_json rows = ordered_json::array();
  for (const RegionGeneration& gen : generations) {
    rows.push_back(ordered_json{{"region_id", gen.region_id},
                                {"words", gen.words},
                                {"raw", join_words(gen.words)},
                                {"token_ids", gen.token_ids},
                                {"logprob", gen.logprob}});
  }
  fs::path out_dir = ensure_parent(args.out);
  write_json(fs::path(args.out), ordered_json{{"generations", rows}});
  write_resolved_config(
      out_dir, ordered_json{{"command", "generate"},
                            {"inputs",
                             {{"checkpoint", args.checkpoint},
                              {"annotations", args.annotations},
                              {"features", args.features},
                              {"split_file", args.split_file},
                              {"split_side", args.split_side}}},
                            {"data", {{"min_count", min_count}}},
                            {"features", FeatureFlags::to_json(features)},
                            {"generation", GenerationFlags::to_json(options)},
                            {"workers", args.workers},
                            {"seed", args.seed},
                            {"out", args.out}});
  std::printf("generate: expressions=%zu -> %s\n", generations.size(), args.out.c_str());
}

void add_generate(CLI::App& app) {
  auto args = std::make_shared<GenerateArgs>();
  CLI::App* cmd = app.add_subcommand("generate", "decode one expression per region");
  cmd->add_option("--checkpoint", args->checkpoint, "trained model checkpoint")->required();
  cmd->add_option("--annotations", args->annotations, "annotation JSON")->required();
  cmd->add_option("--features", args->features, "binary feature file")->required();
  cmd->add_option("--config", args->config_path, "sectioned JSON config");
  cmd->add_option("--split-file", args->split_file, "split JSON limiting decoded regions");
  cmd->add_option("--split-side", args->split_side, "side of --split-file to decode")
      ->default_val("test");
  cmd->add_option("--out", args->out, "generations JSON path")->required();
  args->min_count_opt =
      cmd->add_option("--min-count", args->min_count, "vocabulary frequency threshold");
  cmd->add_option("--workers", args->workers, "scene-parallel decoding threads")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));
  cmd->add_option("--seed", args->seed, "accepted for interface uniformity");
  args->feature_flags.attach(cmd);
  args->generation_flags.attach(cmd);
  cmd->callback([args]() { run_generate(*args); });
}

// ---------------------------------------------------------------- eval ----

struct EvalArgs {
  std::string task;
  std::string checkpoint;
  std::string annotations;
  std::string features;
  std::string config_path;
  std::string generations_path;
  std::string split_file;
  std::vector<std::string> split_sides;
  std::string out;
  std::string label;
  int min_count = 1;
  std::size_t workers = 1;
  std::uint64_t seed = 1;
  CLI::Option* min_count_opt = nullptr;
  FeatureFlags feature_flags;
  GenerationFlags generation_flags;
};

std::vector<RegionGeneration> load_generations_file(const std::string& path) {
  json file = read_json(path);
  std::vector<RegionGeneration> generations;
  for (const auto& row : file.at("generations")) {
    RegionGeneration gen;
    gen.region_id = row.at("region_id").get<std::uint64_t>();
    gen.words = row.at("words").get<std::vector<std::string>>();
    if (row.contains("logprob")) gen.logprob = row.at("logprob").get<double>();
    generations.push_back(std::move(gen));
  }
  return generations;
}

void run_eval(const EvalArgs& args) {
  json file = load_config_file(args.config_path);
  int min_count = resolve_min_count(file, args.min_count_opt, args.min_count);
  FeatureConfig features = args.feature_flags.resolve(file);

  LoadedData data = load_and_encode(args.annotations, args.features, min_count);
  if (!args.split_sides.empty() && args.split_file.empty()) {
    throw DomainError("--split-sides requires --split-file");
  }

  // the overall section covers the union of the requested sides (everything
  // referred when no split is given)
  std::vector<std::pair<std::string, std::vector<std::uint64_t>>> sections;
  std::vector<std::uint64_t> overall;
  for (const std::string& side : args.split_sides) {
    auto regions = load_split_side(data.dataset, args.split_file, side);
    overall.insert(overall.end(), regions.begin(), regions.end());
    sections.emplace_back(side, std::move(regions));
  }

  ordered_json metrics;
  ordered_json splits = ordered_json::object();
  ordered_json generation_config;
  if (args.task == "comprehension") {
    if (args.checkpoint.empty()) throw DomainError("--task comprehension requires --checkpoint");
    SpeakerModel model = SpeakerModel::load(args.checkpoint);
    verify_vocab(model, data.vocab);
    metrics = comprehension_metrics_json(
        run_comprehension(data.dataset, overall, model, features, nullptr, args.workers));
    for (const auto& [side, regions] : sections) {
      splits[side] = comprehension_metrics_json(
          run_comprehension(data.dataset, regions, model, features, nullptr, args.workers));
    }
  } else {
    GenerationOptions options = args.generation_flags.resolve(file);
    generation_config = GenerationFlags::to_json(options);
    std::vector<RegionGeneration> generations;
    if (!args.generations_path.empty()) {
      generations = load_generations_file(args.generations_path);
    } else {
      if (args.checkpoint.empty()) {
        throw DomainError("--task generation requires --checkpoint or --generations");
      }
      SpeakerModel model = SpeakerModel::load(args.checkpoint);
      verify_vocab(model, data.vocab);
      generations = run_generation(model, data.vocab, data.dataset, overall, features, options,
                                   args.workers);
    }
    metrics = generation_metrics_json(evaluate_generation(data.dataset, generations));
    for (const auto& [side, regions] : sections) {
      std::unordered_set<std::uint64_t> members(regions.begin(), regions.end());
      std::vector<RegionGeneration> side_generations;
      for (const RegionGeneration& gen : generations) {
        if (members.count(gen.region_id) > 0) side_generations.push_back(gen);
      }
      splits[side] = generation_metrics_json(evaluate_generation(data.dataset, side_generations));
    }
  }

  std::string label = args.label.empty() ? fs::path(args.out).stem().string() : args.label;
  fs::path out_dir = ensure_parent(args.out);
  write_json(fs::path(args.out), ordered_json{{"task", args.task},
                                              {"label", label},
                                              {"metrics", metrics},
                                              {"splits", splits}});
  ordered_json resolved{{"command", "eval"},
                        {"task", args.task},
                        {"inputs",
                         {{"checkpoint", args.checkpoint},
                          {"annotations", args.annotations},
                          {"features", args.features},
                          {"generations", args.generations_path},
                          {"split_file", args.split_file},
                          {"split_sides", args.split_sides}}},
                        {"data", {{"min_count", min_count}}},
                        {"features", FeatureFlags::to_json(features)},
                        {"workers", args.workers},
                        {"seed", args.seed},
                        {"out", args.out}};
  if (!generation_config.is_null()) resolved["generation"] = generation_config;
  write_resolved_config(out_dir, resolved);
  std::printf("eval: task=%s label=%s -> %s\n", args.task.c_str(), label.c_str(),
              args.out.c_str());
}

void add_eval(CLI::App& app) {
  auto args = std::make_shared<EvalArgs>();
  CLI::App* cmd = app.add_subcommand("eval", "produce a metrics report");
  cmd->add_option("--task", args->task, "what to evaluate")
      ->required()
      ->check(CLI::IsMember({"generation", "comprehension"}));
  cmd->add_option("--checkpoint", args->checkpoint, "trained model checkpoint");
  cmd->add_option("--annotations", args->annotations, "annotation JSON")->required();
  cmd->add_option("--features", args->features, "binary feature file")->required();
  cmd->add_option("--config", args->config_path, "sectioned JSON config");
  cmd->add_option("--generations", args->generations_path,
                  "pre-decoded generations JSON (generation task)");
  cmd->add_option("--split-file", args->split_file, "split JSON for per-side breakdowns");
  cmd->add_option("--split-sides", args->split_sides, "comma-separated sides to break out")
      ->delimiter(',');
  cmd->add_option("--out", args->out, "report JSON path")->required();
  cmd->add_option("--label", args->label, "report label (defaults to the output stem)");
  args->min_count_opt =
      cmd->add_option("--min-count", args->min_count, "vocabulary frequency threshold");
  cmd->add_option("--workers", args->workers, "scene-parallel evaluation threads")
      ->check(CLI::Range(std::size_t{1}, std::size_t{256}));
  cmd->add_option("--seed", args->seed, "accepted for interface uniformity");
  args->feature_flags.attach(cmd);
  args->generation_flags.attach(cmd);
  cmd->callback([args]() { run_eval(*args); });
}

// -------------------------------------------------------------- report ----

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out_dir;
  std::uint64_t seed = 1;
};

struct ReportRow {
  std::string label;
  std::string task;
  std::string split;
  ordered_json metrics;
};

std::string format_metric(const json& value) {
  if (value.is_number_float()) {
    char buffer[32];
    std::snprintf(buffer, sizeof(buffer), "%.4f", value.get<double>());
    return buffer;
  }
  return value.dump();
}

/// Aligned text table: header then one line per row, columns padded to the
/// widest cell.
std::string render_table(const std::vector<std::string>& header,
                         const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) widths[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::string out;
  auto emit = [&](const std::vector<std::string>& cells) {
    out += "  ";
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out += cells[c];
      if (c + 1 < cells.size()) out += std::string(widths[c] - cells[c].size() + 2, ' ');
    }
    out += '\n';
  };
  emit(header);
  for (const auto& row : rows) emit(row);
  return out;
}

void run_report(const ReportArgs& args) {
  std::vector<ReportRow> rows;
  for (const std::string& input : args.inputs) {
    std::string label, path = input;
    if (auto eq = input.find('='); eq != std::string::npos) {
      label = input.substr(0, eq);
      path = input.substr(eq + 1);
    }
    json report = read_json(path);
    std::string task = report.at("task").get<std::string>();
    if (label.empty()) {
      label = report.contains("label") ? report.at("label").get<std::string>()
                                       : fs::path(path).stem().string();
    }
    rows.push_back({label, task, "overall", report.at("metrics")});
    if (report.contains("splits")) {
      for (const auto& [side, metrics] : report.at("splits").items()) {
        rows.push_back({label, task, side, metrics});
      }
    }
  }

  const std::vector<std::string> comprehension_columns = {"accuracy", "correct", "total",
                                                          "scenes_missing_detections"};
  const std::vector<std::string> generation_columns = {"bleu1", "bleu2", "rouge_l", "meteor",
                                                       "duplicate_rate"};
  std::string text;
  std::string csv = "label,task,split,metric,value\n";
  for (const std::string& task : {"comprehension", "generation"}) {
    const auto& columns = task == "comprehension" ? comprehension_columns : generation_columns;
    std::vector<std::vector<std::string>> table;
    for (const ReportRow& row : rows) {
      if (row.task != task) continue;
      std::vector<std::string> cells = {row.label, row.split};
      for (const std::string& column : columns) {
        cells.push_back(format_metric(row.metrics.at(column)));
        char value[64];
        std::snprintf(value, sizeof(value), "%.10g", row.metrics.at(column).get<double>());
        csv += row.label + "," + task + "," + row.split + "," + column + "," + value + "\n";
      }
      table.push_back(std::move(cells));
    }
    if (table.empty()) continue;
    std::vector<std::string> header = {"label", "split"};
    header.insert(header.end(), columns.begin(), columns.end());
    text += task + "\n" + render_table(header, table) + "\n";
  }
  if (text.empty()) throw DomainError("no report sections found in the given inputs");

  fs::create_directories(args.out_dir);
  fs::path out(args.out_dir);
  for (const auto& [name, payload] :
       {std::pair<std::string, const std::string*>{"report.txt", &text},
        std::pair<std::string, const std::string*>{"report.csv", &csv}}) {
    std::ofstream stream(out / name, std::ios::binary);
    if (!stream) throw IoError("cannot write " + (out / name).string());
    stream << *payload;
  }
  write_resolved_config(out, ordered_json{{"command", "report"},
                                          {"inputs", args.inputs},
                                          {"seed", args.seed},
                                          {"out_dir", args.out_dir}});
  std::fputs(text.c_str(), stdout);
}

void add_report(CLI::App& app) {
  auto args = std::make_shared<ReportArgs>();
  CLI::App* cmd = app.add_subcommand("report", "render eval reports as tables and CSV");
  cmd->add_option("--input", args->inputs, "eval report JSON, optionally label=path")
      ->required()
      ->take_all();
  cmd->add_option("--out-dir", args->out_dir, "directory for report.txt/report.csv")->required();
  cmd->add_option("--seed", args->seed, "accepted for interface uniformity");
  cmd->callback([args]() { run_report(*args); });
}

int exit_code_for(const std::string& category) {
  if (category == "parse" || category == "missing-feature") return 3;
  if (category.size() >= 10 && category.ends_with("-integrity")) return 3;
  if (category == "io") return 4;
  return 5;  // domain, dimension, index, numeric
}

}  // namespace
}  // namespace refexp::cli

int main(int argc, char** argv) {
  CLI::App app{"referring-expression pipeline: synthesize, train, comprehend, generate, report"};
  app.require_subcommand(1);
  refexp::cli::add_data(app);
  refexp::cli::add_synth(app);
  refexp::cli::add_train(app);
  refexp::cli::add_comprehend(app);
  refexp::cli::add_generate(app);
  refexp::cli::add_eval(app);
  refexp::cli::add_report(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "refexp: usage: " << e.what() << "\n";
    return 2;
  } catch (const refexp::Error& e) {
    std::cerr << "refexp: " << e.what() << "\n";
    return refexp::cli::exit_code_for(e.category());
  } catch (const std::exception& e) {
    std::cerr << "refexp: internal: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
