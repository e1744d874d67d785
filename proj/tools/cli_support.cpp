#include "cli_support.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <thread>
#include <unordered_set>

#include "refexp/errors.hpp"

namespace refexp::cli {

namespace {

const std::set<std::string>& known_sections() {
  static const std::set<std::string> sections = {"synth",    "data",  "split", "model",
                                                 "features", "train", "generation"};
  return sections;
}

}  // namespace

nlohmann::json load_config_file(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  nlohmann::json file;
  try {
    in >> file;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("config file " + path + ": " + e.what());
  }
  if (!file.is_object()) throw DomainError("config file " + path + " must hold a JSON object");
  for (const auto& [key, value] : file.items()) {
    if (known_sections().find(key) == known_sections().end()) {
      throw DomainError("config file " + path + ": unknown section '" + key + "'");
    }
    if (!value.is_object()) {
      throw DomainError("config section '" + key + "' must be a JSON object");
    }
  }
  return file;
}

Section::Section(const nlohmann::json& file, std::string name) : name_(std::move(name)) {
  auto it = file.find(name_);
  object_ = it == file.end() ? nlohmann::json::object() : *it;
}

const nlohmann::json* Section::pick(const std::string& key) {
  consumed_.insert(key);
  auto it = object_.find(key);
  return it == object_.end() ? nullptr : &*it;
}

double Section::number(const std::string& key, double fallback) {
  const nlohmann::json* value = pick(key);
  if (value == nullptr) return fallback;
  if (!value->is_number()) throw DomainError(name_ + "." + key + " must be a number");
  return value->get<double>();
}

std::size_t Section::count(const std::string& key, std::size_t fallback) {
  const nlohmann::json* value = pick(key);
  if (value == nullptr) return fallback;
  if (!value->is_number_unsigned()) {
    throw DomainError(name_ + "." + key + " must be a non-negative integer");
  }
  return value->get<std::size_t>();
}

std::uint64_t Section::id(const std::string& key, std::uint64_t fallback) {
  const nlohmann::json* value = pick(key);
  if (value == nullptr) return fallback;
  if (!value->is_number_unsigned()) {
    throw DomainError(name_ + "." + key + " must be a non-negative integer");
  }
  return value->get<std::uint64_t>();
}

bool Section::flag(const std::string& key, bool fallback) {
  const nlohmann::json* value = pick(key);
  if (value == nullptr) return fallback;
  if (!value->is_boolean()) throw DomainError(name_ + "." + key + " must be a boolean");
  return value->get<bool>();
}

std::string Section::text(const std::string& key, const std::string& fallback) {
  const nlohmann::json* value = pick(key);
  if (value == nullptr) return fallback;
  if (!value->is_string()) throw DomainError(name_ + "." + key + " must be a string");
  return value->get<std::string>();
}

void Section::finish() const {
  for (const auto& [key, value] : object_.items()) {
    if (consumed_.find(key) == consumed_.end()) {
      throw DomainError("config section '" + name_ + "' has unknown key '" + key + "'");
    }
  }
}

void write_resolved_config(const std::filesystem::path& dir,
                           const nlohmann::ordered_json& resolved) {
  std::filesystem::create_directories(dir);
  write_json(dir / "config.resolved.json", resolved);
}

void FeatureFlags::attach(CLI::App* cmd) {
  comparison_set_opt_ =
      cmd->add_option("--comparison-set", comparison_set_,
                      "regions compared for dv: same_category|different_category|all_objects");
  pooling_opt_ = cmd->add_option("--pooling", pooling_, "dv pooling: min|max|avg");
  context_opt_ = cmd->add_option("--context", context_,
                                 "scene context source: none|global|scale2|scale3|scale4");
  neighbors_opt_ = cmd->add_option("--max-location-neighbors", max_location_neighbors_,
                                   "nearest same-category neighbors in dl");
  epsilon_opt_ = cmd->add_option("--feature-epsilon", epsilon_,
                                 "difference-normalization guard");
  visual_opt_ = cmd->add_flag("--visual-difference,!--no-visual-difference",
                              use_visual_difference_, "include the dv block");
  location_opt_ = cmd->add_flag("--location-difference,!--no-location-difference",
                                use_location_difference_, "include the dl block");
}

FeatureConfig FeatureFlags::resolve(const nlohmann::json& file) const {
  Section section(file, "features");
  FeatureConfig config;
  config.comparison.comparison_set = comparison_set_from_name(
      section.text("comparison_set", comparison_set_name(config.comparison.comparison_set)));
  config.comparison.pooling =
      pooling_from_name(section.text("pooling", pooling_name(config.comparison.pooling)));
  config.context =
      context_choice_from_name(section.text("context", context_choice_name(config.context)));
  config.comparison.max_location_neighbors = static_cast<int>(section.count(
      "max_location_neighbors", static_cast<std::size_t>(config.comparison.max_location_neighbors)));
  config.comparison.epsilon = section.number("epsilon", config.comparison.epsilon);
  config.use_visual_difference =
      section.flag("use_visual_difference", config.use_visual_difference);
  config.use_location_difference =
      section.flag("use_location_difference", config.use_location_difference);
  section.finish();

  if (comparison_set_opt_->count() > 0) {
    config.comparison.comparison_set = comparison_set_from_name(comparison_set_);
  }
  if (pooling_opt_->count() > 0) config.comparison.pooling = pooling_from_name(pooling_);
  if (context_opt_->count() > 0) config.context = context_choice_from_name(context_);
  if (neighbors_opt_->count() > 0) {
    config.comparison.max_location_neighbors = static_cast<int>(max_location_neighbors_);
  }
  if (epsilon_opt_->count() > 0) config.comparison.epsilon = epsilon_;
  if (visual_opt_->count() > 0) config.use_visual_difference = use_visual_difference_;
  if (location_opt_->count() > 0) config.use_location_difference = use_location_difference_;
  config.comparison.validate();
  return config;
}

nlohmann::ordered_json FeatureFlags::to_json(const FeatureConfig& config) {
  return nlohmann::ordered_json{
      {"comparison_set", comparison_set_name(config.comparison.comparison_set)},
      {"pooling", pooling_name(config.comparison.pooling)},
      {"context", context_choice_name(config.context)},
      {"max_location_neighbors", config.comparison.max_location_neighbors},
      {"epsilon", config.comparison.epsilon},
      {"use_visual_difference", config.use_visual_difference},
      {"use_location_difference", config.use_location_difference},
  };
}

void GenerationFlags::attach(CLI::App* cmd) {
  tied_opt_ = cmd->add_flag("--tied,!--untied", tied_, "decode same-category groups jointly");
  beam_opt_ = cmd->add_option("--beam-width", beam_width_, "beam width; 1 = greedy");
  length_opt_ = cmd->add_option("--decode-max-length", max_length_, "decode cap, END included");
}

GenerationOptions GenerationFlags::resolve(const nlohmann::json& file) const {
  Section section(file, "generation");
  GenerationOptions options;
  options.tied = section.flag("tied", options.tied);
  options.beam_width = section.count("beam_width", options.beam_width);
  options.max_length = section.count("max_length", options.max_length);
  section.finish();

  if (tied_opt_->count() > 0) options.tied = tied_;
  if (beam_opt_->count() > 0) options.beam_width = beam_width_;
  if (length_opt_->count() > 0) options.max_length = max_length_;
  if (options.beam_width == 0) throw DomainError("beam width must be >= 1");
  if (options.max_length == 0) throw DomainError("decode max length must be >= 1");
  return options;
}

nlohmann::ordered_json GenerationFlags::to_json(const GenerationOptions& options) {
  return nlohmann::ordered_json{{"tied", options.tied},
                                {"beam_width", options.beam_width},
                                {"max_length", options.max_length}};
}

LoadedData load_and_encode(const std::string& annotation_path, const std::string& feature_path,
                           int min_count) {
  LoadedData data;
  data.dataset = load_dataset(annotation_path, feature_path);
  data.vocab = build_vocabulary(data.dataset.expressions, min_count);
  encode_expressions(data.dataset, data.vocab);
  return data;
}

void verify_vocab(const SpeakerModel& model, const Vocabulary& vocab) {
  if (model.vocab_hash() != vocab.hash()) {
    throw IntegrityError("model-integrity",
                         "checkpoint vocabulary hash does not match the dataset vocabulary; "
                         "check --min-count and the annotation file");
  }
}

std::vector<std::uint64_t> referred_regions(const Dataset& dataset) {
  std::vector<std::uint64_t> out;
  for (const Scene& scene : dataset.scenes) {
    for (const ObjectRegion& region : scene.regions) {
      if (!dataset.expressions_of(region.region_id).empty()) out.push_back(region.region_id);
    }
  }
  return out;
}

std::vector<std::uint64_t> load_split_side(const Dataset& dataset, const std::string& path,
                                           const std::string& side) {
  nlohmann::json file = read_json(path);
  // region-valued and scene-valued key per side name
  std::string region_key, scene_key;
  if (side == "train") {
    region_key = "train_regions";
    scene_key = "train_scenes";
  } else if (side == "test") {
    region_key = "test_regions";
  } else if (side == "testA") {
    scene_key = "test_people_scenes";
  } else if (side == "testB") {
    scene_key = "test_objects_scenes";
  } else if (side == "val") {
    scene_key = "validation_scenes";
  } else {
    throw DomainError("unknown split side '" + side + "' (train|test|testA|testB|val)");
  }

  auto ids_of = [&](const std::string& key) {
    std::vector<std::uint64_t> ids;
    for (const auto& value : file.at(key)) ids.push_back(value.get<std::uint64_t>());
    return ids;
  };
  if (!region_key.empty() && file.contains(region_key)) return ids_of(region_key);
  if (!scene_key.empty() && file.contains(scene_key)) {
    std::unordered_set<std::uint64_t> scenes;
    for (std::uint64_t id : ids_of(scene_key)) scenes.insert(id);
    std::vector<std::uint64_t> regions;
    for (std::uint64_t id : referred_regions(dataset)) {
      if (scenes.count(dataset.region_by_id(id).scene_id) > 0) regions.push_back(id);
    }
    return regions;
  }
  throw IntegrityError("split-integrity",
                       "split file " + path + " has no side '" + side + "'");
}

namespace {

/// Scene-aligned contiguous chunks of a region list, in dataset order.
std::vector<std::vector<std::uint64_t>> scene_chunks(const Dataset& dataset,
                                                     const std::vector<std::uint64_t>& regions,
                                                     std::size_t workers) {
  std::unordered_set<std::uint64_t> wanted(regions.begin(), regions.end());
  std::vector<std::vector<std::uint64_t>> by_scene;
  for (const Scene& scene : dataset.scenes) {
    std::vector<std::uint64_t> ids;
    for (const ObjectRegion& region : scene.regions) {
      if (wanted.count(region.region_id) > 0) ids.push_back(region.region_id);
    }
    if (!ids.empty()) by_scene.push_back(std::move(ids));
  }

  std::size_t chunk_count = std::min(workers, std::max<std::size_t>(by_scene.size(), 1));
  std::vector<std::vector<std::uint64_t>> chunks(chunk_count);
  std::size_t per_chunk = (by_scene.size() + chunk_count - 1) / chunk_count;
  for (std::size_t s = 0; s < by_scene.size(); ++s) {
    auto& chunk = chunks[s / per_chunk];
    chunk.insert(chunk.end(), by_scene[s].begin(), by_scene[s].end());
  }
  return chunks;
}

/// Runs `work(chunk_index)` on one thread per chunk and rethrows the first
/// failure after joining.
void run_chunks(std::size_t chunk_count, const std::function<void(std::size_t)>& work) {
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> failures(chunk_count);
  for (std::size_t c = 0; c < chunk_count; ++c) {
    threads.emplace_back([&, c]() {
      try {
        work(c);
      } catch (...) {
        failures[c] = std::current_exception();
      }
    });
  }
  for (auto& thread : threads) thread.join();
  for (const auto& failure : failures) {
    if (failure) std::rethrow_exception(failure);
  }
}

}  // namespace

ComprehensionResult run_comprehension(const Dataset& dataset,
                                      const std::vector<std::uint64_t>& regions,
                                      const SpeakerModel& model, const FeatureConfig& features,
                                      const DetectionSet* detections, std::size_t workers) {
  if (workers <= 1) {
    SpeakerModel local = model;
    return evaluate_comprehension(dataset, regions, model_scorer(local, features), detections);
  }
  const std::vector<std::uint64_t>& all =
      regions.empty() ? referred_regions(dataset) : regions;
  auto chunks = scene_chunks(dataset, all, workers);
  std::vector<SpeakerModel> models(chunks.size(), model);
  std::vector<ComprehensionResult> results(chunks.size());
  run_chunks(chunks.size(), [&](std::size_t c) {
    results[c] = evaluate_comprehension(dataset, chunks[c], model_scorer(models[c], features),
                                        detections);
  });
  ComprehensionResult total;
  for (const ComprehensionResult& part : results) {
    total.total += part.total;
    total.correct += part.correct;
    total.scenes_missing_detections += part.scenes_missing_detections;
  }
  return total;
}

std::vector<RegionGeneration> run_generation(const SpeakerModel& model, const Vocabulary& vocab,
                                             const Dataset& dataset,
                                             const std::vector<std::uint64_t>& regions,
                                             const FeatureConfig& features,
                                             const GenerationOptions& options,
                                             std::size_t workers) {
  if (workers <= 1) {
    SpeakerModel local = model;
    return generate_for_dataset(local, vocab, dataset, regions, features, options);
  }
  const std::vector<std::uint64_t>& all =
      regions.empty() ? referred_regions(dataset) : regions;
  auto chunks = scene_chunks(dataset, all, workers);
  std::vector<SpeakerModel> models(chunks.size(), model);
  std::vector<std::vector<RegionGeneration>> results(chunks.size());
  run_chunks(chunks.size(), [&](std::size_t c) {
    results[c] = generate_for_dataset(models[c], vocab, dataset, chunks[c], features, options);
  });
  std::vector<RegionGeneration> merged;
  for (auto& part : results) {
    merged.insert(merged.end(), std::make_move_iterator(part.begin()),
                  std::make_move_iterator(part.end()));
  }
  return merged;
}

nlohmann::ordered_json comprehension_metrics_json(const ComprehensionResult& result) {
  return nlohmann::ordered_json{
      {"accuracy", result.accuracy()},
      {"correct", result.correct},
      {"total", result.total},
      {"scenes_missing_detections", result.scenes_missing_detections},
  };
}

nlohmann::ordered_json generation_metrics_json(const GenerationMetrics& metrics) {
  return nlohmann::ordered_json{
      {"bleu1", metrics.bleu1},
      {"bleu2", metrics.bleu2},
      {"rouge_l", metrics.rouge_l},
      {"meteor", metrics.meteor},
      {"duplicate_rate", metrics.duplicate_rate},
      {"expressions", metrics.expressions},
      {"duplicate_scenes", metrics.duplicate_scenes},
  };
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& document) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << document.dump(2) << "\n";
  if (!out) throw IoError("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    nlohmann::json document;
    in >> document;
    return document;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace refexp::cli
