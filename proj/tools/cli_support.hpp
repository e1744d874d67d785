#pragma once

// Shared plumbing for the refexp tool: sectioned JSON config files with
// CLI-over-file-over-defaults precedence, split-file expansion, eval-report
// schema helpers, and deterministic scene-parallel evaluation.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "refexp/comprehension.hpp"
#include "refexp/dataset.hpp"
#include "refexp/features.hpp"
#include "refexp/metrics.hpp"
#include "refexp/speaker.hpp"
#include "refexp/training.hpp"

namespace refexp::cli {

/// Parses the sectioned config file ({} when `path` is empty). Top-level
/// keys are restricted to the known section names so typos fail loudly.
nlohmann::json load_config_file(const std::string& path);

/// Strict typed reader over one config section. finish() rejects any key
/// the owning command did not consume.
class Section {
 public:
  Section(const nlohmann::json& file, std::string name);

  double number(const std::string& key, double fallback);
  std::size_t count(const std::string& key, std::size_t fallback);
  std::uint64_t id(const std::string& key, std::uint64_t fallback);
  bool flag(const std::string& key, bool fallback);
  std::string text(const std::string& key, const std::string& fallback);
  void finish() const;

 private:
  const nlohmann::json* pick(const std::string& key);

  std::string name_;
  nlohmann::json object_;
  std::set<std::string> consumed_;
};

/// Writes `resolved` as config.resolved.json under `dir` (2-space indent,
/// insertion key order, trailing newline). Creates the directory.
void write_resolved_config(const std::filesystem::path& dir,
                           const nlohmann::ordered_json& resolved);

/// The feature-bundle options shared by train/comprehend/generate/eval.
/// attach() registers the flags; resolve() applies precedence over the
/// "features" config section.
class FeatureFlags {
 public:
  void attach(CLI::App* cmd);
  FeatureConfig resolve(const nlohmann::json& file) const;
  static nlohmann::ordered_json to_json(const FeatureConfig& config);

 private:
  std::string comparison_set_;
  std::string pooling_;
  std::string context_;
  std::size_t max_location_neighbors_ = 0;
  double epsilon_ = 0.0;
  bool use_visual_difference_ = true;
  bool use_location_difference_ = true;
  CLI::Option* comparison_set_opt_ = nullptr;
  CLI::Option* pooling_opt_ = nullptr;
  CLI::Option* context_opt_ = nullptr;
  CLI::Option* neighbors_opt_ = nullptr;
  CLI::Option* epsilon_opt_ = nullptr;
  CLI::Option* visual_opt_ = nullptr;
  CLI::Option* location_opt_ = nullptr;
};

/// Decode options for generate/eval, over the "generation" config section.
class GenerationFlags {
 public:
  void attach(CLI::App* cmd);
  GenerationOptions resolve(const nlohmann::json& file) const;
  static nlohmann::ordered_json to_json(const GenerationOptions& options);

 private:
  bool tied_ = true;
  std::size_t beam_width_ = 0;
  std::size_t max_length_ = 0;
  CLI::Option* tied_opt_ = nullptr;
  CLI::Option* beam_opt_ = nullptr;
  CLI::Option* length_opt_ = nullptr;
};

/// Dataset + vocabulary in the state every model command needs: features
/// attached, expressions encoded, and (when a checkpoint is supplied) the
/// stored vocabulary hash verified.
struct LoadedData {
  Dataset dataset;
  Vocabulary vocab;
};

LoadedData load_and_encode(const std::string& annotation_path, const std::string& feature_path,
                           int min_count);

/// Throws model-integrity when the checkpoint was trained against a
/// different vocabulary than the dataset yields.
void verify_vocab(const SpeakerModel& model, const Vocabulary& vocab);

/// Region ids for one side of a split file. Region-valued sides pass
/// through; scene-valued sides expand to their referred regions in dataset
/// order. Known sides: train, test, testA, testB, val.
std::vector<std::uint64_t> load_split_side(const Dataset& dataset, const std::string& path,
                                           const std::string& side);

/// All referred regions in dataset order (scene order, region order within).
std::vector<std::uint64_t> referred_regions(const Dataset& dataset);

/// evaluate_comprehension over scene-aligned chunks on per-thread model
/// copies; totals are identical to the single-worker call for any worker
/// count.
ComprehensionResult run_comprehension(const Dataset& dataset,
                                      const std::vector<std::uint64_t>& regions,
                                      const SpeakerModel& model, const FeatureConfig& features,
                                      const DetectionSet* detections, std::size_t workers);

/// generate_for_dataset with the same scene-aligned parallelism; output
/// order (scene order, then region order) is worker-count invariant.
std::vector<RegionGeneration> run_generation(const SpeakerModel& model, const Vocabulary& vocab,
                                             const Dataset& dataset,
                                             const std::vector<std::uint64_t>& regions,
                                             const FeatureConfig& features,
                                             const GenerationOptions& options,
                                             std::size_t workers);

/// Eval-report schema shared by `eval` (writer) and `report` (reader):
/// {"task", "label", "metrics": {name: value}, "splits": {side: {...}}}.
nlohmann::ordered_json comprehension_metrics_json(const ComprehensionResult& result);
nlohmann::ordered_json generation_metrics_json(const GenerationMetrics& metrics);

/// Writes `document` as pretty JSON with a trailing newline.
void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& document);

/// Reads a JSON document, mapping parse failures to ParseError.
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace refexp::cli
