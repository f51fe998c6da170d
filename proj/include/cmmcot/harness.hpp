#pragma once

// Experiment runner: greedy evaluation on synthetic task families, the
// RIFREM layer-placement ablation with per-token latency, and CSV reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/datagen.hpp"
#include "cmmcot/engine.hpp"

namespace cmmcot {

enum class EvalFamily : std::uint8_t { CrossImageMatch, Counting, Comparison };

inline constexpr std::array<EvalFamily, 3> kEvalFamilies = {EvalFamily::CrossImageMatch, EvalFamily::Counting,
                                                            EvalFamily::Comparison};

/// "cross-image-match", "counting", "comparison".
std::string_view to_string(EvalFamily f);
EvalFamily eval_family_from_string(std::string_view name);
TaskType task_for(EvalFamily f);

struct EvalTask {
  EvalFamily family = EvalFamily::CrossImageMatch;
  std::size_t count = 100;
  std::uint64_t seed = 0;
  SceneOptions scenes;
};

void to_json(nlohmann::json& j, const EvalTask& t);
void from_json(const nlohmann::json& j, EvalTask& t);

/// Every answer an instance of the family can have.
std::vector<std::string> answer_choices(EvalFamily family, const SceneOptions& scenes = {});

std::vector<TaskInstance> eval_instances(const EvalTask& task);

struct EvalOptions {
  RifremConfig rifrem;
  int step_budget = kDefaultStepBudget;
  int min_side = kDefaultMinSide;
  bool suppress_trigger = false;
  bool keep_transcripts = false;
};

struct EvalItem {
  std::string id;
  std::string gold;
  std::string predicted;
  bool correct = false;
  std::string error;  // set when generation threw
  nlohmann::json transcript;
};

struct EvalResult {
  EvalFamily family = EvalFamily::CrossImageMatch;
  std::uint64_t seed = 0;
  bool rifrem = true;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;
  std::vector<EvalItem> items;
};

/// Makes the picker for one instance; greedy when unset.
using PickerFactory = std::function<std::unique_ptr<TokenPicker>(const TaskInstance&)>;

/// Generates a chain per instance and scores the extracted answer by exact
/// match. A generation that throws counts as incorrect.
EvalResult evaluate(const Weights<float>& weights, const Vocabulary& vocab, const EvalTask& task,
                    const EvalOptions& options, const PickerFactory& pickers = {});

// ---------------------------------------------------------------------------
// Ablation

/// The tokens a scripted picker must emit to reproduce `chain`: the crop
/// placeholders and vision end that the session feeds itself are dropped.
std::vector<TokenId> picker_script(const InterleavedSequence& chain, const Vocabulary& vocab);

struct WorkloadItem {
  std::vector<Image> images;
  std::string question;
  std::vector<TokenId> script;
};

struct WorkloadSpec {
  std::size_t items = 4;
  std::size_t groundings = 3;  // per item
  int image_size = 64;
  std::uint64_t seed = 0;
};

/// Scripted chains that ground and crop the whole of image 0 repeatedly, so
/// crop tokens dominate the decode.
std::vector<WorkloadItem> grounding_workload(const WorkloadSpec& spec, const Vocabulary& vocab);

struct AblationOptions {
  /// 1..5 are the placement groups; 0 runs with RIFREM disabled.
  std::vector<int> groups = {1, 2, 3, 4, 5};
  int repeats = 5;
  int warmup_tokens = 32;
  int min_tokens = 256;
  std::uint64_t seed = 0;
  int min_side = kDefaultMinSide;
  /// Accuracy per (group, repeat) with the task seed set to the row seed.
  std::optional<EvalTask> accuracy_task;
};

struct AblationRow {
  int group = 0;
  int active_layers = 0;
  int repeat = 0;
  std::uint64_t seed = 0;
  double latency_ms = 0.0;  // mean wall-clock per picked token after warmup
  std::size_t tokens = 0;   // picked tokens measured
  std::optional<double> accuracy;
  friend bool operator==(const AblationRow&, const AblationRow&) = default;
};

struct GroupSummary {
  int group = 0;
  int active_layers = 0;
  double median_latency_ms = 0.0;
  std::optional<double> mean_accuracy;
};

struct AblationReport {
  std::vector<AblationRow> rows;  // group-major, then repeat
  std::vector<std::string> warnings;

  std::vector<GroupSummary> summary() const;
};

/// Runs the workload once per repeat for every group, with the groups'
/// sessions stepped in lockstep. Throws std::invalid_argument for zero repeats, an empty
/// workload, a group outside 0..5 or fewer than min_tokens measured tokens.
AblationReport run_ablation(const Weights<float>& weights, const Vocabulary& vocab,
                            const std::vector<WorkloadItem>& workload, const AblationOptions& options);

RifremConfig group_config(int group, int layers, std::string* warning = nullptr);

// ---------------------------------------------------------------------------
// Reports

/// group,active_layers,repeat,seed,latency_ms,tokens,accuracy (empty when
/// not measured).
void write_ablation_csv(const AblationReport& report, const std::filesystem::path& path);
AblationReport read_ablation_csv(const std::filesystem::path& path);

/// family,rifrem,seed,total,correct,accuracy
void write_eval_csv(const std::vector<EvalResult>& results, const std::filesystem::path& path);
std::vector<EvalResult> read_eval_csv(const std::filesystem::path& path);

}  // namespace cmmcot
