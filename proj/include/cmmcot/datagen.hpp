#pragma once

// Corpus construction over synthetic scenes: rationale generation with an
// answer-correctness filter and one gold-guided retry, entity extraction,
// detection validated by IoU, box fusion and grounding insertion.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/grammar.hpp"
#include "cmmcot/image.hpp"

namespace cmmcot {

enum class TaskType : std::uint8_t { Caption, CoReference, Comparison, Reason };

inline constexpr std::array<TaskType, 4> kTaskTypes = {TaskType::Caption, TaskType::CoReference,
                                                       TaskType::Comparison, TaskType::Reason};

/// "Caption", "Co-reference", "Comparison", "Reason".
std::string_view to_string(TaskType t);
/// Throws std::invalid_argument for unknown names.
TaskType task_type_from_string(std::string_view name);

/// Instances per task in the reference corpus (thousands).
std::map<TaskType, int> reference_task_mix();
/// reference_task_mix() scaled by `scale`, rounded half away from zero.
std::map<TaskType, int> scaled_task_mix(double scale);

// ---------------------------------------------------------------------------
// Geometry

/// Intersection over union on the normalized integer grid; 0 when both
/// areas are 0.
double iou(const BoundingBox& a, const BoundingBox& b);

/// (min x0, min y0, max x1, max y1). Throws std::invalid_argument when empty.
BoundingBox fuse_boxes(std::span<const BoundingBox> boxes);

struct DetectionCandidate {
  std::string entity;
  std::uint32_t image = 0;
  BoundingBox box;
  double iou = 0.0;  // against the reference, filled by validate_detections
};

/// Candidates whose IoU with `references[i]` is >= threshold (inclusive),
/// in input order. Throws std::invalid_argument on a size mismatch or a
/// threshold outside (0, 1].
std::vector<DetectionCandidate> validate_detections(std::vector<DetectionCandidate> candidates,
                                                    std::span<const BoundingBox> references,
                                                    double threshold = 0.9);

// ---------------------------------------------------------------------------
// Annotators

struct AnnotationRequest {
  std::string id;
  TaskType task = TaskType::Caption;
  std::string question;
  std::vector<SceneSpec> scenes;
};

struct RationaleDraft {
  std::string text;  // ungrounded rationale ending in "Answer: ..."
  std::string answer;
};

class AnnotatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The four capabilities the pipeline needs. Implementations may throw
/// AnnotatorError; the instance is then recorded as unprocessed.
class AnnotatorClient {
 public:
  virtual ~AnnotatorClient() = default;
  virtual RationaleDraft generate_rationale(const AnnotationRequest& request,
                                            const std::optional<std::string>& gold_answer) = 0;
  virtual std::vector<std::string> extract_entities(const AnnotationRequest& request, std::string_view dialogue) = 0;
  virtual std::vector<BoundingBox> detect(const AnnotationRequest& request, std::string_view entity,
                                          std::uint32_t image) = 0;
  virtual bool judge_answer(std::string_view predicted, std::string_view gold) = 0;
};

struct MockErrorRates {
  double wrong_first = 0.0;      // first rationale has a wrong answer
  double wrong_second = 0.0;     // gold-guided retry is still wrong
  double failure = 0.0;          // generate_rationale throws
  double bad_detection = 0.0;    // a detection is displaced below the IoU gate
  double extra_detection = 0.0;  // a second, slightly shifted detection is added

  void validate() const;
};

void to_json(nlohmann::json& j, const MockErrorRates& r);
void from_json(const nlohmann::json& j, MockErrorRates& r);

/// Rule-based annotator reading the scene specs as ground truth. Every
/// random decision is keyed by (seed, instance id, call), so results do not
/// depend on call order.
class MockAnnotator : public AnnotatorClient {
 public:
  struct Calls {
    std::size_t rationale = 0, extraction = 0, detection = 0, judge = 0;
  };

  MockAnnotator(std::uint64_t seed, MockErrorRates rates = {});

  RationaleDraft generate_rationale(const AnnotationRequest& request,
                                    const std::optional<std::string>& gold_answer) override;
  std::vector<std::string> extract_entities(const AnnotationRequest& request, std::string_view dialogue) override;
  std::vector<BoundingBox> detect(const AnnotationRequest& request, std::string_view entity,
                                  std::uint32_t image) override;
  bool judge_answer(std::string_view predicted, std::string_view gold) override;

  const Calls& calls() const { return calls_; }

 private:
  double draw(const AnnotationRequest& request, std::string_view what) const;

  std::uint64_t seed_;
  MockErrorRates rates_;
  Calls calls_;
};

// ---------------------------------------------------------------------------
// Instances

/// A task instance before annotation: scenes, question and gold answer.
struct TaskInstance {
  std::string id;
  TaskType task = TaskType::Caption;
  std::vector<SceneSpec> scenes;
  std::string question;
  std::string gold_answer;

  AnnotationRequest request() const { return {id, task, question, scenes}; }
};

struct SceneOptions {
  int image_size = 32;
  int cell = 8;
  std::vector<std::string> colors = {"red", "green", "blue", "yellow"};
  /// Images besides image 0 in a co-reference instance; exactly one of them
  /// holds the target.
  int coreference_candidates = 2;
};

/// Deterministic instance for (seed, task, index).
TaskInstance make_instance(TaskType task, std::uint64_t seed, std::size_t index, const SceneOptions& options = {});

/// The correct ungrounded rationale for an instance, and a corrupted one
/// whose answer is wrong.
RationaleDraft reference_rationale(const TaskInstance& instance);
RationaleDraft corrupted_rationale(const TaskInstance& instance);

/// Normalized boxes of every occurrence of `entity` (e.g. "red square") in a
/// scene of the given frame size.
std::vector<BoundingBox> entity_boxes(const SceneSpec& scene, std::string_view entity);

// ---------------------------------------------------------------------------
// Pipeline

enum class BuildOutcome : std::uint8_t { Retained, Refined, Rejected, Unprocessed };
std::string_view to_string(BuildOutcome o);

struct BuildResult {
  BuildOutcome outcome = BuildOutcome::Rejected;
  RationaleDraft draft;  // the accepted (or last) draft
  int client_calls = 0;  // generate_rationale calls
  std::string reason;
};

/// Generate, judge, retry once with the gold answer, judge again.
BuildResult build_rationale(const AnnotationRequest& request, const std::string& gold_answer, AnnotatorClient& client);

struct GroundingOptions {
  double iou_threshold = 0.9;
  int patch = kDefaultPatch;
  int min_side = kDefaultMinSide;
};

struct GroundingReport {
  std::size_t candidates = 0;
  std::size_t retained = 0;
  std::size_t fused = 0;  // (entity, image) pairs built from more than one box
  std::size_t grounded_mentions = 0;
};

/// Inserts `<IMG>k</IMG>` + fused box + crop vision span after every
/// "<entity> in image k" mention whose detections pass the IoU gate.
InterleavedSequence ground_rationale(const TaskInstance& instance, const RationaleDraft& draft,
                                     AnnotatorClient& client, const Vocabulary& vocab,
                                     const GroundingOptions& options, GroundingReport* report = nullptr);

struct CorpusRequest {
  std::map<TaskType, int> counts;
  std::uint64_t seed = 0;
  SceneOptions scenes;
  GroundingOptions grounding;
  /// Attempts allowed per requested instance before the request is
  /// declared infeasible.
  int max_attempts_per_instance = 20;
};

void to_json(nlohmann::json& j, const CorpusRequest& r);
void from_json(const nlohmann::json& j, CorpusRequest& r);

struct CorpusRecord {
  std::string id;
  TaskType task = TaskType::Caption;
  std::vector<SceneSpec> scenes;
  std::string question;
  InterleavedSequence chain;
  std::string answer;
  nlohmann::json provenance;
};

struct RejectedRecord {
  std::string id;
  TaskType task = TaskType::Caption;
  BuildOutcome outcome = BuildOutcome::Rejected;
  std::string reason;
};

struct StatsRow {
  std::string skill;
  std::string source;
  long long instances = 0;
};

struct CorpusResult {
  std::vector<CorpusRecord> records;  // sorted by id
  std::vector<RejectedRecord> rejected;
  std::map<BuildOutcome, std::size_t> outcomes;
  GroundingReport grounding;
  std::vector<StatsRow> stats;  // one row per task plus a total row
};

class InfeasibleRequest : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Builds exactly counts[task] instances per task. Throws InfeasibleRequest
/// when the attempt budget runs out and std::invalid_argument for negative
/// counts.
CorpusResult assemble_corpus(const CorpusRequest& request, AnnotatorClient& client,
                             const Vocabulary& vocab = Vocabulary::standard());

nlohmann::json record_to_json(const CorpusRecord& r, const Vocabulary& vocab);
/// Throws std::runtime_error (or GrammarError) for malformed records.
CorpusRecord record_from_json(const nlohmann::json& j, const Vocabulary& vocab);

/// corpus.jsonl, rejected.jsonl and stats.csv under `dir`; PNG renders of
/// the scenes under dir/images when `write_images`.
void write_corpus(const CorpusResult& corpus, const std::filesystem::path& dir, const Vocabulary& vocab,
                  bool write_images = false);
/// Throws std::runtime_error with the line number on malformed lines.
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& jsonl, const Vocabulary& vocab);

std::string stats_csv(const std::vector<StatsRow>& rows);
std::vector<StatsRow> parse_stats_csv(std::string_view text);

// ---------------------------------------------------------------------------
// General (text-only) data for mixed training

/// Text-only question/answer pairs about scene descriptions, used as the
/// general half of the mixed stage.
struct GeneralRecord {
  std::string id;
  std::string question;
  std::string answer;
};

std::vector<GeneralRecord> general_corpus(std::size_t count, std::uint64_t seed, const SceneOptions& options = {});

void to_json(nlohmann::json& j, const GeneralRecord& r);
void from_json(const nlohmann::json& j, GeneralRecord& r);
void write_general(const std::vector<GeneralRecord>& records, const std::filesystem::path& jsonl);
std::vector<GeneralRecord> read_general(const std::filesystem::path& jsonl);

}  // namespace cmmcot
