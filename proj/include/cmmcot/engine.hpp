#pragma once

// Autoregressive generation with entity grounding: when the model opens a
// vision span right after a grounded (image index, box) pair, the crop is cut
// from that image, fed back as visual tokens and refined against the memory
// bank, then text decoding resumes.

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmmcot/decoder.hpp"
#include "cmmcot/random.hpp"
#include "cmmcot/rifrem.hpp"

namespace cmmcot {

inline constexpr std::string_view kReasoningPrompt =
    "Please answer the question with reasoning and identify key objects.";
inline constexpr int kDefaultStepBudget = 512;

/// Images as `<IMG>i</IMG>` plus their vision spans, then the question and
/// the reasoning prompt as one text span. Every element has the prompt role.
/// Throws std::invalid_argument when `images` is empty.
InterleavedSequence assemble_prompt(std::span<const Image> images, std::string_view question,
                                    const Vocabulary& vocab, int patch = kDefaultPatch);

struct Grounding {
  ImageIndexRef image;
  BoundingBox box;
  friend bool operator==(const Grounding&, const Grounding&) = default;
};

struct TriggerResult {
  std::optional<Grounding> grounding;
  std::string diagnostic;  // set when a grounding was present but unusable
};

/// Given that `token` was just emitted after `context`, returns the (index,
/// box) pair that immediately precedes it when `token` is the trigger and
/// the pair is well formed. Never throws.
TriggerResult detect_trigger(TokenId token, std::span<const TokenId> context, const Vocabulary& vocab,
                             std::optional<std::size_t> image_count = std::nullopt);

/// Incremental, lenient parse of generated tokens. Complete groups that fail
/// the grammar are dropped and reported, so chain() always validates.
class ChainBuilder {
 public:
  ChainBuilder(const Vocabulary& vocab, std::optional<std::size_t> image_count);

  void push(TokenId token);
  /// Flushes buffered text and groups.
  void flush();

  const InterleavedSequence& chain() const { return chain_; }
  const std::vector<std::string>& diagnostics() const { return diagnostics_; }

 private:
  void commit_text();
  void commit_group();
  void drop_group(const std::string& why);

  const Vocabulary& vocab_;
  std::optional<std::size_t> image_count_;
  InterleavedSequence chain_;
  std::vector<TokenId> text_;
  std::vector<TokenId> group_;
  std::optional<TokenId> expect_close_;
  std::vector<std::string> diagnostics_;
};

// ---------------------------------------------------------------------------
// Decode policies

class TokenPicker {
 public:
  virtual ~TokenPicker() = default;
  /// Chooses the next token; `banned[id]` ids must not be returned.
  virtual TokenId pick(const VectorF& logits, std::span<const std::uint8_t> banned) = 0;
};

/// Arg-max, lowest id on ties.
class GreedyPicker : public TokenPicker {
 public:
  TokenId pick(const VectorF& logits, std::span<const std::uint8_t> banned) override;
};

class TemperaturePicker : public TokenPicker {
 public:
  TemperaturePicker(double temperature, std::uint64_t seed);
  TokenId pick(const VectorF& logits, std::span<const std::uint8_t> banned) override;

 private:
  double temperature_;
  Rng rng_;
};

/// Replays a fixed token list (then end-of-text), ignoring the logits; a
/// banned scripted token is skipped. Used to drive the loop deterministically.
class ScriptedPicker : public TokenPicker {
 public:
  explicit ScriptedPicker(std::vector<TokenId> script) : script_(std::move(script)) {}
  TokenId pick(const VectorF& logits, std::span<const std::uint8_t> banned) override;

 private:
  std::vector<TokenId> script_;
  std::size_t next_ = 0;
};

struct DecodePolicy {
  enum class Kind { Greedy, Temperature };
  Kind kind = Kind::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  std::unique_ptr<TokenPicker> make_picker() const;
};

// ---------------------------------------------------------------------------
// Generation

struct GenerationOptions {
  RifremConfig rifrem;
  int step_budget = kDefaultStepBudget;
  int min_side = kDefaultMinSide;
  /// Never emit the trigger (the no-grounding baseline).
  bool suppress_trigger = false;
  bool record_timings = true;
};

struct TriggerEvent {
  std::size_t step = 0;
  Grounding grounding;
  int crop_tokens = 0;
  bool refined = false;
};

struct StepRecord {
  TokenId token = 0;
  double micros = 0.0;
};

struct GenerationResult {
  InterleavedSequence prompt;
  InterleavedSequence chain;
  std::vector<TokenId> generated;  // every token fed after the prompt
  std::string answer;
  bool finished = false;   // end-of-text reached
  bool truncated = false;  // budget or position limit hit
  std::vector<TriggerEvent> triggers;
  std::vector<StepRecord> steps;  // one per picked token
  std::vector<std::string> diagnostics;
  RifremInjector::Counters counters;
  std::size_t crop_extractions = 0;
  nlohmann::json bank_manifest;
};

/// The first answer span: text after the first "Answer:" up to a period,
/// newline or marker, trimmed. Anything the model emits after it is ignored.
/// Empty when absent.
std::string extract_answer(std::string_view text);

/// One generation stream. Owns its decoder state and memory bank; the
/// weights are shared read-only.
class GenerationSession {
 public:
  GenerationSession(const Weights<float>& weights, const Vocabulary& vocab, std::vector<Image> images,
                    std::string question, TokenPicker& picker, GenerationOptions options = {});

  /// Feeds the prompt and seals the bank. Called by run() if needed.
  void prefill();
  /// Picks and feeds one token (plus a crop span when it triggers). Returns
  /// false once generation has stopped.
  bool step();
  GenerationResult run();

  const DecoderState& state() const { return state_; }
  const MemoryBank& bank() const { return bank_; }
  const std::vector<TokenId>& prompt_tokens() const { return prompt_tokens_; }

 private:
  VectorF feed_text(TokenId token);
  bool feed_crop(const Grounding& g);
  bool at_capacity(std::size_t extra) const;

  const Weights<float>& weights_;
  const Vocabulary& vocab_;
  std::vector<Image> images_;
  std::string question_;
  TokenPicker& picker_;
  GenerationOptions options_;
  DecoderState state_;
  MemoryBank bank_;
  RifremInjector injector_;
  ChainBuilder builder_;
  GenerationResult result_;
  std::vector<TokenId> prompt_tokens_;
  std::vector<std::uint8_t> banned_;
  VectorF logits_;
  bool prefilled_ = false;
  bool stopped_ = false;
  bool ban_trigger_once_ = false;
  int picks_ = 0;
};

GenerationResult generate(const Weights<float>& weights, const Vocabulary& vocab, std::vector<Image> images,
                          std::string question, TokenPicker& picker, const GenerationOptions& options = {});

/// Plain decoder loop without grounding or refinement: the prompt is fed
/// the same way and tokens are picked under the same bans, with the trigger
/// always banned.
std::vector<TokenId> decode_plain(const Weights<float>& weights, const Vocabulary& vocab,
                                  std::span<const Image> images, std::string_view question, TokenPicker& picker,
                                  int step_budget = kDefaultStepBudget);

/// JSON transcript: prompt and chain text, answer, tokens, timings,
/// trigger events and diagnostics.
nlohmann::json transcript_json(const GenerationResult& result, const Vocabulary& vocab);

}  // namespace cmmcot
