#include "cmmcot/engine.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cmmcot {

InterleavedSequence assemble_prompt(std::span<const Image> images, std::string_view question,
                                    const Vocabulary& vocab, int patch) {
  if (images.empty()) throw std::invalid_argument("assemble_prompt: at least one image is required");
  InterleavedSequence seq;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const PatchGrid grid = patch_grid(images[i].height(), images[i].width(), patch);
    seq.image(static_cast<std::uint32_t>(i), Role::Prompt)
        .vision(static_cast<std::uint32_t>(grid.count()), true, Role::Prompt);
  }
  std::string text(question);
  if (!text.empty() && text.back() != ' ') text += ' ';
  text += kReasoningPrompt;
  seq.text(vocab.encode(text), Role::Prompt);
  return seq;
}

TriggerResult detect_trigger(TokenId token, std::span<const TokenId> context, const Vocabulary& vocab,
                             std::optional<std::size_t> image_count) {
  TriggerResult out;
  if (token != vocab.special(Special::VisionStart)) return out;
  if (context.empty() || context.back() != vocab.special(Special::BoxEnd)) return out;
  const TokenId open = vocab.special(Special::ImageStart);
  std::size_t start = context.size();
  while (start > 0 && context[start - 1] != open) --start;
  if (start == 0) {
    out.diagnostic = "box without an image index";
    return out;
  }
  const auto slice = context.subspan(start - 1);
  try {
    const InterleavedSequence seq = parse_sequence(slice, vocab, {.image_count = image_count});
    const auto& els = seq.elements;
    if (els.size() != 2 || !std::holds_alternative<ImageIndexRef>(els[0].value) ||
        !std::holds_alternative<BoundingBox>(els[1].value)) {
      out.diagnostic = "trigger does not follow an image index and box";
      return out;
    }
    const Grounding g{std::get<ImageIndexRef>(els[0].value), std::get<BoundingBox>(els[1].value)};
    if (g.box.degenerate()) {
      out.diagnostic = "degenerate box";
      return out;
    }
    out.grounding = g;
  } catch (const GrammarError& e) {
    out.diagnostic = std::string("malformed grounding: ") + e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------

ChainBuilder::ChainBuilder(const Vocabulary& vocab, std::optional<std::size_t> image_count)
    : vocab_(vocab), image_count_(image_count) {}

void ChainBuilder::commit_text() {
  if (text_.empty()) return;
  auto& els = chain_.elements;
  if (!els.empty() && els.back().role == Role::Target) {
    if (auto* t = std::get_if<TextSpan>(&els.back().value)) {
      t->tokens.insert(t->tokens.end(), text_.begin(), text_.end());
      text_.clear();
      return;
    }
  }
  chain_.text(std::move(text_));
  text_.clear();
}

void ChainBuilder::commit_group() {
  if (group_.empty()) return;
  try {
    const InterleavedSequence parsed = parse_sequence(group_, vocab_, {.image_count = image_count_});
    chain_.append(parsed);
  } catch (const GrammarError& e) {
    diagnostics_.push_back("dropped group \"" + vocab_.decode(group_) + "\": " + e.what());
  }
  group_.clear();
}

void ChainBuilder::drop_group(const std::string& why) {
  diagnostics_.push_back("dropped group \"" + vocab_.decode(group_) + "\": " + why);
  group_.clear();
  expect_close_.reset();
}

void ChainBuilder::push(TokenId token) {
  const auto S = [&](Special s) { return vocab_.special(s); };
  if (expect_close_) {
    const bool pad = token == S(Special::ImagePad) || token == S(Special::ImagePadUnmasked);
    const bool allowed = !vocab_.is_special(token) || token == *expect_close_ ||
                         (pad && *expect_close_ == S(Special::VisionEnd));
    if (allowed && group_.size() < 4096) {
      group_.push_back(token);
      if (token == *expect_close_) expect_close_.reset();
      return;
    }
    drop_group("unterminated");
  }
  if (token == S(Special::ImageStart)) {
    commit_group();
    commit_text();
    group_ = {token};
    expect_close_ = S(Special::ImageEnd);
  } else if (token == S(Special::BoxStart) || token == S(Special::VisionStart)) {
    if (group_.empty()) commit_text();
    group_.push_back(token);
    expect_close_ = token == S(Special::BoxStart) ? S(Special::BoxEnd) : S(Special::VisionEnd);
  } else if (token == S(Special::EndOfText)) {
    flush();
  } else if (vocab_.is_special(token) || !vocab_.contains(token) || vocab_.is_reserved(token)) {
    diagnostics_.push_back("ignored stray token " + std::to_string(token));
  } else {
    commit_group();
    text_.push_back(token);
  }
}

void ChainBuilder::flush() {
  if (expect_close_) drop_group("unterminated at end of chain");
  commit_group();
  commit_text();
}

// ---------------------------------------------------------------------------

TokenId GreedyPicker::pick(const VectorF& logits, std::span<const std::uint8_t> banned) {
  TokenId best = -1;
  float best_value = -std::numeric_limits<float>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (static_cast<std::size_t>(i) < banned.size() && banned[static_cast<std::size_t>(i)]) continue;
    if (best < 0 || logits(i) > best_value) {
      best = static_cast<TokenId>(i);
      best_value = logits(i);
    }
  }
  if (best < 0) throw std::logic_error("every token is banned");
  return best;
}

TemperaturePicker::TemperaturePicker(double temperature, std::uint64_t seed) : temperature_(temperature), rng_(seed) {
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
}

TokenId TemperaturePicker::pick(const VectorF& logits, std::span<const std::uint8_t> banned) {
  auto ok = [&](Eigen::Index i) { return static_cast<std::size_t>(i) >= banned.size() || !banned[static_cast<std::size_t>(i)]; };
  double m = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (ok(i)) m = std::max(m, static_cast<double>(logits(i)));
  if (!std::isfinite(m)) throw std::logic_error("every token is banned");
  std::vector<double> p(static_cast<std::size_t>(logits.size()), 0.0);
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    if (!ok(i)) continue;
    p[static_cast<std::size_t>(i)] = std::exp((logits(i) - m) / temperature_);
    z += p[static_cast<std::size_t>(i)];
  }
  double u = rng_.uniform() * z;
  TokenId last = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    last = static_cast<TokenId>(i);
    if (u < p[i]) return last;
    u -= p[i];
  }
  return last;
}

TokenId ScriptedPicker::pick(const VectorF&, std::span<const std::uint8_t> banned) {
  while (next_ < script_.size()) {
    const TokenId t = script_[next_++];
    if (static_cast<std::size_t>(t) < banned.size() && banned[static_cast<std::size_t>(t)]) continue;
    return t;
  }
  return static_cast<TokenId>(Special::EndOfText);
}

std::unique_ptr<TokenPicker> DecodePolicy::make_picker() const {
  if (kind == Kind::Temperature) return std::make_unique<TemperaturePicker>(temperature, seed);
  return std::make_unique<GreedyPicker>();
}

std::string extract_answer(std::string_view text) {
  const auto at = text.find("Answer:");
  if (at == std::string_view::npos) return {};
  std::string_view rest = text.substr(at + 7);
  const auto end = rest.find_first_of(".\n<");
  if (end != std::string_view::npos) rest = rest.substr(0, end);
  while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
  while (!rest.empty() && rest.back() == ' ') rest.remove_suffix(1);
  return std::string(rest);
}

// ---------------------------------------------------------------------------

namespace {

// Ids the loop may pick: text, end-of-text and the grounding markers.
std::vector<std::uint8_t> base_bans(const Vocabulary& vocab, int model_vocab) {
  std::vector<std::uint8_t> banned(static_cast<std::size_t>(model_vocab), 1);
  for (TokenId t = 0; t < model_vocab; ++t) {
    if (vocab.is_text(t)) banned[static_cast<std::size_t>(t)] = 0;
  }
  for (Special s : {Special::EndOfText, Special::ImageStart, Special::ImageEnd, Special::BoxStart, Special::BoxEnd,
                    Special::VisionStart}) {
    banned[static_cast<std::size_t>(vocab.special(s))] = 0;
  }
  return banned;
}

Sample prompt_layout(std::span<const Image> images, std::string_view question, const Vocabulary& vocab, int patch,
                     int min_side, InterleavedSequence* prompt_out) {
  InterleavedSequence prompt = assemble_prompt(images, question, vocab, patch);
  // With the end-of-text appended the inputs are exactly the prompt tokens.
  Sample s = build_sample(prompt, images, vocab, {patch, min_side, true});
  if (prompt_out) *prompt_out = std::move(prompt);
  return s;
}

}  // namespace

GenerationSession::GenerationSession(const Weights<float>& weights, const Vocabulary& vocab, std::vector<Image> images,
                                     std::string question, TokenPicker& picker, GenerationOptions options)
    : weights_(weights),
      vocab_(vocab),
      images_(std::move(images)),
      question_(std::move(question)),
      picker_(picker),
      options_(std::move(options)),
      state_(weights.config),
      bank_(weights.config.layers, weights.config.dim),
      injector_(weights, bank_, options_.rifrem),
      builder_(vocab, images_.size()) {
  if (options_.step_budget < 0) throw std::invalid_argument("step budget must be >= 0");
  if (vocab.size() > weights.config.vocab_size) throw std::invalid_argument("vocabulary larger than the model");
  banned_ = base_bans(vocab, weights.config.vocab_size);
}

void GenerationSession::prefill() {
  if (prefilled_) return;
  prefilled_ = true;
  const Sample s = prompt_layout(images_, question_, vocab_, weights_.config.patch, options_.min_side, &result_.prompt);
  prompt_tokens_ = s.tokens;
  if (static_cast<int>(s.length()) >= weights_.config.max_positions ||
      s.positions.back().max() >= weights_.config.max_positions) {
    throw std::out_of_range("prompt exceeds the model's position limit");
  }
  std::vector<int> record(s.length(), -1);
  for (std::size_t img = 0; img < s.image_rows.size(); ++img)
    for (int r : s.image_rows[img]) record[static_cast<std::size_t>(r)] = static_cast<int>(img);
  const bool recording = options_.rifrem.enabled && !options_.rifrem.layers.empty();
  int open = -1;
  for (std::size_t i = 0; i < s.length(); ++i) {
    if (recording && open >= 0 && record[i] != open) {
      injector_.end_record();
      open = -1;
    }
    if (recording && record[i] >= 0 && open < 0) {
      injector_.begin_record(static_cast<std::uint32_t>(record[i]));
      open = record[i];
    }
    logits_ = forward_step(weights_, state_, sample_input(s, i), &injector_);
  }
  if (open >= 0) injector_.end_record();
  bank_.seal();
  state_.tracker().set_next(s.positions.back().t + 1);
}

bool GenerationSession::at_capacity(std::size_t extra) const {
  return static_cast<int>(state_.length() + extra) > weights_.config.max_positions ||
         state_.tracker().next() + static_cast<int>(extra) > weights_.config.max_positions;
}

VectorF GenerationSession::feed_text(TokenId token) {
  const Pos3 pos = state_.tracker().next_text();
  logits_ = forward_step(weights_, state_, {token, {}, pos}, &injector_);
  result_.generated.push_back(token);
  builder_.push(token);
  return logits_;
}

bool GenerationSession::feed_crop(const Grounding& g) {
  const EntityCrop crop = extract_crop(images_[g.image.index], g.box, options_.min_side, g.image);
  const MatrixF feats = patch_features(crop.pixels, weights_.config.patch);
  const PatchGrid grid = patch_grid(crop.pixels.height(), crop.pixels.width(), weights_.config.patch);
  const auto count = static_cast<std::size_t>(feats.rows());
  if (at_capacity(count + 2 + static_cast<std::size_t>(std::max(grid.rows, grid.cols)))) return false;
  ++result_.crop_extractions;

  feed_text(vocab_.special(Special::VisionStart));
  TriggerEvent ev{static_cast<std::size_t>(picks_ - 1), g, static_cast<int>(count), false};
  ev.refined = injector_.begin_refine(g.image.index);
  if (!ev.refined && options_.rifrem.enabled && !options_.rifrem.layers.empty()) {
    result_.diagnostics.push_back("no bank entry for image " + std::to_string(g.image.index) + "; crop not refined");
  }
  auto& tracker = state_.tracker();
  tracker.begin_span(grid);
  const TokenId pad = vocab_.special(Special::ImagePad);
  for (std::size_t k = 0; k < count; ++k) {
    StepInput in{pad, {feats.row(static_cast<Eigen::Index>(k)).data(), static_cast<std::size_t>(feats.cols())},
                 tracker.span_position(static_cast<int>(k))};
    logits_ = forward_step(weights_, state_, in, &injector_);
    result_.generated.push_back(pad);
    builder_.push(pad);
  }
  if (ev.refined) injector_.end_refine();
  tracker.end_span();
  feed_text(vocab_.special(Special::VisionEnd));
  result_.triggers.push_back(ev);
  return true;
}

bool GenerationSession::step() {
  prefill();
  if (stopped_) return false;
  if (picks_ >= options_.step_budget) {
    result_.truncated = true;
    stopped_ = true;
    return false;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const TokenId trigger = vocab_.special(Special::VisionStart);
  banned_[static_cast<std::size_t>(trigger)] = (options_.suppress_trigger || ban_trigger_once_) ? 1 : 0;
  ban_trigger_once_ = false;
  const TokenId token = picker_.pick(logits_, banned_);
  ++picks_;

  auto finish_step = [&] {
    if (options_.record_timings) {
      const auto dt = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
      result_.steps.push_back({token, dt});
    } else {
      result_.steps.push_back({token, 0.0});
    }
  };

  if (token == vocab_.special(Special::EndOfText)) {
    builder_.push(token);
    result_.finished = true;
    stopped_ = true;
    finish_step();
    return false;
  }
  if (token == trigger) {
    TriggerResult tr = detect_trigger(token, result_.generated, vocab_, images_.size());
    std::optional<Grounding> g = tr.grounding;
    if (g) {
      try {
        (void)extract_crop(images_[g->image.index], g->box, options_.min_side);
      } catch (const std::invalid_argument& e) {
        tr.diagnostic = std::string("crop failed: ") + e.what();
        g.reset();
      }
    }
    if (!g) {
      result_.diagnostics.push_back("step " + std::to_string(picks_ - 1) + ": skipped trigger (" +
                                    (tr.diagnostic.empty() ? std::string("no grounding") : tr.diagnostic) + ")");
      ban_trigger_once_ = true;
      finish_step();
      return true;
    }
    if (!feed_crop(*g)) {
      result_.truncated = true;
      stopped_ = true;
    }
    finish_step();
    return !stopped_;
  }
  if (at_capacity(1)) {
    result_.truncated = true;
    stopped_ = true;
    return false;
  }
  feed_text(token);
  finish_step();
  return true;
}

GenerationResult GenerationSession::run() {
  prefill();
  while (step()) {
  }
  builder_.flush();
  result_.chain = builder_.chain();
  for (const auto& d : builder_.diagnostics()) result_.diagnostics.push_back(d);
  result_.answer = extract_answer(render_text(result_.chain, vocab_));
  result_.counters = injector_.counters();
  result_.bank_manifest = bank_.manifest();
  return result_;
}

GenerationResult generate(const Weights<float>& weights, const Vocabulary& vocab, std::vector<Image> images,
                          std::string question, TokenPicker& picker, const GenerationOptions& options) {
  GenerationSession session(weights, vocab, std::move(images), std::move(question), picker, options);
  return session.run();
}

std::vector<TokenId> decode_plain(const Weights<float>& weights, const Vocabulary& vocab,
                                  std::span<const Image> images, std::string_view question, TokenPicker& picker,
                                  int step_budget) {
  const Sample s = prompt_layout(images, question, vocab, weights.config.patch, kDefaultMinSide, nullptr);
  DecoderState state(weights.config);
  VectorF logits;
  for (std::size_t i = 0; i < s.length(); ++i) logits = forward_step(weights, state, sample_input(s, i));
  auto banned = base_bans(vocab, weights.config.vocab_size);
  banned[static_cast<std::size_t>(vocab.special(Special::VisionStart))] = 1;
  int pos = s.positions.back().t + 1;
  std::vector<TokenId> out;
  for (int step = 0; step < step_budget; ++step) {
    const TokenId t = picker.pick(logits, banned);
    if (t == vocab.special(Special::EndOfText)) break;
    if (pos >= weights.config.max_positions) break;
    logits = forward_step(weights, state, {t, {}, Pos3::text(pos++)});
    out.push_back(t);
  }
  return out;
}

nlohmann::json transcript_json(const GenerationResult& r, const Vocabulary& vocab) {
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& s : r.steps) steps.push_back({{"token", s.token}, {"piece", vocab.piece(s.token)}, {"micros", s.micros}});
  nlohmann::json triggers = nlohmann::json::array();
  for (const auto& t : r.triggers) {
    triggers.push_back({{"step", t.step},
                        {"image", t.grounding.image.index},
                        {"box", {t.grounding.box.x0, t.grounding.box.y0, t.grounding.box.x1, t.grounding.box.y1}},
                        {"crop_tokens", t.crop_tokens},
                        {"refined", t.refined}});
  }
  return {{"prompt", render_text(r.prompt, vocab)},
          {"chain", render_text(r.chain, vocab)},
          {"answer", r.answer},
          {"finished", r.finished},
          {"truncated", r.truncated},
          {"generated_tokens", r.generated},
          {"steps", std::move(steps)},
          {"triggers", std::move(triggers)},
          {"crop_extractions", r.crop_extractions},
          {"rifrem",
           {{"recorded_images", r.counters.recorded_images},
            {"refinements", r.counters.refinements},
            {"retrievals", r.counters.retrievals},
            {"injections", r.counters.injections}}},
          {"bank", r.bank_manifest},
          {"diagnostics", r.diagnostics}};
}

}  // namespace cmmcot
