#include "cmmcot/grammar.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <string>

namespace cmmcot {

namespace {

constexpr std::array<std::string_view, kSpecialCount> kMarkerText = {
    "<|endoftext|>",   "<IMG>",          "</IMG>",        "<|box_start|>",
    "<|box_end|>",     "<|vision_start|>", "<|vision_end|>", "<|image_pad|>",
    "<|image_pad_unmasked|>",
};

// Words of the synthetic-scene language. Each entry is registered both bare
// and with a leading space.
constexpr std::string_view kStandardWords[] = {
    "Please", "answer", "the", "question", "with", "reasoning", "and", "identify", "key",
    "objects", "Which", "which", "image", "images", "contains", "contain", "from", "Describe",
    "describe", "each", "Image", "has", "have", "an", "The", "also", "appears", "appear", "in",
    "In", "matches", "match", "is", "are", "absent", "Do", "do", "share", "shape", "shapes",
    "How", "how", "many", "there", "Answer", "yes", "no", "red", "green", "blue", "yellow",
    "purple", "orange", "cyan", "white", "gray", "pink", "square", "squares", "circle", "circles",
    "triangle", "triangles", "not", "of", "one", "two", "three", "four", "zero", "same", "object",
    "count", "more", "fewer", "than", "both", "only", "also", "found", "first", "second", "third",
    "fourth", "left", "right", "top", "bottom", "center", "this", "that", "these", "so", "total",
    "all", "none", "any", "other", "another", "it", "its", "we", "see", "look", "for", "at", "on",
    "by", "color", "colors", "compare", "comparing", "pair", "same", "different", "between",
    "entity", "entities", "shows", "show", "then",
};

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

std::vector<std::string> standard_word_list() {
  std::vector<std::string> out;
  for (auto w : kStandardWords) {
    std::string bare(w);
    if (std::find(out.begin(), out.end(), bare) != out.end()) continue;
    out.push_back(bare);
    out.push_back(" " + bare);
  }
  return out;
}

[[noreturn]] void fail(GrammarErrc code, std::size_t offset, const std::string& detail) {
  throw GrammarError(code, offset, detail);
}

}  // namespace

long long round_half_away(double value) {
  return static_cast<long long>(std::round(value));
}

BoundingBox normalize_box(const PixelBox& box, int width, int height) {
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("normalize_box: degenerate image extent");
  }
  if (box.x0 < 0 || box.x0 > box.x1 || box.x1 > width || box.y0 < 0 || box.y0 > box.y1 ||
      box.y1 > height) {
    throw std::invalid_argument("normalize_box: pixel box outside image or unordered");
  }
  // Exact integer form of round_half_away(p * 1000 / extent) for p >= 0.
  auto scale = [](long long p, long long extent) {
    return static_cast<int>((2 * p * kCoordMax + extent) / (2 * extent));
  };
  return {scale(box.x0, width), scale(box.y0, height), scale(box.x1, width), scale(box.y1, height)};
}

PixelBox denormalize_box(const BoundingBox& box, int width, int height) {
  if (!box.valid()) throw std::invalid_argument("denormalize_box: invalid box");
  if (width <= 0 || height <= 0) {
    throw std::invalid_argument("denormalize_box: degenerate image extent");
  }
  auto scale = [](long long c, long long extent) {
    return static_cast<int>((2 * c * extent + kCoordMax) / (2 * kCoordMax));
  };
  return {scale(box.x0, width), scale(box.y0, height), scale(box.x1, width), scale(box.y1, height)};
}

// ---------------------------------------------------------------------------
// InterleavedSequence builders

InterleavedSequence& InterleavedSequence::text(std::vector<TokenId> tokens, Role role) {
  elements.push_back({TextSpan{std::move(tokens)}, role});
  return *this;
}

InterleavedSequence& InterleavedSequence::image(std::uint32_t index, Role role) {
  elements.push_back({ImageIndexRef{index}, role});
  return *this;
}

InterleavedSequence& InterleavedSequence::box(const BoundingBox& b, Role role) {
  elements.push_back({b, role});
  return *this;
}

InterleavedSequence& InterleavedSequence::vision(std::uint32_t token_count, bool loss_masked,
                                                 Role role) {
  elements.push_back({VisionSpan{token_count, loss_masked}, role});
  return *this;
}

InterleavedSequence& InterleavedSequence::append(const InterleavedSequence& other) {
  elements.insert(elements.end(), other.elements.begin(), other.elements.end());
  return *this;
}

// ---------------------------------------------------------------------------
// Vocabulary

std::string_view marker_text(Special marker) {
  return kMarkerText.at(static_cast<std::size_t>(marker));
}

Vocabulary::Vocabulary(std::vector<std::string> words, int padded_size) : words_(std::move(words)) {
  TokenId next = kSpecialCount + 256;
  for (const auto& w : words_) {
    if (w.empty()) throw std::invalid_argument("Vocabulary: empty word");
    if (!word_ids_.emplace(w, next).second) {
      throw std::invalid_argument("Vocabulary: duplicate word '" + w + "'");
    }
    ++next;
  }
  text_end_ = next;
  size_ = std::max<int>(padded_size, text_end_);
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab(standard_word_list(), 512);
  return vocab;
}

std::optional<int> Vocabulary::digit_value(TokenId id) const {
  const TokenId zero = byte_token('0');
  if (id >= zero && id <= zero + 9) return id - zero;
  return std::nullopt;
}

std::optional<TokenId> Vocabulary::word(std::string_view piece) const {
  auto it = word_ids_.find(std::string(piece));
  if (it == word_ids_.end()) return std::nullopt;
  return it->second;
}

void Vocabulary::encode_piece(std::string_view piece, std::vector<TokenId>& out) const {
  if (auto id = word(piece)) {
    out.push_back(*id);
    return;
  }
  if (piece.size() > 1 && piece.front() == ' ') {
    out.push_back(byte_token(' '));
    piece.remove_prefix(1);
    if (auto id = word(piece)) {
      out.push_back(*id);
      return;
    }
  }
  for (char c : piece) out.push_back(byte_token(static_cast<unsigned char>(c)));
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t start = i;
    if (text[i] == ' ' && i + 1 < text.size() && is_letter(text[i + 1])) ++i;
    if (is_letter(text[i])) {
      while (i < text.size() && is_letter(text[i])) ++i;
      encode_piece(text.substr(start, i - start), out);
    } else {
      out.push_back(byte_token(static_cast<unsigned char>(text[i])));
      ++i;
    }
  }
  return out;
}

std::string Vocabulary::piece(TokenId id) const {
  if (is_special(id)) return std::string(marker_text(static_cast<Special>(id)));
  if (id >= kSpecialCount && id < kSpecialCount + 256) {
    return std::string(1, static_cast<char>(id - kSpecialCount));
  }
  if (is_text(id)) return words_[static_cast<std::size_t>(id - kSpecialCount - 256)];
  if (is_reserved(id)) return "<|reserved_" + std::to_string(id - text_end_) + "|>";
  throw std::out_of_range("Vocabulary: token id " + std::to_string(id) + " out of range");
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += piece(id);
  return out;
}

std::vector<TokenId> Vocabulary::lex(std::string_view text) const {
  std::vector<TokenId> out;
  std::size_t segment = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {
      bool matched = false;
      for (int m = 0; m < kSpecialCount; ++m) {
        auto marker = kMarkerText[static_cast<std::size_t>(m)];
        if (text.substr(i, marker.size()) == marker) {
          auto enc = encode(text.substr(segment, i - segment));
          out.insert(out.end(), enc.begin(), enc.end());
          out.push_back(m);
          i += marker.size();
          segment = i;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    ++i;
  }
  auto enc = encode(text.substr(segment));
  out.insert(out.end(), enc.begin(), enc.end());
  return out;
}

// ---------------------------------------------------------------------------
// Errors

std::string_view to_string(GrammarErrc code) {
  switch (code) {
    case GrammarErrc::UnbalancedMarker: return "unbalanced marker";
    case GrammarErrc::UnexpectedToken: return "unexpected token";
    case GrammarErrc::NonIntegerCoordinate: return "non-integer coordinate";
    case GrammarErrc::CoordinateRange: return "coordinate out of range";
    case GrammarErrc::InvalidBox: return "invalid box";
    case GrammarErrc::IndexRange: return "image index out of range";
    case GrammarErrc::OrderingViolation: return "grounding order violation";
    case GrammarErrc::UnknownToken: return "unknown token";
    case GrammarErrc::EmptyElement: return "empty element";
  }
  return "grammar error";
}

GrammarError::GrammarError(GrammarErrc code, std::size_t offset, const std::string& detail)
    : std::runtime_error(std::string(to_string(code)) + " at " + std::to_string(offset) +
                         (detail.empty() ? "" : ": " + detail)),
      code_(code),
      offset_(offset) {}

// ---------------------------------------------------------------------------
// Validation and serialization

void validate_sequence(const InterleavedSequence& seq, const Vocabulary& vocab,
                       const GrammarOptions& options) {
  const auto& els = seq.elements;
  for (std::size_t i = 0; i < els.size(); ++i) {
    const auto& v = els[i].value;
    const ElementValue* prev = i > 0 ? &els[i - 1].value : nullptr;
    if (const auto* t = std::get_if<TextSpan>(&v)) {
      if (t->tokens.empty()) fail(GrammarErrc::EmptyElement, i, "empty text span");
      // Text may only abut text across a prompt/target boundary.
      if (prev && std::holds_alternative<TextSpan>(*prev) && els[i - 1].role == els[i].role) {
        fail(GrammarErrc::OrderingViolation, i, "adjacent text spans");
      }
      for (TokenId id : t->tokens) {
        if (!vocab.is_text(id)) {
          fail(GrammarErrc::UnknownToken, i, "non-text id " + std::to_string(id) + " in text span");
        }
      }
    } else if (const auto* ix = std::get_if<ImageIndexRef>(&v)) {
      if (ix->index >= kMaxImages) fail(GrammarErrc::IndexRange, i, "index exceeds grammar limit");
      if (options.image_count && ix->index >= *options.image_count) {
        fail(GrammarErrc::IndexRange, i, "index " + std::to_string(ix->index));
      }
    } else if (const auto* b = std::get_if<BoundingBox>(&v)) {
      if (!b->valid()) fail(GrammarErrc::InvalidBox, i, "");
      if (!prev || !std::holds_alternative<ImageIndexRef>(*prev)) {
        fail(GrammarErrc::OrderingViolation, i, "box must follow an image index");
      }
    } else if (const auto* s = std::get_if<VisionSpan>(&v)) {
      if (s->token_count == 0) fail(GrammarErrc::EmptyElement, i, "empty vision span");
      if (!prev || !(std::holds_alternative<ImageIndexRef>(*prev) ||
                     std::holds_alternative<BoundingBox>(*prev))) {
        fail(GrammarErrc::OrderingViolation, i, "vision span must follow an index or box");
      }
    }
  }
}

namespace {

void emit_number(long long value, const Vocabulary& vocab, std::vector<TokenId>& out) {
  for (char c : std::to_string(value)) out.push_back(vocab.byte_token(static_cast<unsigned char>(c)));
}

void emit_element(const ElementValue& v, const Vocabulary& vocab, std::vector<TokenId>& out) {
  auto byte = [&](char c) { out.push_back(vocab.byte_token(static_cast<unsigned char>(c))); };
  if (const auto* t = std::get_if<TextSpan>(&v)) {
    out.insert(out.end(), t->tokens.begin(), t->tokens.end());
  } else if (const auto* ix = std::get_if<ImageIndexRef>(&v)) {
    out.push_back(vocab.special(Special::ImageStart));
    emit_number(ix->index, vocab, out);
    out.push_back(vocab.special(Special::ImageEnd));
  } else if (const auto* b = std::get_if<BoundingBox>(&v)) {
    out.push_back(vocab.special(Special::BoxStart));
    byte('(');
    emit_number(b->x0, vocab, out);
    byte(',');
    emit_number(b->y0, vocab, out);
    byte(')');
    byte(',');
    byte('(');
    emit_number(b->x1, vocab, out);
    byte(',');
    emit_number(b->y1, vocab, out);
    byte(')');
    out.push_back(vocab.special(Special::BoxEnd));
  } else if (const auto* s = std::get_if<VisionSpan>(&v)) {
    out.push_back(vocab.special(Special::VisionStart));
    const TokenId pad = vocab.special(s->loss_masked ? Special::ImagePad : Special::ImagePadUnmasked);
    out.insert(out.end(), s->token_count, pad);
    out.push_back(vocab.special(Special::VisionEnd));
  }
}

}  // namespace

std::vector<TokenId> serialize_sequence(const InterleavedSequence& seq, const Vocabulary& vocab,
                                        const GrammarOptions& options) {
  validate_sequence(seq, vocab, options);
  std::vector<TokenId> out;
  for (const auto& el : seq.elements) emit_element(el.value, vocab, out);
  return out;
}

std::vector<Role> serialized_roles(const InterleavedSequence& seq, const Vocabulary& vocab) {
  std::vector<Role> roles;
  std::vector<TokenId> scratch;
  for (const auto& el : seq.elements) {
    scratch.clear();
    emit_element(el.value, vocab, scratch);
    roles.insert(roles.end(), scratch.size(), el.role);
  }
  return roles;
}

// ---------------------------------------------------------------------------
// Parsing

namespace {

class Parser {
 public:
  Parser(std::span<const TokenId> tokens, const Vocabulary& vocab, const GrammarOptions& options)
      : toks_(tokens), vocab_(vocab), opts_(options) {}

  InterleavedSequence run() {
    while (pos_ < toks_.size()) {
      const TokenId id = toks_[pos_];
      if (!vocab_.contains(id) || vocab_.is_reserved(id)) {
        fail(GrammarErrc::UnknownToken, pos_, "id " + std::to_string(id));
      }
      if (vocab_.is_text(id)) {
        text_.push_back(id);
        ++pos_;
        continue;
      }
      switch (static_cast<Special>(id)) {
        case Special::ImageStart: parse_index(); break;
        case Special::BoxStart: parse_box(); break;
        case Special::VisionStart: parse_vision(); break;
        case Special::ImageEnd:
        case Special::BoxEnd:
        case Special::VisionEnd:
          fail(GrammarErrc::UnbalancedMarker, pos_, "closing marker without opener");
        default:
          fail(GrammarErrc::UnexpectedToken, pos_, vocab_.piece(id));
      }
    }
    flush_text();
    return std::move(seq_);
  }

 private:
  void flush_text() {
    if (text_.empty()) return;
    seq_.text(std::move(text_), opts_.role);
    text_.clear();
  }

  const ElementValue* last() const {
    return seq_.elements.empty() ? nullptr : &seq_.elements.back().value;
  }

  // Reads a decimal number (no leading zeros) starting at pos_.
  long long number(GrammarErrc not_digit, long long max_value, GrammarErrc range_code) {
    const std::size_t start = pos_;
    long long value = 0;
    std::size_t digits = 0;
    while (pos_ < toks_.size()) {
      auto d = vocab_.digit_value(toks_[pos_]);
      if (!d) break;
      if (digits == 1 && value == 0) fail(not_digit, start, "leading zero");
      value = value * 10 + *d;
      ++digits;
      if (value > max_value) fail(range_code, start, "value exceeds " + std::to_string(max_value));
      ++pos_;
    }
    if (digits == 0) {
      if (pos_ >= toks_.size()) fail(GrammarErrc::UnbalancedMarker, opener_, "unterminated group");
      fail(not_digit, pos_, "expected digit, got '" + vocab_.piece(toks_[pos_]) + "'");
    }
    return value;
  }

  void expect(char c) {
    if (pos_ >= toks_.size()) fail(GrammarErrc::UnbalancedMarker, opener_, "unterminated group");
    if (toks_[pos_] != vocab_.byte_token(static_cast<unsigned char>(c))) {
      if (vocab_.is_special(toks_[pos_])) {
        fail(GrammarErrc::UnbalancedMarker, pos_, "marker inside box");
      }
      fail(GrammarErrc::NonIntegerCoordinate, pos_, std::string("expected '") + c + "'");
    }
    ++pos_;
  }

  void expect_close(Special marker) {
    if (pos_ >= toks_.size()) fail(GrammarErrc::UnbalancedMarker, opener_, "missing closing marker");
    if (toks_[pos_] != vocab_.special(marker)) {
      fail(vocab_.is_special(toks_[pos_]) ? GrammarErrc::UnbalancedMarker
                                          : GrammarErrc::UnexpectedToken,
           pos_, std::string("expected ") + std::string(marker_text(marker)));
    }
    ++pos_;
  }

  void parse_index() {
    flush_text();
    opener_ = pos_++;
    const long long value =
        number(GrammarErrc::UnexpectedToken, kMaxImages - 1, GrammarErrc::IndexRange);
    if (opts_.image_count && static_cast<std::size_t>(value) >= *opts_.image_count) {
      fail(GrammarErrc::IndexRange, opener_ + 1, "index " + std::to_string(value));
    }
    expect_close(Special::ImageEnd);
    seq_.image(static_cast<std::uint32_t>(value), opts_.role);
  }

  void parse_box() {
    const bool after_index = text_.empty() && last() && std::holds_alternative<ImageIndexRef>(*last());
    flush_text();
    opener_ = pos_++;
    auto coord = [&] {
      return static_cast<int>(
          number(GrammarErrc::NonIntegerCoordinate, kCoordMax, GrammarErrc::CoordinateRange));
    };
    BoundingBox b;
    expect('(');
    b.x0 = coord();
    expect(',');
    b.y0 = coord();
    expect(')');
    expect(',');
    expect('(');
    b.x1 = coord();
    expect(',');
    b.y1 = coord();
    expect(')');
    expect_close(Special::BoxEnd);
    if (!b.valid()) fail(GrammarErrc::InvalidBox, opener_, "corners out of order");
    if (!after_index) fail(GrammarErrc::OrderingViolation, opener_, "box must follow an image index");
    seq_.box(b, opts_.role);
  }

  void parse_vision() {
    const bool after_ground =
        text_.empty() && last() &&
        (std::holds_alternative<ImageIndexRef>(*last()) || std::holds_alternative<BoundingBox>(*last()));
    flush_text();
    opener_ = pos_++;
    std::uint32_t count = 0;
    std::optional<TokenId> pad;
    while (pos_ < toks_.size()) {
      const TokenId id = toks_[pos_];
      if (id == vocab_.special(Special::ImagePad) || id == vocab_.special(Special::ImagePadUnmasked)) {
        if (pad && *pad != id) fail(GrammarErrc::UnexpectedToken, pos_, "mixed placeholder kinds");
        pad = id;
        ++count;
        ++pos_;
        continue;
      }
      break;
    }
    expect_close(Special::VisionEnd);
    if (count == 0) fail(GrammarErrc::EmptyElement, opener_, "empty vision span");
    if (!after_ground) {
      fail(GrammarErrc::OrderingViolation, opener_, "vision span must follow an index or box");
    }
    seq_.vision(count, *pad == vocab_.special(Special::ImagePad), opts_.role);
  }

  std::span<const TokenId> toks_;
  const Vocabulary& vocab_;
  const GrammarOptions& opts_;
  InterleavedSequence seq_;
  std::vector<TokenId> text_;
  std::size_t pos_ = 0;
  std::size_t opener_ = 0;
};

}  // namespace

InterleavedSequence parse_sequence(std::span<const TokenId> tokens, const Vocabulary& vocab,
                                   const GrammarOptions& options) {
  return Parser(tokens, vocab, options).run();
}

std::string render_text(const InterleavedSequence& seq, const Vocabulary& vocab) {
  return vocab.decode(serialize_sequence(seq, vocab));
}

InterleavedSequence parse_text(std::string_view text, const Vocabulary& vocab,
                               const GrammarOptions& options) {
  return parse_sequence(vocab.lex(text), vocab, options);
}

}  // namespace cmmcot
