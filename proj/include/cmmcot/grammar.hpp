#pragma once

// Interleaved image/text token grammar.
//
// Serialized layout (token level):
//   image index   <IMG> d+ </IMG>
//   box           <|box_start|> ( d+ , d+ ) , ( d+ , d+ ) <|box_end|>
//   vision span   <|vision_start|> pad* <|vision_end|>
// Digits and punctuation inside index/box groups are ordinary byte tokens of
// the text vocabulary. A grounded entity is ImageIndex, Box, VisionSpan in
// that order with nothing in between.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace cmmcot {

using TokenId = std::int32_t;

inline constexpr int kCoordMax = 1000;
inline constexpr std::uint32_t kMaxImages = 1u << 16;

/// Rounds half away from zero.
long long round_half_away(double value);

/// Box in normalized [0, 1000] coordinates.
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  bool valid() const {
    return 0 <= x0 && x0 <= x1 && x1 <= kCoordMax && 0 <= y0 && y0 <= y1 && y1 <= kCoordMax;
  }
  bool degenerate() const { return x0 == x1 || y0 == y1; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Box in pixel coordinates, half-open: [x0, x1) x [y0, y1).
struct PixelBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }

  friend bool operator==(const PixelBox&, const PixelBox&) = default;
};

BoundingBox normalize_box(const PixelBox& box, int width, int height);
PixelBox denormalize_box(const BoundingBox& box, int width, int height);

struct ImageIndexRef {
  std::uint32_t index = 0;
  friend bool operator==(const ImageIndexRef&, const ImageIndexRef&) = default;
};

struct TextSpan {
  std::vector<TokenId> tokens;
  friend bool operator==(const TextSpan&, const TextSpan&) = default;
};

/// Placeholder run for visual tokens. The source image (or crop) is the one
/// named by the immediately preceding ImageIndex (and Box, if present).
struct VisionSpan {
  std::uint32_t token_count = 0;
  bool loss_masked = true;
  friend bool operator==(const VisionSpan&, const VisionSpan&) = default;
};

enum class Role : std::uint8_t { Prompt, Target };

using ElementValue = std::variant<TextSpan, ImageIndexRef, BoundingBox, VisionSpan>;

struct SequenceElement {
  ElementValue value;
  Role role = Role::Target;
  friend bool operator==(const SequenceElement&, const SequenceElement&) = default;
};

struct InterleavedSequence {
  std::vector<SequenceElement> elements;

  InterleavedSequence& text(std::vector<TokenId> tokens, Role role = Role::Target);
  InterleavedSequence& image(std::uint32_t index, Role role = Role::Target);
  InterleavedSequence& box(const BoundingBox& box, Role role = Role::Target);
  InterleavedSequence& vision(std::uint32_t token_count, bool loss_masked = true,
                              Role role = Role::Target);
  InterleavedSequence& append(const InterleavedSequence& other);

  bool empty() const { return elements.empty(); }
  std::size_t size() const { return elements.size(); }

  friend bool operator==(const InterleavedSequence&, const InterleavedSequence&) = default;
};

enum class Special : TokenId {
  EndOfText = 0,
  ImageStart,
  ImageEnd,
  BoxStart,
  BoxEnd,
  VisionStart,
  VisionEnd,
  ImagePad,          // loss-masked visual placeholder
  ImagePadUnmasked,  // visual placeholder that keeps its loss
  Count,
};

inline constexpr int kSpecialCount = static_cast<int>(Special::Count);

/// Marker strings of the canonical textual rendering.
std::string_view marker_text(Special marker);

/// Token table: reserved specials first, then 256 byte tokens, then word
/// pieces, padded with unused reserved ids up to the requested size.
///
/// Text is split into letter runs (optionally with one leading space),
/// single digits and single other bytes. Letter runs are looked up as whole
/// words; anything not in the table falls back to byte tokens.
class Vocabulary {
 public:
  Vocabulary(std::vector<std::string> words, int padded_size);

  /// Built-in vocabulary of 512 ids covering the synthetic-scene language.
  static const Vocabulary& standard();

  int size() const { return size_; }
  TokenId special(Special marker) const { return static_cast<TokenId>(marker); }
  bool is_special(TokenId id) const { return id >= 0 && id < kSpecialCount; }
  bool is_text(TokenId id) const { return id >= kSpecialCount && id < text_end_; }
  bool is_reserved(TokenId id) const { return id >= text_end_ && id < size_; }
  bool contains(TokenId id) const { return id >= 0 && id < size_; }

  TokenId byte_token(unsigned char byte) const { return kSpecialCount + byte; }
  /// Digit value 0..9 when `id` is the byte token of an ASCII digit.
  std::optional<int> digit_value(TokenId id) const;
  std::optional<TokenId> word(std::string_view piece) const;

  std::vector<TokenId> encode(std::string_view text) const;
  /// Concatenated pieces; specials render as their marker strings.
  std::string decode(std::span<const TokenId> ids) const;
  std::string piece(TokenId id) const;

  /// Splits marker strings out of `text` and encodes the rest.
  std::vector<TokenId> lex(std::string_view text) const;

  const std::vector<std::string>& words() const { return words_; }

 private:
  void encode_piece(std::string_view piece, std::vector<TokenId>& out) const;

  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> word_ids_;
  TokenId text_end_ = 0;
  int size_ = 0;
};

enum class GrammarErrc {
  UnbalancedMarker,
  UnexpectedToken,
  NonIntegerCoordinate,
  CoordinateRange,
  InvalidBox,
  IndexRange,
  OrderingViolation,
  UnknownToken,
  EmptyElement,
};

std::string_view to_string(GrammarErrc code);

class GrammarError : public std::runtime_error {
 public:
  GrammarError(GrammarErrc code, std::size_t offset, const std::string& detail);

  GrammarErrc code() const { return code_; }
  /// Token offset for token-level errors, element index for serialization.
  std::size_t offset() const { return offset_; }

 private:
  GrammarErrc code_;
  std::size_t offset_;
};

struct GrammarOptions {
  /// When set, image indices must be below this count.
  std::optional<std::size_t> image_count = std::nullopt;
  /// Role assigned to parsed elements.
  Role role = Role::Target;
};

/// Throws GrammarError (offset = element index) on invalid sequences.
void validate_sequence(const InterleavedSequence& seq, const Vocabulary& vocab,
                       const GrammarOptions& options = {});

std::vector<TokenId> serialize_sequence(const InterleavedSequence& seq, const Vocabulary& vocab,
                                        const GrammarOptions& options = {});

/// Per-token roles matching serialize_sequence output.
std::vector<Role> serialized_roles(const InterleavedSequence& seq, const Vocabulary& vocab);

/// Inverse of serialize_sequence. Throws GrammarError with the token offset.
InterleavedSequence parse_sequence(std::span<const TokenId> tokens, const Vocabulary& vocab,
                                   const GrammarOptions& options = {});

std::string render_text(const InterleavedSequence& seq, const Vocabulary& vocab);
InterleavedSequence parse_text(std::string_view text, const Vocabulary& vocab,
                               const GrammarOptions& options = {});

}  // namespace cmmcot
