#pragma once

// Random generators for grammar property tests.

#include <cstddef>
#include <vector>

#include "cmmcot/grammar.hpp"
#include "cmmcot/random.hpp"

namespace cmmcot::testing {

inline BoundingBox random_box(Rng& rng) {
  int a = rng.range(0, kCoordMax), b = rng.range(0, kCoordMax);
  int c = rng.range(0, kCoordMax), d = rng.range(0, kCoordMax);
  if (a > b) std::swap(a, b);
  if (c > d) std::swap(c, d);
  return {a, c, b, d};
}

inline TokenId random_text_token(Rng& rng, const Vocabulary& vocab) {
  int first = kSpecialCount;
  int last = first;
  while (vocab.is_text(last + 1)) ++last;
  return rng.range(first, last);
}

/// Valid sequence: text chunks never adjacent, groundings well ordered.
inline InterleavedSequence random_sequence(Rng& rng, const Vocabulary& vocab,
                                           std::uint32_t image_count = 8) {
  InterleavedSequence seq;
  const int chunks = rng.range(0, 10);
  bool last_text = false;
  for (int c = 0; c < chunks; ++c) {
    const int kind = rng.range(0, 3);
    if (kind == 0 && !last_text) {
      std::vector<TokenId> toks(static_cast<std::size_t>(rng.range(1, 8)));
      for (auto& t : toks) t = random_text_token(rng, vocab);
      seq.text(std::move(toks));
      last_text = true;
      continue;
    }
    seq.image(static_cast<std::uint32_t>(rng.index(image_count)));
    if (kind >= 2) seq.box(random_box(rng));
    if (kind == 3 || (kind == 1 && rng.bernoulli(0.5))) {
      seq.vision(static_cast<std::uint32_t>(rng.range(1, 12)), rng.bernoulli(0.8));
    }
    last_text = false;
  }
  return seq;
}

enum class Mutation {
  DropClose,
  DropOpen,
  StrayClose,
  LetterInCoordinate,
  CoordinateOverflow,
  Truncate,
};

struct MutatedTokens {
  std::vector<TokenId> tokens;
  Mutation kind;
};

/// Returns a token list that is guaranteed to be rejected by the parser, or
/// an empty optional-like result (kind set, tokens empty) when the sequence
/// has no site for the mutation.
inline bool mutate(Rng& rng, const Vocabulary& vocab, std::vector<TokenId> toks, Mutation kind,
                   std::vector<TokenId>& out) {
  auto positions_of = [&](auto pred) {
    std::vector<std::size_t> pos;
    for (std::size_t i = 0; i < toks.size(); ++i)
      if (pred(toks[i])) pos.push_back(i);
    return pos;
  };
  const auto is_close = [&](TokenId t) {
    return t == vocab.special(Special::ImageEnd) || t == vocab.special(Special::BoxEnd) ||
           t == vocab.special(Special::VisionEnd);
  };
  const auto is_open = [&](TokenId t) {
    return t == vocab.special(Special::ImageStart) || t == vocab.special(Special::BoxStart) ||
           t == vocab.special(Special::VisionStart);
  };
  // Digits inside boxes: between a box start and its end.
  std::vector<std::size_t> box_digits;
  std::vector<std::pair<std::size_t, std::size_t>> box_numbers;
  {
    bool in_box = false;
    std::size_t run_start = 0;
    bool in_run = false;
    for (std::size_t i = 0; i < toks.size(); ++i) {
      if (toks[i] == vocab.special(Special::BoxStart)) in_box = true;
      else if (toks[i] == vocab.special(Special::BoxEnd)) in_box = false;
      const bool digit = in_box && vocab.digit_value(toks[i]).has_value();
      if (digit) {
        box_digits.push_back(i);
        if (!in_run) run_start = i;
      } else if (in_run) {
        box_numbers.emplace_back(run_start, i);
      }
      in_run = digit;
    }
  }
  out = toks;
  switch (kind) {
    case Mutation::DropClose: {
      auto pos = positions_of(is_close);
      if (pos.empty()) return false;
      out.erase(out.begin() + static_cast<std::ptrdiff_t>(pos[rng.index(pos.size())]));
      return true;
    }
    case Mutation::DropOpen: {
      auto pos = positions_of(is_open);
      if (pos.empty()) return false;
      out.erase(out.begin() + static_cast<std::ptrdiff_t>(pos[rng.index(pos.size())]));
      return true;
    }
    case Mutation::StrayClose: {
      const Special closers[] = {Special::ImageEnd, Special::BoxEnd, Special::VisionEnd};
      const auto at = rng.index(out.size() + 1);
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(at), vocab.special(closers[rng.index(3)]));
      return true;
    }
    case Mutation::LetterInCoordinate: {
      if (box_digits.empty()) return false;
      out[box_digits[rng.index(box_digits.size())]] = vocab.byte_token('x');
      return true;
    }
    case Mutation::CoordinateOverflow: {
      if (box_numbers.empty()) return false;
      auto [b, e] = box_numbers[rng.index(box_numbers.size())];
      std::vector<TokenId> big = {vocab.byte_token('1'), vocab.byte_token('0'),
                                  vocab.byte_token('0'), vocab.byte_token('1')};
      out.erase(out.begin() + static_cast<std::ptrdiff_t>(b), out.begin() + static_cast<std::ptrdiff_t>(e));
      out.insert(out.begin() + static_cast<std::ptrdiff_t>(b), big.begin(), big.end());
      return true;
    }
    case Mutation::Truncate: {
      // Cut strictly inside a marker group.
      std::vector<std::size_t> cuts;
      int depth = 0;
      for (std::size_t i = 0; i < toks.size(); ++i) {
        if (is_open(toks[i])) depth = 1;
        else if (is_close(toks[i])) depth = 0;
        else if (depth) cuts.push_back(i);
      }
      if (cuts.empty()) return false;
      out.resize(cuts[rng.index(cuts.size())]);
      return true;
    }
  }
  return false;
}

}  // namespace cmmcot::testing
