#pragma once

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "l2t/common.hpp"

namespace l2t {

// Deterministic word-level tokenizer: lowercase fold, punctuation split into
// single-character tokens, OOV mapped to <unk>. Special tokens use bracketed
// sigils that the splitter can never produce from user text.
struct Vocab {
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kPad = 2;
  static constexpr int kImageSlot = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;

  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }
  bool contains(const std::string& tok) const {
    return token_to_id.count(tok) != 0;
  }
  int id_of(const std::string& tok) const;  // kUnk for OOV
  const std::string& token_of(int id) const;  // raises InvalidId
};

// Lowercases and splits into word/punctuation tokens.
std::vector<std::string> split_words(const std::string& text);

// Canonical form: split_words joined by single spaces.
std::string normalize_text(const std::string& text);

// Keeps the max_size most frequent tokens (ties broken lexicographically);
// the five specials are always present and occupy ids 0..4.
Vocab build_vocab(std::span<const std::string> corpus_lines, int max_size);

std::vector<int> encode(const Vocab& v, const std::string& text);
std::string decode(const Vocab& v, std::span<const int> ids);

void save_vocab(const Vocab& v, const std::string& path);
Vocab load_vocab(const std::string& path);

}  // namespace l2t
