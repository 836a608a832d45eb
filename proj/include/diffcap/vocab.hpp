#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffcap/error.hpp"

namespace diffcap {

inline constexpr const char* kMaskWord = "[MASK]";
inline constexpr const char* kPadWord = "[PAD]";

/// Closed word-level vocabulary. Text tokens occupy ids [0, text_size());
/// [MASK] and [PAD] sit directly after, so id == text_size() doubles as the
/// absorbing state of the corruption chain.
class Vocabulary {
 public:
  /// Collects words in first-occurrence order, then appends the specials.
  static Vocabulary build(const std::vector<std::string>& corpus);

  /// Rebuilds from an id-ordered word list (checkpoint config, vocab file).
  static Vocabulary from_words(std::vector<std::string> words);

  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int id(const std::string& word) const;
  const std::string& word(int id) const;
  int size() const { return (int)words_.size(); }
  int text_size() const { return size() - 2; }
  int mask_id() const { return text_size(); }
  int pad_id() const { return text_size() + 1; }
  bool is_text(int id) const { return id >= 0 && id < text_size(); }
  const std::vector<std::string>& words() const { return words_; }
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Fixed-capacity token row: `length` real tokens then [PAD] padding.
struct TokenSeq {
  std::vector<int> ids;
  int length = 0;
};

std::vector<std::string> split_words(const std::string& text);

TokenSeq encode(const std::string& text, const Vocabulary& vocab, int l_max);
std::string decode(const TokenSeq& seq, const Vocabulary& vocab);

}  // namespace diffcap
