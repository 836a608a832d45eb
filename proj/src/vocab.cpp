#include "diffcap/vocab.hpp"

#include <fstream>
#include <sstream>

namespace diffcap {

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw UsageError("build_vocab: empty corpus");
  Vocabulary v;
  for (const std::string& line : corpus) {
    for (std::string& w : split_words(line)) {
      if (v.index_.emplace(w, (int)v.words_.size()).second) v.words_.push_back(std::move(w));
    }
  }
  if (v.words_.empty()) throw UsageError("build_vocab: corpus holds no words");
  for (const char* special : {kMaskWord, kPadWord}) {
    if (v.index_.count(special))
      throw UsageError(std::string("build_vocab: reserved word ") + special + " in corpus");
    v.index_.emplace(special, (int)v.words_.size());
    v.words_.push_back(special);
  }
  return v;
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  if (words.size() < 3 || words[words.size() - 2] != kMaskWord || words.back() != kPadWord)
    throw UsageError("vocabulary: word list must end with the reserved tokens");
  Vocabulary v;
  v.words_ = std::move(words);
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (!v.index_.emplace(v.words_[i], (int)i).second)
      throw UsageError("vocabulary: duplicate word " + v.words_[i]);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("vocabulary: cannot open " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return from_words(std::move(words));
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("vocabulary: cannot write " + path);
  for (const std::string& w : words_) out << w << '\n';
  if (!out) throw std::runtime_error("vocabulary: write failed for " + path);
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw UsageError("vocabulary: unknown word \"" + word + "\"");
  return it->second;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size())
    throw UsageError("vocabulary: id " + std::to_string(id) + " outside [0, " +
                     std::to_string(size()) + ")");
  return words_[(std::size_t)id];
}

std::uint64_t Vocabulary::fingerprint() const {
  // FNV-1a over the id-ordered word list.
  std::uint64_t h = 1469598103934665603ull;
  for (const std::string& w : words_) {
    for (char c : w) {
      h ^= (std::uint64_t)(unsigned char)c;
      h *= 1099511628211ull;
    }
    h ^= (std::uint64_t)'\n';
    h *= 1099511628211ull;
  }
  return h;
}

TokenSeq encode(const std::string& text, const Vocabulary& vocab, int l_max) {
  std::vector<std::string> words = split_words(text);
  if ((int)words.size() > l_max)
    throw UsageError("encode: " + std::to_string(words.size()) + " words exceed capacity " +
                     std::to_string(l_max));
  TokenSeq seq;
  seq.length = (int)words.size();
  seq.ids.reserve((std::size_t)l_max);
  for (const std::string& w : words) seq.ids.push_back(vocab.id(w));
  seq.ids.resize((std::size_t)l_max, vocab.pad_id());
  return seq;
}

std::string decode(const TokenSeq& seq, const Vocabulary& vocab) {
  std::string out;
  bool in_pad = false;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    int id = seq.ids[i];
    if (id == vocab.pad_id()) {
      in_pad = true;
      continue;
    }
    if (in_pad)
      throw UsageError("decode: padding before position " + std::to_string(i) +
                       " is not a suffix");
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

}  // namespace diffcap
