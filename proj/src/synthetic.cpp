#include "bld/synthetic.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

namespace bld {

SyntheticLanguage SyntheticLanguage::make(std::uint64_t seed, std::size_t lexicon) {
  if (lexicon == 0) fail(ErrorKind::InvalidArgument, "lexicon must be non-empty");
  std::mt19937_64 rng(seed);
  const std::string consonants = "bcdfghklmnprstvz";
  const std::string vowels = "aeiou";
  SyntheticLanguage lang;
  lang.seed = seed;
  std::set<std::string> seen;
  while (lang.words.size() < lexicon) {
    std::size_t syllables = 1 + rng() % 3;
    std::string w;
    for (std::size_t s = 0; s < syllables; ++s) {
      w += consonants[rng() % consonants.size()];
      w += vowels[rng() % vowels.size()];
      if (rng() % 3 == 0) w += consonants[rng() % consonants.size()];
    }
    if (seen.insert(w).second) lang.words.push_back(w);
  }
  for (std::size_t i = 0; i < lexicon; ++i) lang.unigram.push_back(1.0 / static_cast<double>(i + 1));
  lang.next.resize(lexicon);
  std::discrete_distribution<std::uint32_t> zipf(lang.unigram.begin(), lang.unigram.end());
  for (auto& succ : lang.next) {
    std::size_t fan = 2 + rng() % 4;
    while (succ.size() < fan) {
      auto w = zipf(rng);
      if (std::find(succ.begin(), succ.end(), w) == succ.end()) succ.push_back(w);
    }
  }
  return lang;
}

std::vector<ByteString> SyntheticLanguage::sample(std::size_t count, std::uint64_t seed, std::size_t min_words,
                                                  std::size_t max_words) const {
  if (min_words == 0 || max_words < min_words) fail(ErrorKind::InvalidArgument, "bad sentence length range");
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::uint32_t> start(unigram.begin(), unigram.end());
  std::vector<ByteString> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t n = min_words + rng() % (max_words - min_words + 1);
    std::uint32_t w = start(rng);
    std::string s = words[w];
    for (std::size_t k = 1; k < n; ++k) {
      // Mostly follow the bigram table, occasionally restart from the unigram.
      w = (rng() % 8 == 0) ? start(rng) : next[w][rng() % next[w].size()];
      s += ' ';
      s += words[w];
    }
    out.push_back(to_bytes(s));
  }
  return out;
}

Tokenizer chain_tokenizer(const std::vector<ByteString>& corpus, std::size_t user_tokens, ChainDirection direction) {
  std::set<Byte> chars;
  std::map<std::string, std::size_t> freq;
  for (const auto& sample : corpus) {
    std::string word;
    for (Byte b : sample) {
      chars.insert(b);
      if (b == ' ') {
        if (!word.empty()) ++freq[word];
        word.clear();
      } else {
        word += static_cast<char>(b);
      }
    }
    if (!word.empty()) ++freq[word];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<ByteString> tokens;
  std::set<ByteString> have;
  MergeRules merges;
  for (Byte c : chars) {
    tokens.push_back(ByteString{c});
    have.insert(ByteString{c});
  }
  for (const auto& [word, count] : ranked) {
    if (tokens.size() >= user_tokens) break;
    ByteString w = to_bytes(word);
    for (std::size_t len = 2; len <= w.size() && tokens.size() < user_tokens; ++len) {
      ByteString tok, left, right;
      if (direction == ChainDirection::Prefix) {
        tok.assign(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(len));
        left.assign(tok.begin(), tok.end() - 1);
        right.assign(tok.end() - 1, tok.end());
      } else {
        tok.assign(w.end() - static_cast<std::ptrdiff_t>(len), w.end());
        left.assign(tok.begin(), tok.begin() + 1);
        right.assign(tok.begin() + 1, tok.end());
      }
      if (!have.insert(tok).second) continue;
      tokens.push_back(tok);
      merges.push_back({left, right});
    }
  }
  if (tokens.size() < user_tokens)
    fail(ErrorKind::Construction, "corpus supplies only " + std::to_string(tokens.size()) + " chain tokens, " +
                                      std::to_string(user_tokens) + " requested");
  tokens.resize(user_tokens);
  return Tokenizer::build(tokens, merges);
}

}  // namespace bld
