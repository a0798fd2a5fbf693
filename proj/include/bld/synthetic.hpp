#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bld/tokenizer.hpp"

namespace bld {

/// Seeded toy language: a lexicon of lowercase words with Zipf-like unigram
/// weights and a sparse word bigram table; samples are space-separated sentences.
struct SyntheticLanguage {
  std::vector<std::string> words;
  std::vector<double> unigram;                   // start distribution
  std::vector<std::vector<std::uint32_t>> next;  // allowed successors per word
  std::uint64_t seed = 0;

  static SyntheticLanguage make(std::uint64_t seed, std::size_t lexicon = 120);
  /// `count` sentences of `min_words`..`max_words` words.
  std::vector<ByteString> sample(std::size_t count, std::uint64_t seed, std::size_t min_words = 3,
                                 std::size_t max_words = 8) const;
};

enum class ChainDirection { Prefix, Suffix };

/// Builds a tokenizer with exactly `user_tokens` user tokens: the corpus
/// characters first, then word chains in descending word frequency. Prefix
/// chains add "w[:i]" via merge (w[:i-1], w[i-1]); suffix chains add "w[i:]"
/// via merge (w[i], w[i+1:]). Throws Construction when the corpus cannot supply
/// enough distinct tokens.
Tokenizer chain_tokenizer(const std::vector<ByteString>& corpus, std::size_t user_tokens, ChainDirection direction);

}  // namespace bld
