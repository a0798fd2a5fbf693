#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "bld/exact.hpp"
#include "bld/language_model.hpp"
#include "bld/tokenizer.hpp"

namespace testing {

using namespace bld;

inline TokenizerPtr toy_tokenizer() { return builtin_tokenizer("toy"); }
inline TokenizerPtr char_tokenizer() { return builtin_tokenizer("char"); }

inline TokenId id_of(const Tokenizer& tok, const std::string& s) { return *tok.vocab().find(to_bytes(s)); }

/// Uniform teacher over the given tokens.
inline LanguageModelPtr uniform_over(const TokenizerPtr& tok, const std::vector<std::string>& tokens,
                                     double eos = 0.0) {
  std::vector<TokenId> support;
  for (const auto& t : tokens) support.push_back(id_of(*tok, t));
  return std::make_shared<UniformLM>(tok, support, eos);
}

inline LanguageModelPtr toy_uniform() { return uniform_over(toy_tokenizer(), {"a", "b", "ab"}); }

/// Random prefix-chain tokenizer over a small alphabet: each extra token is an
/// existing token plus one letter, merged as (token, letter).
inline TokenizerPtr random_chain_tokenizer(std::mt19937_64& rng, std::size_t user_tokens, const std::string& alphabet,
                                           std::size_t max_len) {
  std::vector<ByteString> tokens;
  MergeRules merges;
  for (char c : alphabet) tokens.push_back(ByteString{static_cast<Byte>(c)});
  std::size_t guard = 0;
  while (tokens.size() < user_tokens && guard++ < 10000) {
    const auto& base = tokens[rng() % tokens.size()];
    if (base.size() >= max_len) continue;
    ByteString t = base;
    Byte c = static_cast<Byte>(alphabet[rng() % alphabet.size()]);
    t.push_back(c);
    if (std::find(tokens.begin(), tokens.end(), t) != tokens.end()) continue;
    merges.push_back({base, ByteString{c}});
    tokens.push_back(t);
  }
  return std::make_shared<const Tokenizer>(Tokenizer::build(tokens, merges));
}

inline ByteString random_text(std::mt19937_64& rng, const std::string& alphabet, std::size_t len) {
  ByteString b;
  for (std::size_t i = 0; i < len; ++i) b.push_back(static_cast<Byte>(alphabet[rng() % alphabet.size()]));
  return b;
}

/// Brute force over every token sequence drawn from `support` of length at most
/// |b| (plus one for eos): returns P(output starts with b) and P(output == b).
struct Enumerated {
  double prefix = 0.0;
  double exact_stop = 0.0;
};

inline bool starts_with(const ByteString& s, const ByteString& p) {
  return s.size() >= p.size() && std::equal(p.begin(), p.end(), s.begin());
}

inline Enumerated enumerate_sequences(const LanguageModel& model, const std::vector<TokenId>& support,
                                      const ByteString& b) {
  Enumerated out;
  const auto& vocab = model.vocab();
  std::vector<TokenId> seq;
  ByteString text;
  // Visits every sequence of length <= |b| without pruning.
  std::function<void(double)> walk = [&](double p) {
    if (p == 0.0) return;
    if (text == b) out.exact_stop += p * model.next_token_dist(seq).probs.back();
    if (seq.size() == b.size()) return;
    auto dist = model.next_token_dist(seq);
    for (TokenId t : support) {
      const auto& tb = vocab.bytes(t);
      seq.push_back(t);
      std::size_t before = text.size();
      text.insert(text.end(), tb.begin(), tb.end());
      double q = p * dist.probs[static_cast<std::size_t>(t)];
      ByteString head(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(before));
      if (starts_with(text, b) && head.size() < b.size()) out.prefix += q;
      walk(q);
      text.resize(before);
      seq.pop_back();
    }
  };
  walk(1.0);
  if (b.empty()) out.prefix = 1.0;
  return out;
}

/// Temporary directory removed on destruction.
struct TempDir {
  std::filesystem::path path;
  TempDir() {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("bld-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

inline double max_abs_diff(const ByteDistribution& a, const ByteDistribution& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < kByteDistSize; ++i) m = std::max(m, std::abs(a.prob(i) - b.prob(i)));
  return m;
}

}  // namespace testing
