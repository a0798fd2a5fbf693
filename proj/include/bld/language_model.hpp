#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "bld/tokenizer.hpp"

namespace bld {

/// Next-token distribution over content tokens plus a final end-of-sequence slot.
struct TokenDistribution {
  std::vector<double> probs;

  double sum() const;
};

/// Next-token language model over a tokenizer's vocabulary. Implementations must
/// be deterministic in the prefix and safe to call concurrently.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  const Tokenizer& tokenizer() const { return *tokenizer_; }
  const Vocabulary& vocab() const { return tokenizer_->vocab(); }
  const TokenizerPtr& tokenizer_ptr() const { return tokenizer_; }

  /// Throws Lookup if the prefix holds a non-content id.
  TokenDistribution next_token_dist(std::span<const TokenId> prefix) const;

  /// One distribution per prefix, in order.
  std::vector<TokenDistribution> next_token_dists(std::span<const std::vector<TokenId>> prefixes) const;

 protected:
  explicit LanguageModel(TokenizerPtr tokenizer);

  virtual TokenDistribution compute(std::span<const TokenId> prefix) const = 0;
  virtual std::vector<TokenDistribution> compute_batch(std::span<const std::vector<TokenId>> prefixes) const;

 private:
  void validate(std::span<const TokenId> prefix) const;
  TokenizerPtr tokenizer_;
};

using LanguageModelPtr = std::shared_ptr<const LanguageModel>;

/// Uniform over a support set of content tokens, with an optional fixed eos weight.
/// An empty support means all content tokens.
class UniformLM final : public LanguageModel {
 public:
  UniformLM(TokenizerPtr tokenizer, std::vector<TokenId> support = {}, double eos_weight = 0.0);

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override;

 private:
  TokenDistribution dist_;
};

/// Bigram model: the row for the previous token (or the start row for an empty
/// prefix) is normalized after adding `alpha` to every count.
class BigramLM final : public LanguageModel {
 public:
  /// `counts` has vocab().size() rows (content tokens, then the start row) of
  /// vocab().size() columns (content tokens, then eos).
  BigramLM(TokenizerPtr tokenizer, std::vector<std::vector<double>> counts, double alpha = 0.0);

  /// Counts token bigrams over tokenized samples, with start and eos boundaries.
  static std::vector<std::vector<double>> count(const Tokenizer& tokenizer, std::span<const ByteString> samples);

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override;

 private:
  std::vector<TokenDistribution> rows_;
};

/// Pseudo-random context-dependent model: the distribution is a seeded function
/// of the whole prefix. Mass is restricted to `support` (all content tokens if
/// empty) plus eos with relative weight `eos_weight`.
class RandomLM final : public LanguageModel {
 public:
  RandomLM(TokenizerPtr tokenizer, std::uint64_t seed, std::vector<TokenId> support = {}, double eos_weight = 0.05,
           double temperature = 1.0);

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override;

 private:
  std::uint64_t seed_;
  std::vector<TokenId> support_;
  double eos_weight_;
  double temperature_;
};

/// Emits `script` deterministically, then eos. Off-script prefixes get eos with probability 1.
class ScriptedLM final : public LanguageModel {
 public:
  ScriptedLM(TokenizerPtr tokenizer, std::vector<TokenId> script);

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override;

 private:
  std::vector<TokenId> script_;
};

}  // namespace bld
