#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bld/language_model.hpp"

namespace bld {

/// A token sequence whose decode starts with the target bytes, with every token
/// but the last decoding to a strict prefix of the target.
struct CoveringElement {
  std::vector<TokenId> tokens;
  ByteString overhang;  // bytes of the last token beyond the target
  friend bool operator==(const CoveringElement&, const CoveringElement&) = default;
};

inline constexpr std::size_t kDefaultCoveringCap = 10'000;

/// All coverings of `b`, ordered by overhang length then token ids. The empty
/// target has the single empty covering. Throws Feasibility when more than `cap`
/// coverings exist.
std::vector<CoveringElement> enumerate_coverings(const Tokenizer& tokenizer, std::span<const Byte> b,
                                                 std::size_t cap = kDefaultCoveringCap);

/// log P(model output starts with `b`), summed over coverings. Returns -inf for
/// zero mass.
double exact_prefix_logprob(const LanguageModel& model, std::span<const Byte> b,
                            std::size_t cap = kDefaultCoveringCap);

/// Conditional next-byte distribution after `prefix`, eos slot = probability of
/// stopping exactly at the end of `prefix`. Throws Conditioning if P(prefix) = 0.
ByteDistribution exact_next_byte_dist(const LanguageModel& model, std::span<const Byte> prefix,
                                      std::size_t cap = kDefaultCoveringCap);

/// log-sum-exp over a range; -inf for an empty or all -inf range.
double log_sum_exp(std::span<const double> values);

}  // namespace bld
