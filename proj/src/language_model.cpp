#include "bld/language_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace bld {

double TokenDistribution::sum() const { return std::accumulate(probs.begin(), probs.end(), 0.0); }

LanguageModel::LanguageModel(TokenizerPtr tokenizer) : tokenizer_(std::move(tokenizer)) {
  if (!tokenizer_) fail(ErrorKind::InvalidArgument, "language model needs a tokenizer");
}

void LanguageModel::validate(std::span<const TokenId> prefix) const {
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (!vocab().is_content(prefix[i]))
      fail(ErrorKind::Lookup, "prefix position " + std::to_string(i) + " holds invalid token id " +
                                  std::to_string(prefix[i]));
  }
}

TokenDistribution LanguageModel::next_token_dist(std::span<const TokenId> prefix) const {
  validate(prefix);
  return compute(prefix);
}

std::vector<TokenDistribution> LanguageModel::next_token_dists(std::span<const std::vector<TokenId>> prefixes) const {
  for (const auto& p : prefixes) validate(p);
  return compute_batch(prefixes);
}

std::vector<TokenDistribution> LanguageModel::compute_batch(std::span<const std::vector<TokenId>> prefixes) const {
  std::vector<TokenDistribution> out;
  out.reserve(prefixes.size());
  for (const auto& p : prefixes) out.push_back(compute(p));
  return out;
}

UniformLM::UniformLM(TokenizerPtr tokenizer, std::vector<TokenId> support, double eos_weight)
    : LanguageModel(std::move(tokenizer)) {
  if (!(eos_weight >= 0.0 && eos_weight <= 1.0)) fail(ErrorKind::InvalidArgument, "eos weight must be in [0, 1]");
  const auto& v = vocab();
  if (support.empty()) {
    support.resize(v.content_size());
    std::iota(support.begin(), support.end(), 0);
  }
  dist_.probs.assign(v.size(), 0.0);
  double each = (1.0 - eos_weight) / static_cast<double>(support.size());
  for (TokenId id : support) {
    if (!v.is_content(id)) fail(ErrorKind::Lookup, "support token id " + std::to_string(id) + " is not content");
    dist_.probs[static_cast<std::size_t>(id)] = each;
  }
  dist_.probs.back() = eos_weight;
}

TokenDistribution UniformLM::compute(std::span<const TokenId>) const { return dist_; }

BigramLM::BigramLM(TokenizerPtr tokenizer, std::vector<std::vector<double>> counts, double alpha)
    : LanguageModel(std::move(tokenizer)) {
  const std::size_t n = vocab().size();
  if (counts.size() != n) fail(ErrorKind::InvalidArgument, "bigram table needs one row per content token plus start");
  if (alpha < 0.0) fail(ErrorKind::InvalidArgument, "bigram smoothing must be non-negative");
  rows_.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (counts[r].size() != n) fail(ErrorKind::InvalidArgument, "bigram row " + std::to_string(r) + " has wrong width");
    auto& probs = rows_[r].probs;
    probs.resize(n);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      if (!(counts[r][c] >= 0.0)) fail(ErrorKind::InvalidArgument, "negative bigram count");
      probs[c] = counts[r][c] + alpha;
      total += probs[c];
    }
    if (total <= 0.0) {
      std::fill(probs.begin(), probs.end(), 1.0 / static_cast<double>(n));
    } else {
      for (auto& p : probs) p /= total;
    }
  }
}

std::vector<std::vector<double>> BigramLM::count(const Tokenizer& tokenizer, std::span<const ByteString> samples) {
  const std::size_t n = tokenizer.vocab().size();
  const auto start = static_cast<std::size_t>(tokenizer.vocab().eos_id());
  std::vector<std::vector<double>> counts(n, std::vector<double>(n, 0.0));
  for (const auto& s : samples) {
    auto ids = tokenizer.tokenize(s);
    std::size_t prev = start;
    for (TokenId id : ids) {
      counts[prev][static_cast<std::size_t>(id)] += 1.0;
      prev = static_cast<std::size_t>(id);
    }
    counts[prev][start] += 1.0;
  }
  return counts;
}

TokenDistribution BigramLM::compute(std::span<const TokenId> prefix) const {
  std::size_t row = prefix.empty() ? static_cast<std::size_t>(vocab().eos_id()) : static_cast<std::size_t>(prefix.back());
  return rows_[row];
}

RandomLM::RandomLM(TokenizerPtr tokenizer, std::uint64_t seed, std::vector<TokenId> support, double eos_weight,
                   double temperature)
    : LanguageModel(std::move(tokenizer)),
      seed_(seed),
      support_(std::move(support)),
      eos_weight_(eos_weight),
      temperature_(temperature) {
  if (support_.empty()) {
    support_.resize(vocab().content_size());
    std::iota(support_.begin(), support_.end(), 0);
  }
  for (TokenId id : support_)
    if (!vocab().is_content(id)) fail(ErrorKind::Lookup, "support token id " + std::to_string(id) + " is not content");
  if (!(eos_weight_ >= 0.0)) fail(ErrorKind::InvalidArgument, "eos weight must be non-negative");
}

TokenDistribution RandomLM::compute(std::span<const TokenId> prefix) const {
  std::uint64_t h = seed_ ^ 0x9e3779b97f4a7c15ULL;
  for (TokenId id : prefix) {
    h ^= static_cast<std::uint64_t>(id) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdULL;
  }
  std::mt19937_64 rng(h);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  TokenDistribution d;
  d.probs.assign(vocab().size(), 0.0);
  double total = 0.0;
  for (TokenId id : support_) {
    // Exponential of scaled uniform noise gives a spread of magnitudes.
    double w = std::exp(4.0 * unif(rng) / temperature_);
    d.probs[static_cast<std::size_t>(id)] = w;
    total += w;
  }
  double eos = eos_weight_ * total;
  d.probs.back() = eos;
  total += eos;
  for (auto& p : d.probs) p /= total;
  return d;
}

ScriptedLM::ScriptedLM(TokenizerPtr tokenizer, std::vector<TokenId> script)
    : LanguageModel(std::move(tokenizer)), script_(std::move(script)) {
  for (TokenId id : script_)
    if (!vocab().is_content(id)) fail(ErrorKind::Lookup, "script token id " + std::to_string(id) + " is not content");
}

TokenDistribution ScriptedLM::compute(std::span<const TokenId> prefix) const {
  TokenDistribution d;
  d.probs.assign(vocab().size(), 0.0);
  bool on_script = prefix.size() < script_.size() && std::equal(prefix.begin(), prefix.end(), script_.begin());
  if (on_script) {
    d.probs[static_cast<std::size_t>(script_[prefix.size()])] = 1.0;
  } else {
    d.probs.back() = 1.0;
  }
  return d;
}

}  // namespace bld
