#include "bld/exact.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace bld {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void enumerate_from(const Tokenizer& tok, std::span<const Byte> b, std::size_t start, std::vector<TokenId>& path,
                    std::vector<CoveringElement>& out, std::size_t cap) {
  const auto& trie = tok.trie();
  const auto& vocab = tok.vocab();
  auto push = [&](CoveringElement c) {
    if (out.size() >= cap)
      fail(ErrorKind::Feasibility, "covering count exceeds cap " + std::to_string(cap));
    out.push_back(std::move(c));
  };
  std::int32_t node = VocabTrie::kRoot;
  for (std::size_t i = start; i < b.size(); ++i) {
    node = trie.child(node, b[i]);
    if (node == VocabTrie::kNone) return;
    TokenId t = trie.node(node).terminal;
    if (t < 0) continue;
    path.push_back(t);
    if (i + 1 == b.size()) {
      push({path, {}});
    } else {
      enumerate_from(tok, b, i + 1, path, out, cap);
    }
    path.pop_back();
  }
  // The remainder of `b` is a strict prefix of every token below `node`.
  for (TokenId t : trie.node(node).tokens) {
    const auto& tb = vocab.bytes(t);
    if (tb.size() + start <= b.size()) continue;
    path.push_back(t);
    push({path, ByteString(tb.begin() + static_cast<std::ptrdiff_t>(b.size() - start), tb.end())});
    path.pop_back();
  }
}

/// Memoized next-token log-probabilities keyed by token prefix.
class DistCache {
 public:
  explicit DistCache(const LanguageModel& model) : model_(model) {}
  struct Entry {
    std::vector<double> probs;
    std::vector<double> logp;
  };
  const Entry& get(const std::vector<TokenId>& prefix) {
    auto it = cache_.find(prefix);
    if (it != cache_.end()) return it->second;
    Entry e;
    e.probs = model_.next_token_dist(prefix).probs;
    e.logp.resize(e.probs.size());
    for (std::size_t i = 0; i < e.probs.size(); ++i) e.logp[i] = e.probs[i] > 0.0 ? std::log(e.probs[i]) : kNegInf;
    return cache_.emplace(prefix, std::move(e)).first->second;
  }
  const std::vector<double>& logp(const std::vector<TokenId>& prefix) { return get(prefix).logp; }
  double path_logprob(const std::vector<TokenId>& tokens) {
    double lp = 0.0;
    std::vector<TokenId> prefix;
    for (TokenId t : tokens) {
      lp += logp(prefix)[static_cast<std::size_t>(t)];
      if (lp == kNegInf) return kNegInf;
      prefix.push_back(t);
    }
    return lp;
  }

 private:
  const LanguageModel& model_;
  std::map<std::vector<TokenId>, Entry> cache_;
};

}  // namespace

double log_sum_exp(std::span<const double> values) {
  double m = kNegInf;
  for (double v : values) m = std::max(m, v);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

std::vector<CoveringElement> enumerate_coverings(const Tokenizer& tokenizer, std::span<const Byte> b,
                                                 std::size_t cap) {
  if (cap == 0) fail(ErrorKind::InvalidArgument, "covering cap must be positive");
  std::vector<CoveringElement> out;
  if (b.empty()) {
    out.push_back({});
    return out;
  }
  std::vector<TokenId> path;
  enumerate_from(tokenizer, b, 0, path, out, cap);
  std::sort(out.begin(), out.end(), [](const CoveringElement& x, const CoveringElement& y) {
    if (x.overhang.size() != y.overhang.size()) return x.overhang.size() < y.overhang.size();
    return x.tokens < y.tokens;
  });
  return out;
}

double exact_prefix_logprob(const LanguageModel& model, std::span<const Byte> b, std::size_t cap) {
  auto coverings = enumerate_coverings(model.tokenizer(), b, cap);
  DistCache cache(model);
  std::vector<double> terms;
  terms.reserve(coverings.size());
  for (const auto& c : coverings) terms.push_back(cache.path_logprob(c.tokens));
  return log_sum_exp(terms);
}

ByteDistribution exact_next_byte_dist(const LanguageModel& model, std::span<const Byte> prefix, std::size_t cap) {
  auto coverings = enumerate_coverings(model.tokenizer(), prefix, cap);
  const auto& vocab = model.vocab();
  DistCache cache(model);

  std::vector<double> weights;
  weights.reserve(coverings.size());
  double max_w = kNegInf;
  for (const auto& c : coverings) {
    weights.push_back(cache.path_logprob(c.tokens));
    max_w = std::max(max_w, weights.back());
  }
  if (max_w == kNegInf)
    fail(ErrorKind::Conditioning, "prefix '" + escape_bytes(prefix) + "' has zero probability");

  // Linear accumulation relative to the heaviest covering.
  std::array<double, kByteDistSize> mass{};
  for (std::size_t i = 0; i < coverings.size(); ++i) {
    if (weights[i] == kNegInf) continue;
    double w = std::exp(weights[i] - max_w);
    const auto& c = coverings[i];
    if (!c.overhang.empty()) {
      mass[c.overhang[0]] += w;
      continue;
    }
    // Boundary: the next token starts a new byte run.
    const auto& probs = cache.get(c.tokens).probs;
    for (TokenId t = 0; static_cast<std::size_t>(t) < vocab.content_size(); ++t) {
      double p = probs[static_cast<std::size_t>(t)];
      if (p > 0.0) mass[vocab.bytes(t)[0]] += w * p;
    }
    mass[kEosSlot] += w * probs.back();
  }
  double total = 0.0;
  for (double m : mass) total += m;
  if (!(total > 0.0))
    fail(ErrorKind::Conditioning, "prefix '" + escape_bytes(prefix) + "' has zero probability");
  ByteDistribution out;
  for (std::size_t v = 0; v < kByteDistSize; ++v) out.logp[v] = mass[v] > 0.0 ? std::log(mass[v] / total) : kNegInf;
  return out;
}

}  // namespace bld
