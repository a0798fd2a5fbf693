#include "bld/beam.hpp"

#include <algorithm>
#include <cmath>

namespace bld {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool canonical_less(const Hypothesis& a, const Hypothesis& b) {
  if (a.log_weight != b.log_weight) return a.log_weight > b.log_weight;
  if (a.completed != b.completed) return a.completed < b.completed;
  return a.partial < b.partial;
}

}  // namespace

void BeamParams::validate() const {
  if (k == 0) fail(ErrorKind::Config, "beam width K must be at least 1");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) fail(ErrorKind::Config, "pruning threshold epsilon must be in [0, 1)");
  if (batch_size == 0) fail(ErrorKind::Config, "query batch size must be positive");
}

ContextDist::ContextDist(const Tokenizer& tokenizer, std::vector<double> token_probs) : probs(std::move(token_probs)) {
  const auto& trie = tokenizer.trie();
  const auto& vocab = tokenizer.vocab();
  if (probs.size() != vocab.size()) fail(ErrorKind::Contract, "token distribution size does not match vocabulary");
  node_mass.assign(trie.node_count(), 0.0);
  strict_mass.assign(trie.node_count(), 0.0);
  for (TokenId t = 0; static_cast<std::size_t>(t) < vocab.content_size(); ++t) {
    double p = probs[static_cast<std::size_t>(t)];
    if (p <= 0.0) continue;
    node_mass[0] += p;
    for (std::int32_t n : trie.path_of(t)) node_mass[static_cast<std::size_t>(n)] += p;
  }
  for (std::size_t n = 0; n < trie.node_count(); ++n) {
    double s = 0.0;
    for (const auto& [b, c] : trie.node(static_cast<std::int32_t>(n)).children) s += node_mass[static_cast<std::size_t>(c)];
    strict_mass[n] = s;
  }
}

BeamLattice::BeamLattice(LanguageModelPtr model, BeamParams params) : model_(std::move(model)), params_(params) {
  if (!model_) fail(ErrorKind::InvalidArgument, "beam lattice needs a model");
  params_.validate();
  Hypothesis h;
  h.trie_node = VocabTrie::kRoot;
  hyps_.push_back(std::move(h));
  resolve();
}

double BeamLattice::log_mass() const {
  std::vector<double> w;
  w.reserve(hyps_.size());
  for (const auto& h : hyps_) w.push_back(h.log_weight);
  double m = kNegInf;
  for (double x : w) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : w) s += std::exp(x - m);
  return m + std::log(s);
}

ByteDistribution BeamLattice::logp_next() const {
  double m = kNegInf;
  for (const auto& h : hyps_) m = std::max(m, h.log_weight);
  if (m == kNegInf) fail(ErrorKind::Degenerate, "no surviving probability mass after " +
                                                    std::to_string(consumed_.size()) + " bytes");
  const auto& trie = model_->tokenizer().trie();
  std::array<double, kByteDistSize> mass{};
  for (const auto& h : hyps_) {
    if (h.log_weight == kNegInf) continue;
    if (!h.context || h.includes_terminal)
      fail(ErrorKind::InvalidArgument, "lattice has unresolved token boundaries; call extend_token_boundaries");
    const auto& ctx = *h.context;
    if (h.boundary()) {
      double w = std::exp(h.log_weight - m);
      for (const auto& [b, c] : trie.node(VocabTrie::kRoot).children) mass[b] += w * ctx.node_mass[static_cast<std::size_t>(c)];
      mass[kEosSlot] += w * ctx.probs.back();
    } else {
      double w = std::exp(h.path_log_weight - m);
      for (const auto& [b, c] : trie.node(h.trie_node).children) mass[b] += w * ctx.node_mass[static_cast<std::size_t>(c)];
    }
  }
  double total = 0.0;
  for (double x : mass) total += x;
  if (!(total > 0.0))
    fail(ErrorKind::Degenerate, "no surviving probability mass after " + std::to_string(consumed_.size()) + " bytes");
  ByteDistribution out;
  for (std::size_t v = 0; v < kByteDistSize; ++v) out.logp[v] = mass[v] > 0.0 ? std::log(mass[v] / total) : kNegInf;
  return out;
}

void BeamLattice::consume(Byte v) {
  const auto& trie = model_->tokenizer().trie();
  std::vector<Hypothesis> next;
  next.reserve(hyps_.size());
  for (const auto& h : hyps_) {
    if (h.log_weight == kNegInf) continue;
    if (!h.context || h.includes_terminal)
      fail(ErrorKind::InvalidArgument, "lattice has unresolved token boundaries; call extend_token_boundaries");
    std::int32_t from = h.boundary() ? VocabTrie::kRoot : h.trie_node;
    std::int32_t to = trie.child(from, v);
    if (to == VocabTrie::kNone) continue;
    double mass = h.context->node_mass[static_cast<std::size_t>(to)];
    if (!(mass > 0.0)) continue;
    Hypothesis n;
    n.completed = h.completed;
    n.partial = h.partial;
    n.partial.push_back(v);
    n.trie_node = to;
    n.path_log_weight = h.boundary() ? h.log_weight : h.path_log_weight;
    n.log_weight = n.path_log_weight + std::log(mass);
    n.includes_terminal = true;
    n.context = h.context;
    next.push_back(std::move(n));
  }
  if (next.empty())
    fail(ErrorKind::Advance, "byte 0x" + hex_encode(std::span<const Byte>(&v, 1)) + " at position " +
                                 std::to_string(consumed_.size()) + " is unreachable from every hypothesis");
  hyps_ = std::move(next);
  consumed_.push_back(v);
}

void BeamLattice::split() {
  const auto& trie = model_->tokenizer().trie();
  std::vector<Hypothesis> next;
  next.reserve(hyps_.size() * 2);
  for (auto& h : hyps_) {
    if (h.boundary() || !h.includes_terminal) {
      next.push_back(std::move(h));
      continue;
    }
    const auto& ctx = *h.context;
    TokenId t = trie.node(h.trie_node).terminal;
    if (t >= 0 && ctx.probs[static_cast<std::size_t>(t)] > 0.0) {
      Hypothesis done;
      done.completed = h.completed;
      done.completed.push_back(t);
      done.trie_node = VocabTrie::kRoot;
      done.path_log_weight = h.path_log_weight + std::log(ctx.probs[static_cast<std::size_t>(t)]);
      done.log_weight = done.path_log_weight;
      next.push_back(std::move(done));
    }
    double strict = ctx.strict_mass[static_cast<std::size_t>(h.trie_node)];
    if (strict > 0.0) {
      h.includes_terminal = false;
      h.log_weight = h.path_log_weight + std::log(strict);
      next.push_back(std::move(h));
    }
  }
  hyps_ = std::move(next);
}

void BeamLattice::resolve() {
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < hyps_.size(); ++i)
    if (hyps_[i].boundary() && !hyps_[i].context) pending.push_back(i);
  const auto& tok = model_->tokenizer();
  for (std::size_t start = 0; start < pending.size(); start += params_.batch_size) {
    std::size_t end = std::min(pending.size(), start + params_.batch_size);
    std::vector<std::vector<TokenId>> prefixes;
    prefixes.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) prefixes.push_back(hyps_[pending[i]].completed);
    auto dists = model_->next_token_dists(prefixes);
    queries_ += prefixes.size();
    for (std::size_t i = start; i < end; ++i)
      hyps_[pending[i]].context = std::make_shared<const ContextDist>(tok, std::move(dists[i - start].probs));
  }
}

void BeamLattice::extend_token_boundaries() {
  split();
  resolve();
}

void BeamLattice::prune() {
  double before = log_mass();
  std::erase_if(hyps_, [](const Hypothesis& h) { return h.log_weight == kNegInf; });
  if (hyps_.empty()) {
    last_leaked_ = before == kNegInf ? 0.0 : 1.0;
    return;
  }
  std::sort(hyps_.begin(), hyps_.end(), canonical_less);
  if (params_.epsilon > 0.0) {
    double threshold = hyps_.front().log_weight + std::log(params_.epsilon);
    std::erase_if(hyps_, [threshold](const Hypothesis& h) { return h.log_weight < threshold; });
  }
  if (hyps_.size() > params_.k) hyps_.resize(params_.k);
  double after = log_mass();
  last_leaked_ = (before == kNegInf) ? 0.0 : std::max(0.0, 1.0 - std::exp(after - before));
}

void BeamLattice::advance(Byte v) {
  consume(v);
  split();
  peak_ = std::max(peak_, hyps_.size());
  prune();
  resolve();
}

BeamLattice beam_init(LanguageModelPtr model, std::size_t k, double epsilon) {
  BeamParams p;
  p.k = k;
  p.epsilon = epsilon;
  return BeamLattice(std::move(model), p);
}

BeamLattice advance(BeamLattice lat, Byte v) {
  lat.advance(v);
  return lat;
}

BeamLattice prune(BeamLattice lat) {
  lat.prune();
  return lat;
}

BeamLattice extend_token_boundaries(BeamLattice lat) {
  lat.extend_token_boundaries();
  return lat;
}

ConditionalStream byte_conditionals(const LanguageModelPtr& model, std::span<const Byte> b, const BeamParams& params) {
  BeamLattice lat(model, params);
  ConditionalStream out;
  out.dists.reserve(b.size());
  out.leaked_mass.reserve(b.size());
  for (Byte v : b) {
    out.dists.push_back(lat.logp_next());
    lat.advance(v);
    out.leaked_mass.push_back(lat.last_leaked_mass());
  }
  out.model_queries = lat.model_queries();
  out.peak_hypotheses = lat.peak_size();
  return out;
}

double jsd(const ByteDistribution& p, const ByteDistribution& q) {
  std::array<double, kByteDistSize> a{}, b{};
  double sa = 0.0, sb = 0.0;
  for (std::size_t i = 0; i < kByteDistSize; ++i) {
    a[i] = std::exp(p.logp[i]);
    b[i] = std::exp(q.logp[i]);
    sa += a[i];
    sb += b[i];
  }
  if (std::abs(sa - 1.0) > 1e-6 || std::abs(sb - 1.0) > 1e-6)
    fail(ErrorKind::InvalidArgument, "jsd inputs must be normalized (sums " + std::to_string(sa) + ", " +
                                         std::to_string(sb) + ")");
  double kl_a = 0.0, kl_b = 0.0;
  for (std::size_t i = 0; i < kByteDistSize; ++i) {
    double m = 0.5 * (a[i] + b[i]);
    if (a[i] > 0.0) kl_a += a[i] * std::log(a[i] / m);
    if (b[i] > 0.0) kl_b += b[i] * std::log(b[i] / m);
  }
  double v = 0.5 * kl_a + 0.5 * kl_b;
  return std::clamp(v, 0.0, std::log(2.0));
}

}  // namespace bld
