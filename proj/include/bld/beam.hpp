#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bld/language_model.hpp"

namespace bld {

inline constexpr std::size_t kUnboundedBeam = std::numeric_limits<std::size_t>::max();

struct BeamParams {
  std::size_t k = 10;
  double epsilon = 0.01;
  std::size_t batch_size = 256;  // token-probability queries per model call

  void validate() const;
  friend bool operator==(const BeamParams&, const BeamParams&) = default;
};

/// Next-token distribution after a completed-token path, with per-trie-node
/// probability mass for the tokens below each node.
struct ContextDist {
  std::vector<double> probs;        // content tokens then eos
  std::vector<double> node_mass;    // mass of tokens passing through or ending at each node
  std::vector<double> strict_mass;  // mass of tokens strictly extending each node

  ContextDist(const Tokenizer& tokenizer, std::vector<double> token_probs);
};

/// A partial tokenization path. With an empty `partial` it is a token boundary
/// (weight = path probability); otherwise it bundles every in-flight token that
/// strictly extends `partial` (weight = path probability times that mass).
struct Hypothesis {
  std::vector<TokenId> completed;
  ByteString partial;
  std::int32_t trie_node = 0;
  double log_weight = 0.0;
  double path_log_weight = 0.0;       // log probability of `completed`
  bool includes_terminal = false;     // in-flight mass still counts the token ending at trie_node
  std::shared_ptr<const ContextDist> context;  // distribution after `completed`; null until resolved

  bool boundary() const { return partial.empty(); }
  friend bool operator==(const Hypothesis& a, const Hypothesis& b) {
    return a.completed == b.completed && a.partial == b.partial && a.trie_node == b.trie_node &&
           a.log_weight == b.log_weight && a.path_log_weight == b.path_log_weight &&
           a.includes_terminal == b.includes_terminal;
  }
};

/// Pruned lattice of tokenization hypotheses over a growing byte prefix.
/// Single-threaded; copies share the immutable model.
class BeamLattice {
 public:
  /// Throws Config for k == 0 or epsilon outside [0, 1).
  BeamLattice(LanguageModelPtr model, BeamParams params);

  /// log P(next byte | consumed) over 256 bytes and eos, renormalized over the
  /// surviving mass. Throws Degenerate when no mass remains.
  ByteDistribution logp_next() const;

  /// Consume `v`, split off completed tokens, prune, then query the model for
  /// new boundaries. Throws Advance when no hypothesis can consume `v`.
  void advance(Byte v);

  /// Drops hypotheses below epsilon times the best weight, then keeps the top k.
  void prune();

  /// Splits every in-flight hypothesis sitting on a full token into a completed
  /// variant and the strict-extension remainder, then resolves new boundaries.
  void extend_token_boundaries();

  /// Low-level step: moves every hypothesis across `v` without splitting or pruning.
  void consume(Byte v);

  const std::vector<Hypothesis>& hypotheses() const { return hyps_; }
  const ByteString& consumed() const { return consumed_; }
  const BeamParams& params() const { return params_; }
  const LanguageModel& model() const { return *model_; }

  /// log of the summed hypothesis weights (unnormalized).
  double log_mass() const;
  /// Fraction of mass removed by the most recent prune.
  double last_leaked_mass() const { return last_leaked_; }
  std::size_t model_queries() const { return queries_; }
  std::size_t peak_size() const { return peak_; }

  friend bool operator==(const BeamLattice& a, const BeamLattice& b) {
    return a.model_ == b.model_ && a.params_ == b.params_ && a.consumed_ == b.consumed_ && a.hyps_ == b.hyps_;
  }

 private:
  void split();
  void resolve();

  LanguageModelPtr model_;
  BeamParams params_;
  std::vector<Hypothesis> hyps_;
  ByteString consumed_;
  double last_leaked_ = 0.0;
  std::size_t queries_ = 0;
  std::size_t peak_ = 1;
};

/// Free-function forms returning updated copies.
BeamLattice beam_init(LanguageModelPtr model, std::size_t k, double epsilon);
BeamLattice advance(BeamLattice lat, Byte v);
BeamLattice prune(BeamLattice lat);
BeamLattice extend_token_boundaries(BeamLattice lat);

struct ConditionalStream {
  std::vector<ByteDistribution> dists;  // dists[i] = P(b_i | b_<i)
  std::vector<double> leaked_mass;      // per position, from the prune after consuming b_i
  std::size_t model_queries = 0;
  std::size_t peak_hypotheses = 0;
};

/// Runs a fresh lattice across `b`: logp_next then advance at every position.
ConditionalStream byte_conditionals(const LanguageModelPtr& model, std::span<const Byte> b, const BeamParams& params);

/// Jensen-Shannon divergence in nats. Throws InvalidArgument when either input
/// is off the simplex by more than 1e-6.
double jsd(const ByteDistribution& p, const ByteDistribution& q);

struct SweepConfig {
  std::vector<std::size_t> ks{2, 5, 10, 20, 50, 100};
  std::vector<double> epsilons{1e-1, 1e-2, 1e-3, 1e-4, 1e-6};
  BeamParams reference{100, 1e-6, 256};
  std::size_t batch_size = 256;
  unsigned workers = 1;
  std::size_t repeats = 1;      // timing runs per sample and configuration; the minimum is kept
  std::size_t max_samples = 0;  // 0 = whole corpus, otherwise a seeded subsample
  std::uint64_t seed = 0;
};

struct SweepRow {
  std::size_t k = 0;
  double epsilon = 0.0;
  double median_jsd = 0.0;
  double mean_jsd = 0.0;
  double seconds_per_sample = 0.0;
  std::size_t positions = 0;
  std::size_t failed_samples = 0;
  double mean_leaked_mass = 0.0;
  double queries_per_sample = 0.0;
};

struct SweepReport {
  std::vector<SweepRow> rows;
  std::vector<std::string> errors;  // "sample <i>: <message>"
};

/// JSD of every (k, epsilon) configuration against the reference configuration,
/// pooled over all byte positions of all samples.
SweepReport sweep(const LanguageModelPtr& model, std::span<const ByteString> corpus, const SweepConfig& config);

/// Line-delimited JSON, one record per row.
std::string serialize_sweep(const SweepReport& report);
SweepReport parse_sweep(std::string_view text);

}  // namespace bld
