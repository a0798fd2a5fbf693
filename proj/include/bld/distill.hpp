#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bld/beam.hpp"
#include "bld/student.hpp"

namespace bld {

/// Loss coefficients: total = lambda_token * token_ce + lambda_byte * byte_ce + lambda_kl * byte_kl.
struct LossWeights {
  double lambda_token = 1.0;
  double lambda_kl = 0.1;
  double lambda_byte = 1.0;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double token_ce = 0.0;
  double token_kl = 0.0;  // standard same-vocabulary KD only
  double byte_ce = 0.0;
  double byte_kl = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown& operator*=(double s);
};

/// Ground-truth targets for one sample under the student's tokenization.
/// Input is the start id followed by tokens t_1..t_k; position i predicts
/// t_{i+1}, and the final position predicts eos. The eos target counts as a
/// one-byte token whose byte is the EOS special.
struct SupervisionTargets {
  std::vector<TokenId> input;               // N ids
  std::vector<TokenId> token_targets;       // N ids
  std::vector<std::size_t> token_lengths;   // n_l per position (1 for eos)
  std::vector<std::vector<std::size_t>> byte_targets;  // per position, student byte slots for the first min(n_l, heads) bytes

  std::size_t length() const { return input.size(); }
};

SupervisionTargets make_supervision(const Tokenizer& tokenizer, std::span<const Byte> b, std::size_t byte_heads);

/// Teacher byte distributions aligned to the student's segmentation: slots[l][j]
/// is P_T(byte j of target token l | earlier bytes). Slots past min(n_l, heads)
/// are absent (masked).
struct TeacherByteTargets {
  std::vector<std::vector<ByteDistribution>> slots;
  std::vector<std::size_t> token_lengths;

  bool masked(std::size_t pos, std::size_t slot) const { return pos >= slots.size() || slot >= slots[pos].size(); }
};

/// Full conditional stream P(b_i | b_<i) for i = 0..|b|, the last entry being
/// the distribution after the whole sample (its eos slot ends the sequence).
std::vector<ByteDistribution> beam_byte_stream(const LanguageModelPtr& teacher, std::span<const Byte> b,
                                               const BeamParams& params);
std::vector<ByteDistribution> exact_byte_stream(const LanguageModel& teacher, std::span<const Byte> b);

/// Re-indexes a flat stream of |b|+1 distributions to (token, slot).
TeacherByteTargets align_byte_targets(std::span<const ByteDistribution> stream, const Tokenizer& student_tokenizer,
                                      std::span<const Byte> b, std::size_t byte_heads);

/// beam_byte_stream then align_byte_targets. Beam errors carry the byte position.
TeacherByteTargets build_byte_targets(const LanguageModelPtr& teacher, const Tokenizer& student_tokenizer,
                                      std::span<const Byte> b, const BeamParams& params, std::size_t byte_heads);

/// Loss value plus gradients with respect to the student's logits.
struct LossResult {
  LossBreakdown loss;
  Eigen::MatrixXd d_token;  // N x vocab_rows
  Eigen::MatrixXd d_byte;   // N x (heads * byte_vocab), empty when the model has no byte head
};

/// Per-sequence distillation loss:
///   (1/N) sum_l [ token CE + (1/n_l) sum_{j < min(n_l, heads)} (byte CE + KL(teacher || student)) ]
/// with byte distributions restricted to the 256 byte slots and EOS. `teacher`
/// may be null, in which case byte_kl is zero. Non-finite terms throw Numeric
/// naming (l, j).
LossResult bld_loss(const ForwardPass& pass, const StudentConfig& config, const SupervisionTargets& targets,
                    const TeacherByteTargets* teacher, const LossWeights& weights);

/// Convenience overload running the forward pass.
LossBreakdown bld_loss(const StudentModel& student, const SupervisionTargets& targets,
                       const TeacherByteTargets* teacher, const LossWeights& weights);

/// Gradients of the summed loss over a batch. `loss_fn` returns logit gradients
/// for a forward pass; non-finite loss throws Numeric naming the batch index.
using LogitLossFn = std::function<LossResult(std::size_t index, const ForwardPass& pass)>;
GradientSet compute_gradients(const StudentModel& student, std::span<const std::vector<TokenId>> inputs,
                              const LogitLossFn& loss_fn, LossBreakdown* total = nullptr);

/// Same-vocabulary KD: per sequence, the mean over positions of CE(target) +
/// KL(teacher || student), summed over the batch. Throws Contract when the
/// vocabularies differ.
LossBreakdown standard_kd_loss(const LanguageModel& teacher, const StudentLM& student,
                               std::span<const ByteString> batch, GradientSet* grads = nullptr);

/// Source of byte conditionals P(next byte | context bytes).
class ByteConditionalSource {
 public:
  virtual ~ByteConditionalSource() = default;
  virtual ByteDistribution next_byte(std::span<const Byte> context) const = 0;
};

class ExactByteSource final : public ByteConditionalSource {
 public:
  explicit ExactByteSource(LanguageModelPtr model) : model_(std::move(model)) {}
  ByteDistribution next_byte(std::span<const Byte> context) const override;

 private:
  LanguageModelPtr model_;
};

class BeamByteSource final : public ByteConditionalSource {
 public:
  BeamByteSource(LanguageModelPtr model, BeamParams params) : model_(std::move(model)), params_(params) {}
  ByteDistribution next_byte(std::span<const Byte> context) const override;

 private:
  LanguageModelPtr model_;
  BeamParams params_;
};

/// Lookup table keyed by context bytes; missing contexts throw Coverage.
class TableByteSource final : public ByteConditionalSource {
 public:
  void add(ByteString context, ByteDistribution dist) { table_[std::move(context)] = dist; }
  ByteDistribution next_byte(std::span<const Byte> context) const override;

 private:
  std::map<ByteString, ByteDistribution> table_;
};

struct NaiveCtdResult {
  std::vector<double> probs;  // one per student content token, then eos
  double sum = 0.0;           // diagnostic; byte chains overlap so this need not be 1
  std::size_t byte_queries = 0;
};

/// Token probabilities for every student token by chaining teacher byte
/// conditionals along its bytes after `context`. Cost grows with the student
/// vocabulary times its longest token.
NaiveCtdResult naive_ctd_token_probs(const ByteConditionalSource& source, const Vocabulary& student_vocab,
                                     std::span<const Byte> context);

/// Embedding rows for `target_vocab`: shared tokens copied, others the mean of
/// their source decomposition, and tokens whose decomposition needs an injected
/// byte token drawn from a seeded Gaussian with the source per-dimension stats.
/// The last row (eos/start) is copied. Throws InvalidArgument for an empty source.
Eigen::MatrixXd fvt_init(const Eigen::MatrixXd& source_embed, const Tokenizer& source_tokenizer,
                         const Vocabulary& target_vocab, std::uint64_t seed);

/// New student for `target` whose backbone is copied from `source`, with the
/// embedding and token-head rows transferred by fvt_init.
StudentModel fvt_transfer(const StudentModel& source, const Tokenizer& source_tokenizer, const Tokenizer& target,
                          std::uint64_t seed);

/// Per-sample teacher targets for training.
class TargetProvider {
 public:
  virtual ~TargetProvider() = default;
  virtual TeacherByteTargets targets(std::size_t sample_index, std::span<const Byte> sample) const = 0;
  /// False when the teacher could not produce targets for this sample; training
  /// then drops the KL term for it.
  virtual bool available(std::size_t /*sample_index*/) const { return true; }
};

class OnTheFlyTargets final : public TargetProvider {
 public:
  OnTheFlyTargets(LanguageModelPtr teacher, TokenizerPtr student_tokenizer, BeamParams params, std::size_t byte_heads);
  TeacherByteTargets targets(std::size_t sample_index, std::span<const Byte> sample) const override;

 private:
  LanguageModelPtr teacher_;
  TokenizerPtr student_tokenizer_;
  BeamParams params_;
  std::size_t heads_;
};

struct TrainConfig {
  std::size_t steps = 100;
  std::size_t batch_size = 8;
  double lr = 2e-5;
  double min_lr_ratio = 0.0;
  std::size_t warmup_steps = 100;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  LossWeights weights;
  std::uint64_t seed = 0;
  bool lora = false;                      // when set, only tensors named in lora_targets train
  std::vector<std::string> lora_targets{"wq", "wk", "wv", "wo", "w1", "w2"};  // full names, prefixes or ".suffix" leaf names
  std::vector<std::string> frozen;  // same matching as lora_targets; always frozen
  bool pretrain_byte_head = false;        // first pretrain_steps train only the byte head
  std::size_t pretrain_steps = 0;
  std::size_t prefetch = 0;               // batches prepared ahead on a helper thread; 0 = inline

  void validate() const;
};

struct MetricRecord {
  std::size_t step = 0;
  double token_ce = 0.0;
  double byte_ce = 0.0;
  double byte_kl = 0.0;
  double total = 0.0;
  double lr = 0.0;
  friend bool operator==(const MetricRecord&, const MetricRecord&) = default;
};

/// Learning rate at `step` (0-based): linear warm-up then cosine decay.
double scheduled_lr(const TrainConfig& config, std::size_t step);

/// Optimizes `student` in place. Batches are drawn with a seeded RNG; results
/// are identical for a given seed regardless of prefetching. Throws Numeric with
/// the step index on a non-finite loss.
std::vector<MetricRecord> train(StudentModel& student, const Tokenizer& tokenizer, std::span<const ByteString> corpus,
                                const TargetProvider* teacher, const TrainConfig& config);

/// Mean per-sequence loss over a corpus without updating parameters.
LossBreakdown evaluate(const StudentModel& student, const Tokenizer& tokenizer, std::span<const ByteString> corpus,
                       const TargetProvider* teacher, const LossWeights& weights);

std::string serialize_metrics(std::span<const MetricRecord> trace);
std::vector<MetricRecord> parse_metrics(std::string_view text);

struct SftEpochRecord {
  std::size_t epoch = 0;  // 0 = before training
  double train_byte_ce = 0.0;
  double train_token_ce = 0.0;
  double val_byte_ce = 0.0;
  double val_token_ce = 0.0;
};

struct SftConfig {
  std::size_t epochs = 3;
  TrainConfig train;  // steps is ignored; each epoch is one pass over the training corpus
};

/// Byte-CE-only training with the token head frozen; records train and validation
/// byte and token CE before training and after every epoch. Throws Contract
/// when the student has no byte head.
std::vector<SftEpochRecord> byte_only_sft(StudentModel& student, const Tokenizer& tokenizer,
                                          std::span<const ByteString> train_corpus,
                                          std::span<const ByteString> val_corpus, const SftConfig& config);

std::string serialize_sft(std::span<const SftEpochRecord> records);
std::vector<SftEpochRecord> parse_sft(std::string_view text);

}  // namespace bld
