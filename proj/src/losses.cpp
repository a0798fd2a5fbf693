#include <cmath>
#include <limits>

#include "bld/distill.hpp"
#include "bld/exact.hpp"

namespace bld {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Restricted byte distribution: student slots 0..255 plus the EOS special map to
// teacher slots 0..256. Begin, pad and out-of-vocabulary slots are excluded.
constexpr std::size_t kRestricted = kByteDistSize;

std::size_t student_slot(std::size_t restricted) { return restricted < 256 ? restricted : ByteSlots::kEos; }

std::size_t restricted_slot(std::size_t student) {
  if (student < 256) return student;
  if (student == ByteSlots::kEos) return 256;
  fail(ErrorKind::InvalidArgument, "byte target slot " + std::to_string(student) + " is outside the byte alphabet");
}

std::string where(std::size_t l, std::size_t j) {
  return "(position " + std::to_string(l) + ", slot " + std::to_string(j) + ")";
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_token, lambda_kl, lambda_byte})
    if (!std::isfinite(v) || v < 0.0) fail(ErrorKind::Config, "loss weights must be finite and non-negative");
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  token_ce += o.token_ce;
  token_kl += o.token_kl;
  byte_ce += o.byte_ce;
  byte_kl += o.byte_kl;
  total += o.total;
  return *this;
}

LossBreakdown& LossBreakdown::operator*=(double s) {
  token_ce *= s;
  token_kl *= s;
  byte_ce *= s;
  byte_kl *= s;
  total *= s;
  return *this;
}

SupervisionTargets make_supervision(const Tokenizer& tokenizer, std::span<const Byte> b, std::size_t byte_heads) {
  const auto& vocab = tokenizer.vocab();
  auto tokens = tokenizer.tokenize(b);
  SupervisionTargets s;
  s.input.push_back(vocab.eos_id());
  s.input.insert(s.input.end(), tokens.begin(), tokens.end());
  s.token_targets = tokens;
  s.token_targets.push_back(vocab.eos_id());
  for (TokenId t : s.token_targets) {
    std::vector<std::size_t> slots;
    if (t == vocab.eos_id()) {
      s.token_lengths.push_back(1);
      if (byte_heads > 0) slots.push_back(ByteSlots::kEos);
    } else {
      const auto& tb = vocab.bytes(t);
      s.token_lengths.push_back(tb.size());
      for (std::size_t j = 0; j < std::min(tb.size(), byte_heads); ++j) slots.push_back(tb[j]);
    }
    s.byte_targets.push_back(std::move(slots));
  }
  return s;
}

std::vector<ByteDistribution> beam_byte_stream(const LanguageModelPtr& teacher, std::span<const Byte> b,
                                               const BeamParams& params) {
  BeamLattice lat(teacher, params);
  std::vector<ByteDistribution> out;
  out.reserve(b.size() + 1);
  for (std::size_t i = 0; i <= b.size(); ++i) {
    try {
      out.push_back(lat.logp_next());
      if (i < b.size()) lat.advance(b[i]);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Advance) throw;
      fail(e.kind(), "byte position " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

std::vector<ByteDistribution> exact_byte_stream(const LanguageModel& teacher, std::span<const Byte> b) {
  std::vector<ByteDistribution> out;
  out.reserve(b.size() + 1);
  for (std::size_t i = 0; i <= b.size(); ++i) out.push_back(exact_next_byte_dist(teacher, b.first(i)));
  return out;
}

TeacherByteTargets align_byte_targets(std::span<const ByteDistribution> stream, const Tokenizer& student_tokenizer,
                                      std::span<const Byte> b, std::size_t byte_heads) {
  if (stream.size() != b.size() + 1)
    fail(ErrorKind::InvalidArgument, "byte stream has " + std::to_string(stream.size()) + " entries for " +
                                         std::to_string(b.size()) + " bytes");
  const auto& vocab = student_tokenizer.vocab();
  TeacherByteTargets t;
  std::size_t offset = 0;
  for (TokenId id : student_tokenizer.tokenize(b)) {
    std::size_t n = vocab.bytes(id).size();
    std::vector<ByteDistribution> slots;
    for (std::size_t j = 0; j < std::min(n, byte_heads); ++j) slots.push_back(stream[offset + j]);
    t.slots.push_back(std::move(slots));
    t.token_lengths.push_back(n);
    offset += n;
  }
  std::vector<ByteDistribution> last;
  if (byte_heads > 0) last.push_back(stream[b.size()]);
  t.slots.push_back(std::move(last));
  t.token_lengths.push_back(1);
  return t;
}

TeacherByteTargets build_byte_targets(const LanguageModelPtr& teacher, const Tokenizer& student_tokenizer,
                                      std::span<const Byte> b, const BeamParams& params, std::size_t byte_heads) {
  auto stream = beam_byte_stream(teacher, b, params);
  return align_byte_targets(stream, student_tokenizer, b, byte_heads);
}

LossResult bld_loss(const ForwardPass& pass, const StudentConfig& config, const SupervisionTargets& targets,
                    const TeacherByteTargets* teacher, const LossWeights& weights) {
  weights.validate();
  const std::size_t n = pass.length();
  if (targets.length() != n) fail(ErrorKind::InvalidArgument, "targets do not match the forward pass length");
  if (teacher && teacher->slots.size() != n)
    fail(ErrorKind::InvalidArgument, "teacher targets cover " + std::to_string(teacher->slots.size()) +
                                         " positions, expected " + std::to_string(n));
  const bool has_bytes = pass.byte_logits.size() > 0;
  const std::size_t bv = config.byte_vocab;
  const double inv_n = 1.0 / static_cast<double>(n);

  LossResult r;
  r.d_token = Eigen::MatrixXd::Zero(pass.token_logits.rows(), pass.token_logits.cols());
  if (has_bytes) r.d_byte = Eigen::MatrixXd::Zero(pass.byte_logits.rows(), pass.byte_logits.cols());

  for (std::size_t l = 0; l < n; ++l) {
    Eigen::VectorXd q = softmax(pass.token_logits.row(static_cast<Eigen::Index>(l)).transpose());
    auto target = static_cast<Eigen::Index>(targets.token_targets[l]);
    double ce = -std::log(q(target));
    if (!std::isfinite(ce)) fail(ErrorKind::Numeric, "non-finite token loss at position " + std::to_string(l));
    r.loss.token_ce += ce * inv_n;
    Eigen::VectorXd g = q;
    g(target) -= 1.0;
    r.d_token.row(static_cast<Eigen::Index>(l)) = (weights.lambda_token * inv_n) * g.transpose();

    if (!has_bytes) continue;
    const auto& slots = targets.byte_targets[l];
    if (teacher && teacher->slots[l].size() != slots.size())
      fail(ErrorKind::InvalidArgument, "teacher byte mask disagrees with the student segmentation at position " +
                                           std::to_string(l));
    const double scale = inv_n / static_cast<double>(targets.token_lengths[l]);
    for (std::size_t j = 0; j < slots.size(); ++j) {
      Eigen::VectorXd logits = pass.byte_head_logits(l, j, bv);
      double m = kNegInf;
      for (std::size_t s = 0; s < kRestricted; ++s) m = std::max(m, logits(static_cast<Eigen::Index>(student_slot(s))));
      std::array<double, kRestricted> e{};
      double z = 0.0;
      for (std::size_t s = 0; s < kRestricted; ++s) {
        e[s] = std::exp(logits(static_cast<Eigen::Index>(student_slot(s))) - m);
        z += e[s];
      }
      const double log_z = m + std::log(z);
      std::array<double, kRestricted> grad{};
      for (std::size_t s = 0; s < kRestricted; ++s) e[s] /= z;  // e now holds q

      const std::size_t truth = restricted_slot(slots[j]);
      double bce = log_z - logits(static_cast<Eigen::Index>(slots[j]));
      if (!std::isfinite(bce)) fail(ErrorKind::Numeric, "non-finite byte loss at " + where(l, j));
      r.loss.byte_ce += bce * scale;
      for (std::size_t s = 0; s < kRestricted; ++s) grad[s] = weights.lambda_byte * e[s];
      grad[truth] -= weights.lambda_byte;

      if (teacher) {
        const auto& p = teacher->slots[l][j];
        double kl = 0.0, mass = 0.0;
        for (std::size_t s = 0; s < kRestricted; ++s) {
          if (p.logp[s] == kNegInf) continue;
          double ps = std::exp(p.logp[s]);
          double log_q = logits(static_cast<Eigen::Index>(student_slot(s))) - log_z;
          kl += ps * (p.logp[s] - log_q);
          mass += ps;
          grad[s] -= weights.lambda_kl * ps;
        }
        if (!std::isfinite(kl)) fail(ErrorKind::Numeric, "non-finite byte KL at " + where(l, j));
        r.loss.byte_kl += kl * scale;
        for (std::size_t s = 0; s < kRestricted; ++s) grad[s] += weights.lambda_kl * mass * e[s];
      }
      const auto row = static_cast<Eigen::Index>(l);
      for (std::size_t s = 0; s < kRestricted; ++s)
        r.d_byte(row, static_cast<Eigen::Index>(j * bv + student_slot(s))) = grad[s] * scale;
    }
  }
  r.loss.total = weights.lambda_token * r.loss.token_ce + weights.lambda_byte * r.loss.byte_ce +
                 weights.lambda_kl * r.loss.byte_kl;
  if (!std::isfinite(r.loss.total)) fail(ErrorKind::Numeric, "non-finite total loss");
  return r;
}

LossBreakdown bld_loss(const StudentModel& student, const SupervisionTargets& targets,
                       const TeacherByteTargets* teacher, const LossWeights& weights) {
  auto pass = student.forward(targets.input);
  return bld_loss(pass, student.config(), targets, teacher, weights).loss;
}

GradientSet compute_gradients(const StudentModel& student, std::span<const std::vector<TokenId>> inputs,
                              const LogitLossFn& loss_fn, LossBreakdown* total) {
  GradientSet g = student.zero_gradients();
  LossBreakdown sum;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto pass = student.forward(inputs[i]);
    LossResult r;
    try {
      r = loss_fn(i, pass);
    } catch (const Error& e) {
      fail(e.kind(), "batch index " + std::to_string(i) + ": " + e.what());
    }
    if (!std::isfinite(r.loss.total))
      fail(ErrorKind::Numeric, "non-finite loss at batch index " + std::to_string(i));
    auto gi = student.backward(pass, r.d_token, r.d_byte);
    for (std::size_t t = 0; t < g.size(); ++t) g[t] += gi[t];
    sum += r.loss;
  }
  if (total) *total = sum;
  return g;
}

LossBreakdown standard_kd_loss(const LanguageModel& teacher, const StudentLM& student,
                               std::span<const ByteString> batch, GradientSet* grads) {
  if (!(teacher.vocab() == student.vocab()))
    fail(ErrorKind::Contract, "standard KD needs teacher and student to share a vocabulary");
  const StudentModel& model = student.model();
  LossBreakdown total;
  if (grads) *grads = model.zero_gradients();
  for (const auto& sample : batch) {
    auto sup = make_supervision(student.tokenizer(), sample, 0);
    auto pass = model.forward(sup.input);
    const std::size_t n = sup.length();
    const double inv_n = 1.0 / static_cast<double>(n);
    Eigen::MatrixXd d_token = Eigen::MatrixXd::Zero(pass.token_logits.rows(), pass.token_logits.cols());
    LossBreakdown seq;
    std::vector<TokenId> prefix;
    for (std::size_t l = 0; l < n; ++l) {
      auto p = teacher.next_token_dist(prefix).probs;
      Eigen::VectorXd q = softmax(pass.token_logits.row(static_cast<Eigen::Index>(l)).transpose());
      auto target = static_cast<Eigen::Index>(sup.token_targets[l]);
      seq.token_ce += -std::log(q(target)) * inv_n;
      double kl = 0.0;
      Eigen::VectorXd g = 2.0 * q;  // CE and KL each contribute q
      g(target) -= 1.0;
      for (std::size_t s = 0; s < p.size(); ++s) {
        g(static_cast<Eigen::Index>(s)) -= p[s];
        if (p[s] > 0.0) kl += p[s] * (std::log(p[s]) - std::log(q(static_cast<Eigen::Index>(s))));
      }
      seq.token_kl += kl * inv_n;
      d_token.row(static_cast<Eigen::Index>(l)) = inv_n * g.transpose();
      if (l < n - 1) prefix.push_back(sup.token_targets[l]);
    }
    seq.total = seq.token_ce + seq.token_kl;
    if (!std::isfinite(seq.total)) fail(ErrorKind::Numeric, "non-finite KD loss");
    total += seq;
    if (grads) {
      Eigen::MatrixXd d_byte;
      if (model.has_byte_head()) d_byte = Eigen::MatrixXd::Zero(pass.byte_logits.rows(), pass.byte_logits.cols());
      auto g = model.backward(pass, d_token, d_byte);
      for (std::size_t t = 0; t < g.size(); ++t) (*grads)[t] += g[t];
    }
  }
  return total;
}

ByteDistribution ExactByteSource::next_byte(std::span<const Byte> context) const {
  return exact_next_byte_dist(*model_, context);
}

ByteDistribution BeamByteSource::next_byte(std::span<const Byte> context) const {
  BeamLattice lat(model_, params_);
  for (Byte v : context) lat.advance(v);
  return lat.logp_next();
}

ByteDistribution TableByteSource::next_byte(std::span<const Byte> context) const {
  auto it = table_.find(ByteString(context.begin(), context.end()));
  if (it == table_.end())
    fail(ErrorKind::Coverage, "no teacher byte conditional for context '" + escape_bytes(context) + "'");
  return it->second;
}

NaiveCtdResult naive_ctd_token_probs(const ByteConditionalSource& source, const Vocabulary& student_vocab,
                                     std::span<const Byte> context) {
  NaiveCtdResult r;
  r.probs.assign(student_vocab.size(), 0.0);
  ByteString ctx(context.begin(), context.end());
  const std::size_t base = ctx.size();
  // Conditionals memoized per extension so each byte prefix is queried once.
  std::map<ByteString, ByteDistribution> memo;
  auto conditional = [&](const ByteString& c) -> const ByteDistribution& {
    auto it = memo.find(c);
    if (it != memo.end()) return it->second;
    ++r.byte_queries;
    return memo.emplace(c, source.next_byte(c)).first->second;
  };
  for (TokenId t = 0; static_cast<std::size_t>(t) < student_vocab.content_size(); ++t) {
    const auto& tb = student_vocab.bytes(t);
    double lp = 0.0;
    ctx.resize(base);
    for (Byte v : tb) {
      lp += conditional(ctx).logp[v];
      if (lp == kNegInf) break;
      ctx.push_back(v);
    }
    r.probs[static_cast<std::size_t>(t)] = std::exp(lp);
  }
  ctx.resize(base);
  r.probs.back() = std::exp(conditional(ctx).logp[kEosSlot]);
  for (double p : r.probs) r.sum += p;
  return r;
}

}  // namespace bld

namespace bld {

OnTheFlyTargets::OnTheFlyTargets(LanguageModelPtr teacher, TokenizerPtr student_tokenizer, BeamParams params,
                                 std::size_t byte_heads)
    : teacher_(std::move(teacher)), student_tokenizer_(std::move(student_tokenizer)), params_(params), heads_(byte_heads) {
  if (!teacher_ || !student_tokenizer_) fail(ErrorKind::InvalidArgument, "on-the-fly targets need a teacher and a tokenizer");
  params_.validate();
}

TeacherByteTargets OnTheFlyTargets::targets(std::size_t sample_index, std::span<const Byte> sample) const {
  try {
    return build_byte_targets(teacher_, *student_tokenizer_, sample, params_, heads_);
  } catch (const Error& e) {
    fail(e.kind(), "sample " + std::to_string(sample_index) + ": " + e.what());
  }
}

}  // namespace bld
