#include <cmath>
#include <random>

#include "bld/distill.hpp"

namespace bld {

Eigen::MatrixXd fvt_init(const Eigen::MatrixXd& source_embed, const Tokenizer& source_tokenizer,
                         const Vocabulary& target_vocab, std::uint64_t seed) {
  const auto& src = source_tokenizer.vocab();
  if (src.content_size() == 0 || source_embed.rows() == 0)
    fail(ErrorKind::InvalidArgument, "source vocabulary is empty");
  if (static_cast<std::size_t>(source_embed.rows()) != src.size())
    fail(ErrorKind::InvalidArgument, "source embedding has " + std::to_string(source_embed.rows()) +
                                         " rows for a vocabulary of " + std::to_string(src.size()));
  const Eigen::Index d = source_embed.cols();
  const auto content_rows = static_cast<Eigen::Index>(src.content_size());
  Eigen::RowVectorXd mean = source_embed.topRows(content_rows).colwise().mean();
  Eigen::RowVectorXd stddev(d);
  for (Eigen::Index c = 0; c < d; ++c) {
    double ss = (source_embed.col(c).head(content_rows).array() - mean(c)).square().sum();
    stddev(c) = std::sqrt(ss / static_cast<double>(content_rows));
  }

  const bool bytes_are_fallback = src.user_token_count() > 0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(target_vocab.size()), d);
  for (TokenId t = 0; static_cast<std::size_t>(t) < target_vocab.content_size(); ++t) {
    const auto& tb = target_vocab.bytes(t);
    auto row = out.row(t);
    if (auto s = src.find(tb)) {
      row = source_embed.row(*s);
      continue;
    }
    auto parts = source_tokenizer.tokenize(tb);
    bool decomposable = true;
    for (TokenId p : parts) decomposable = decomposable && !(bytes_are_fallback && src.is_injected(p));
    if (decomposable) {
      row.setZero();
      for (TokenId p : parts) row += source_embed.row(p);
      row /= static_cast<double>(parts.size());
    } else {
      for (Eigen::Index c = 0; c < d; ++c) row(c) = mean(c) + stddev(c) * normal(rng);
    }
  }
  out.row(out.rows() - 1) = source_embed.row(source_embed.rows() - 1);
  return out;
}

StudentModel fvt_transfer(const StudentModel& source, const Tokenizer& source_tokenizer, const Tokenizer& target,
                          std::uint64_t seed) {
  StudentConfig cfg = source.config();
  cfg.vocab_rows = static_cast<std::uint32_t>(target.vocab().size());
  cfg.seed = seed;
  StudentModel out(cfg);
  for (const auto& t : source.tensors()) {
    if (t.name == "embed" || t.name.rfind("token_head", 0) == 0) continue;
    int i = out.tensor_index(t.name);
    if (i >= 0) out.tensors()[static_cast<std::size_t>(i)].value = t.value;
  }
  const auto& src = source.tensors();
  auto& dst = out.tensors();
  auto si = static_cast<std::size_t>(source.tensor_index("embed"));
  auto di = static_cast<std::size_t>(out.tensor_index("embed"));
  dst[di].value = fvt_init(src[si].value, source_tokenizer, target.vocab(), seed);
  // The token head is transposed relative to the embedding: one column per token.
  auto [sw, sb] = source.token_head_indices();
  auto [dw, db] = out.token_head_indices();
  dst[static_cast<std::size_t>(dw)].value =
      fvt_init(src[static_cast<std::size_t>(sw)].value.transpose(), source_tokenizer, target.vocab(), seed + 1)
          .transpose();
  dst[static_cast<std::size_t>(db)].value =
      fvt_init(src[static_cast<std::size_t>(sb)].value.transpose(), source_tokenizer, target.vocab(), seed + 2)
          .transpose();
  return out;
}

}  // namespace bld
