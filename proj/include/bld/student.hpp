#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bld/language_model.hpp"

namespace bld {

/// Slot layout of the student's byte vocabulary: 256 bytes then specials.
struct ByteSlots {
  static constexpr std::size_t kBos = 256;
  static constexpr std::size_t kEos = 257;
  static constexpr std::size_t kPad = 258;
  static constexpr std::size_t kOov = 259;
  static constexpr std::size_t kDefaultSize = 260;
};

struct StudentConfig {
  std::uint32_t vocab_rows = 0;  // content tokens + 1 (eos output slot, also the start-of-sequence input)
  std::uint32_t d = 64;
  std::uint32_t layers = 2;
  std::uint32_t mlp_hidden = 128;
  std::uint32_t max_seq_len = 128;
  std::uint32_t byte_heads = 10;
  std::uint32_t byte_vocab = static_cast<std::uint32_t>(ByteSlots::kDefaultSize);
  bool zero_init_heads = false;
  std::uint64_t seed = 0;

  void validate() const;
  friend bool operator==(const StudentConfig&, const StudentConfig&) = default;
};

struct Tensor {
  std::string name;
  Eigen::MatrixXd value;
};

/// One gradient matrix per parameter tensor, same order and shapes.
using GradientSet = std::vector<Eigen::MatrixXd>;

/// Forward activations kept for the backward pass.
struct ForwardPass {
  struct Layer {
    Eigen::MatrixXd x_in, h, q, k, v, a, o, x_mid, h2, g;
    Eigen::VectorXd r1, r2;
  };
  std::vector<TokenId> input;
  std::vector<Layer> layers;
  Eigen::MatrixXd f;  // normalized final hidden state
  Eigen::VectorXd r_final;
  Eigen::MatrixXd token_logits;  // N x vocab_rows
  Eigen::MatrixXd byte_logits;   // N x (byte_heads * byte_vocab), head-major columns; empty when detached

  std::size_t length() const { return input.size(); }
  /// Logits of byte head `head` at position `pos`, length byte_vocab.
  Eigen::VectorXd byte_head_logits(std::size_t pos, std::size_t head, std::size_t byte_vocab) const;
};

/// Tiny causal transformer: token embedding plus learned positions, `layers`
/// pre-norm blocks (single-head attention, tanh MLP), a token head and a
/// detachable byte head of `byte_heads` parallel linear projections.
class StudentModel {
 public:
  explicit StudentModel(const StudentConfig& config);

  const StudentConfig& config() const { return config_; }
  bool has_byte_head() const { return has_byte_head_; }
  TokenId bos_id() const { return static_cast<TokenId>(config_.vocab_rows - 1); }

  /// Input ids are content tokens or the start id (== eos id). Throws InvalidArgument
  /// for empty input and for input longer than max_seq_len.
  ForwardPass forward(std::span<const TokenId> input) const;
  /// Token-head logits at the last position only.
  Eigen::VectorXd next_token_logits(std::span<const TokenId> input) const;

  /// Backpropagates logit gradients. `d_byte` may be empty (treated as zero).
  GradientSet backward(const ForwardPass& pass, const Eigen::MatrixXd& d_token, const Eigen::MatrixXd& d_byte) const;

  GradientSet zero_gradients() const;
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t parameter_count() const;
  /// Index of a tensor by name, or -1.
  int tensor_index(std::string_view name) const;
  /// Indices of the token head tensors (weight, bias).
  std::pair<int, int> token_head_indices() const;
  /// Indices of the byte head tensors (weight, bias); (-1, -1) when detached.
  std::pair<int, int> byte_head_indices() const;

  /// Copy without the byte head; token outputs are unchanged.
  StudentModel detach_byte_head() const;

  std::string serialize() const;
  static StudentModel deserialize(std::string_view data);
  void save(const std::filesystem::path& path) const;
  static StudentModel load(const std::filesystem::path& path);

  friend bool operator==(const StudentModel& a, const StudentModel& b);

 private:
  StudentModel() = default;
  void build_tensors(bool with_byte_head);
  void initialize();
  Eigen::MatrixXd backbone(std::span<const TokenId> input, ForwardPass* pass) const;

  StudentConfig config_;
  std::vector<Tensor> tensors_;
  bool has_byte_head_ = true;
};

using StudentModelPtr = std::shared_ptr<const StudentModel>;

/// Token-level view of a student: next_token_dist is the softmax of the token head
/// after feeding the start id followed by the prefix.
class StudentLM final : public LanguageModel {
 public:
  StudentLM(TokenizerPtr tokenizer, StudentModelPtr model);
  const StudentModel& model() const { return *model_; }

 protected:
  TokenDistribution compute(std::span<const TokenId> prefix) const override;

 private:
  StudentModelPtr model_;
};

/// Numerically stable softmax over a vector; -inf entries get zero mass.
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Default student configuration for a tokenizer.
StudentConfig student_config_for(const Tokenizer& tokenizer, std::uint32_t d = 64, std::uint64_t seed = 0);

}  // namespace bld
