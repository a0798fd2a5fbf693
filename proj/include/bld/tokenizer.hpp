#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "bld/common.hpp"

namespace bld {

/// Dense token inventory. Content ids are 0..content_size()-1; the end-of-sequence
/// id is content_size() and has no byte string.
class Vocabulary {
 public:
  /// Builds a byte-complete vocabulary: user tokens keep their order and ids,
  /// missing single-byte tokens are appended in ascending byte order.
  static Vocabulary build(std::span<const ByteString> tokens);

  std::size_t content_size() const { return entries_.size(); }
  /// Content tokens plus the end-of-sequence slot.
  std::size_t size() const { return entries_.size() + 1; }
  TokenId eos_id() const { return static_cast<TokenId>(entries_.size()); }
  std::size_t user_token_count() const { return user_count_; }

  bool is_content(TokenId id) const { return id >= 0 && static_cast<std::size_t>(id) < entries_.size(); }
  /// True for single-byte tokens added to complete the byte alphabet.
  bool is_injected(TokenId id) const { return is_content(id) && static_cast<std::size_t>(id) >= user_count_; }

  const ByteString& bytes(TokenId id) const;
  std::optional<TokenId> find(std::span<const Byte> b) const;
  TokenId byte_token(Byte b) const { return byte_tokens_[b]; }
  std::size_t max_token_length() const { return max_len_; }

  /// Hash of the canonical vocabulary file serialization.
  std::uint64_t fingerprint() const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<ByteString> entries_;
  std::unordered_map<std::string, TokenId> index_;
  std::array<TokenId, 256> byte_tokens_{};
  std::size_t user_count_ = 0;
  std::size_t max_len_ = 0;
};

struct Merge {
  ByteString left;
  ByteString right;
  friend bool operator==(const Merge&, const Merge&) = default;
};

/// Ordered merge list; earlier entries have higher priority.
using MergeRules = std::vector<Merge>;

/// Prefix tree over vocabulary byte strings. Immutable after construction.
class VocabTrie {
 public:
  static constexpr std::int32_t kRoot = 0;
  static constexpr std::int32_t kNone = -1;

  struct Node {
    std::vector<std::pair<Byte, std::int32_t>> children;  // sorted by byte
    TokenId terminal = -1;           // token whose bytes end exactly here
    std::vector<TokenId> tokens;     // tokens passing through or ending here
    std::int32_t depth = 0;
  };

  VocabTrie() = default;
  explicit VocabTrie(const Vocabulary& vocab);

  std::int32_t child(std::int32_t node, Byte b) const;
  /// Node reached by walking `path` from the root, or kNone.
  std::int32_t find(std::span<const Byte> path) const;
  const Node& node(std::int32_t id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  std::size_t node_count() const { return nodes_.size(); }

  /// Node index along the path of each token, root excluded; used for subtree mass sums.
  const std::vector<std::int32_t>& path_of(TokenId id) const { return paths_.at(static_cast<std::size_t>(id)); }

  struct Extension {
    TokenId token;
    ByteString remaining;
    friend bool operator==(const Extension&, const Extension&) = default;
  };
  /// Tokens whose bytes have `partial` as a prefix, with their unconsumed suffix.
  std::vector<Extension> extensions(const Vocabulary& vocab, std::span<const Byte> partial) const;

 private:
  std::vector<Node> nodes_;
  std::vector<std::vector<std::int32_t>> paths_;
};

/// Byte-level BPE: vocabulary, merge list and trie bundled and validated together.
class Tokenizer {
 public:
  /// Validates merges (operands and their concatenation must be tokens) and
  /// builds the trie. Duplicate tokens or unknown merge operands throw Construction.
  static Tokenizer build(std::span<const ByteString> tokens, MergeRules merges = {});

  const Vocabulary& vocab() const { return vocab_; }
  const MergeRules& merges() const { return merges_; }
  const VocabTrie& trie() const { return trie_; }

  std::vector<TokenId> tokenize(std::span<const Byte> b) const;
  ByteString decode(std::span<const TokenId> tokens) const;

 private:
  Vocabulary vocab_;
  MergeRules merges_;
  VocabTrie trie_;
  // (left id, right id) -> (rank, merged id)
  std::map<std::pair<TokenId, TokenId>, std::pair<std::size_t, TokenId>> ranks_;
};

using TokenizerPtr = std::shared_ptr<const Tokenizer>;

// File formats. Vocabulary: one `id<TAB>hex` line per content token, ids dense
// from 0. Merges: one `hexleft<SPACE>hexright` line per merge, priority order.
std::string serialize_vocab(const Vocabulary& vocab);
std::string serialize_merges(const MergeRules& merges);
std::vector<ByteString> parse_vocab(std::string_view text);
MergeRules parse_merges(std::string_view text);

void write_vocab_file(const std::filesystem::path& path, const Vocabulary& vocab);
void write_merges_file(const std::filesystem::path& path, const MergeRules& merges);
TokenizerPtr load_tokenizer(const std::filesystem::path& vocab_path,
                            const std::optional<std::filesystem::path>& merges_path);

/// Named in-process tokenizers: "toy" ({a, b, ab} with merge a+b) and "char" (bytes only).
TokenizerPtr builtin_tokenizer(std::string_view name);

std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace bld
