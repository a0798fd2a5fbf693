#include "bld/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace bld {

namespace {
std::string key_of(std::span<const Byte> b) { return std::string(b.begin(), b.end()); }
}  // namespace

Vocabulary Vocabulary::build(std::span<const ByteString> tokens) {
  Vocabulary v;
  v.byte_tokens_.fill(-1);
  auto add = [&v](const ByteString& t) {
    if (t.empty()) fail(ErrorKind::Construction, "empty token byte string");
    auto id = static_cast<TokenId>(v.entries_.size());
    if (!v.index_.emplace(key_of(t), id).second)
      fail(ErrorKind::Construction, "duplicate token '" + escape_bytes(t) + "'");
    if (t.size() == 1) v.byte_tokens_[t[0]] = id;
    v.max_len_ = std::max(v.max_len_, t.size());
    v.entries_.push_back(t);
  };
  for (const auto& t : tokens) add(t);
  v.user_count_ = v.entries_.size();
  for (int b = 0; b < 256; ++b) {
    if (v.byte_tokens_[b] < 0) add(ByteString{static_cast<Byte>(b)});
  }
  return v;
}

const ByteString& Vocabulary::bytes(TokenId id) const {
  if (!is_content(id)) fail(ErrorKind::Lookup, "unknown content token id " + std::to_string(id));
  return entries_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::span<const Byte> b) const {
  auto it = index_.find(key_of(b));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::string s = serialize_vocab(*this);
  return fnv1a64(std::span(reinterpret_cast<const Byte*>(s.data()), s.size()));
}

VocabTrie::VocabTrie(const Vocabulary& vocab) {
  nodes_.emplace_back();
  paths_.resize(vocab.content_size());
  for (TokenId id = 0; static_cast<std::size_t>(id) < vocab.content_size(); ++id) {
    std::int32_t cur = kRoot;
    nodes_[kRoot].tokens.push_back(id);
    for (Byte b : vocab.bytes(id)) {
      std::int32_t next = child(cur, b);
      if (next == kNone) {
        next = static_cast<std::int32_t>(nodes_.size());
        Node n;
        n.depth = nodes_[static_cast<std::size_t>(cur)].depth + 1;
        nodes_.push_back(std::move(n));
        auto& ch = nodes_[static_cast<std::size_t>(cur)].children;
        auto pos = std::lower_bound(ch.begin(), ch.end(), std::make_pair(b, std::int32_t{0}),
                                    [](const auto& a, const auto& c) { return a.first < c.first; });
        ch.insert(pos, {b, next});
      }
      cur = next;
      nodes_[static_cast<std::size_t>(cur)].tokens.push_back(id);
      paths_[static_cast<std::size_t>(id)].push_back(cur);
    }
    nodes_[static_cast<std::size_t>(cur)].terminal = id;
  }
}

std::int32_t VocabTrie::child(std::int32_t node, Byte b) const {
  const auto& ch = nodes_.at(static_cast<std::size_t>(node)).children;
  auto it = std::lower_bound(ch.begin(), ch.end(), b,
                             [](const auto& a, Byte x) { return a.first < x; });
  if (it == ch.end() || it->first != b) return kNone;
  return it->second;
}

std::int32_t VocabTrie::find(std::span<const Byte> path) const {
  std::int32_t cur = kRoot;
  for (Byte b : path) {
    cur = child(cur, b);
    if (cur == kNone) return kNone;
  }
  return cur;
}

std::vector<VocabTrie::Extension> VocabTrie::extensions(const Vocabulary& vocab,
                                                        std::span<const Byte> partial) const {
  std::vector<Extension> out;
  std::int32_t n = find(partial);
  if (n == kNone) return out;
  for (TokenId id : node(n).tokens) {
    const auto& b = vocab.bytes(id);
    out.push_back({id, ByteString(b.begin() + static_cast<std::ptrdiff_t>(partial.size()), b.end())});
  }
  return out;
}

Tokenizer Tokenizer::build(std::span<const ByteString> tokens, MergeRules merges) {
  Tokenizer t;
  t.vocab_ = Vocabulary::build(tokens);
  for (std::size_t rank = 0; rank < merges.size(); ++rank) {
    const auto& m = merges[rank];
    auto l = t.vocab_.find(m.left);
    auto r = t.vocab_.find(m.right);
    if (!l || !r)
      fail(ErrorKind::Construction, "merge " + std::to_string(rank) + " references unknown token '" +
                                        escape_bytes(!l ? m.left : m.right) + "'");
    ByteString cat = m.left;
    cat.insert(cat.end(), m.right.begin(), m.right.end());
    auto merged = t.vocab_.find(cat);
    if (!merged)
      fail(ErrorKind::Construction,
           "merge " + std::to_string(rank) + " produces '" + escape_bytes(cat) + "' which is not in the vocabulary");
    // A repeated pair keeps its first (highest) priority.
    t.ranks_.emplace(std::make_pair(*l, *r), std::make_pair(rank, *merged));
  }
  t.merges_ = std::move(merges);
  t.trie_ = VocabTrie(t.vocab_);
  return t;
}

std::vector<TokenId> Tokenizer::tokenize(std::span<const Byte> b) const {
  std::vector<TokenId> seq;
  seq.reserve(b.size());
  for (Byte x : b) seq.push_back(vocab_.byte_token(x));
  if (ranks_.empty()) return seq;
  while (seq.size() > 1) {
    std::size_t best_pos = seq.size();
    std::size_t best_rank = 0;
    TokenId best_id = -1;
    for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
      auto it = ranks_.find({seq[i], seq[i + 1]});
      if (it == ranks_.end()) continue;
      // Strictly lower rank wins; equal rank keeps the leftmost occurrence.
      if (best_pos == seq.size() || it->second.first < best_rank) {
        best_pos = i;
        best_rank = it->second.first;
        best_id = it->second.second;
      }
    }
    if (best_pos == seq.size()) break;
    seq[best_pos] = best_id;
    seq.erase(seq.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
  return seq;
}

ByteString Tokenizer::decode(std::span<const TokenId> tokens) const {
  ByteString out;
  for (TokenId id : tokens) {
    const auto& b = vocab_.bytes(id);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

std::string serialize_vocab(const Vocabulary& vocab) {
  std::string out;
  for (TokenId id = 0; static_cast<std::size_t>(id) < vocab.content_size(); ++id) {
    out += std::to_string(id);
    out += '\t';
    out += hex_encode(vocab.bytes(id));
    out += '\n';
  }
  return out;
}

std::string serialize_merges(const MergeRules& merges) {
  std::string out;
  for (const auto& m : merges) {
    out += hex_encode(m.left);
    out += ' ';
    out += hex_encode(m.right);
    out += '\n';
  }
  return out;
}

std::vector<ByteString> parse_vocab(std::string_view text) {
  std::vector<ByteString> tokens;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string_view::npos)
      fail(ErrorKind::Format, "vocabulary line " + std::to_string(line_no) + ": missing tab");
    std::string id_text(line.substr(0, tab));
    std::size_t consumed = 0;
    long long id = -1;
    try {
      id = std::stoll(id_text, &consumed);
    } catch (const std::exception&) {
      consumed = 0;
    }
    if (consumed != id_text.size() || id_text.empty())
      fail(ErrorKind::Format, "vocabulary line " + std::to_string(line_no) + ": bad id '" + id_text + "'");
    if (id != static_cast<long long>(tokens.size()))
      fail(ErrorKind::Format, "vocabulary line " + std::to_string(line_no) + ": ids must be dense from 0, got " +
                                  id_text);
    tokens.push_back(hex_decode(line.substr(tab + 1)));
  }
  return tokens;
}

MergeRules parse_merges(std::string_view text) {
  MergeRules merges;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    auto sp = line.find(' ');
    if (sp == std::string_view::npos)
      fail(ErrorKind::Format, "merges line " + std::to_string(line_no) + ": expected 'hexleft hexright'");
    merges.push_back({hex_decode(line.substr(0, sp)), hex_decode(line.substr(sp + 1))});
  }
  return merges;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path.string() + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) fail(ErrorKind::Io, "error reading '" + path.string() + "'");
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::Io, "error writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::Io, "cannot rename '" + tmp.string() + "': " + ec.message());
}

void write_vocab_file(const std::filesystem::path& path, const Vocabulary& vocab) {
  write_file_atomic(path, serialize_vocab(vocab));
}

void write_merges_file(const std::filesystem::path& path, const MergeRules& merges) {
  write_file_atomic(path, serialize_merges(merges));
}

TokenizerPtr load_tokenizer(const std::filesystem::path& vocab_path,
                            const std::optional<std::filesystem::path>& merges_path) {
  auto tokens = parse_vocab(read_file(vocab_path));
  if (tokens.empty()) fail(ErrorKind::EmptyInput, "vocabulary file '" + vocab_path.string() + "' is empty");
  MergeRules merges;
  if (merges_path) merges = parse_merges(read_file(*merges_path));
  return std::make_shared<const Tokenizer>(Tokenizer::build(tokens, std::move(merges)));
}

TokenizerPtr builtin_tokenizer(std::string_view name) {
  if (name == "toy") {
    std::vector<ByteString> tokens{to_bytes("a"), to_bytes("b"), to_bytes("ab")};
    return std::make_shared<const Tokenizer>(Tokenizer::build(tokens, {{to_bytes("a"), to_bytes("b")}}));
  }
  if (name == "char") {
    return std::make_shared<const Tokenizer>(Tokenizer::build(std::vector<ByteString>{}));
  }
  fail(ErrorKind::Lookup, "unknown builtin vocabulary '" + std::string(name) + "'");
}

}  // namespace bld
