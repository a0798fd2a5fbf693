#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "bld/pipeline.hpp"

namespace bld {

namespace {

constexpr char kMagic[4] = {'B', 'L', 'D', 'P'};

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  std::uint64_t uint(std::size_t bytes, const char* what) {
    need(bytes, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += bytes;
    return v;
  }
  std::uint32_t u32(const char* what) { return static_cast<std::uint32_t>(uint(4, what)); }
  std::uint64_t u64(const char* what) { return uint(8, what); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string_view raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (data_.size() - pos_ < n)
      fail(ErrorKind::Truncated, std::string("shard truncated at offset ") + std::to_string(data_.size()) +
                                     " while reading " + what + " at offset " + std::to_string(pos_));
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace

IngestResult ingest_text(std::string_view text) {
  IngestResult r;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.empty()) {
      ++r.skipped_empty;
      continue;
    }
    r.samples.emplace_back(line.begin(), line.end());
  }
  if (r.samples.empty()) fail(ErrorKind::EmptyInput, "corpus has no samples");
  return r;
}

IngestResult ingest(const std::filesystem::path& corpus_path) {
  return ingest_text(read_file(corpus_path));
}

ShardPlan::ShardPlan(std::size_t samples, std::size_t shards, unsigned w)
    : sample_count(samples), shard_count(shards), workers(w) {
  if (shards == 0) fail(ErrorKind::Config, "shard count must be positive");
  if (w == 0) fail(ErrorKind::Config, "worker count must be positive");
}

std::size_t ShardPlan::begin(std::size_t shard) const { return shard * sample_count / shard_count; }
std::size_t ShardPlan::end(std::size_t shard) const { return (shard + 1) * sample_count / shard_count; }

ByteDistribution ShardRecord::dist(std::size_t pos) const {
  if (pos >= positions()) fail(ErrorKind::InvalidArgument, "shard position out of range");
  ByteDistribution d;
  double total = 0.0;
  for (std::size_t v = 0; v < kByteDistSize; ++v) {
    d.logp[v] = static_cast<double>(logp[pos * kByteDistSize + v]);
    total += std::exp(d.logp[v]);
  }
  // float32 storage normalizes to ~1e-7; renormalize in double on the way out.
  double lz = std::log(total);
  for (auto& x : d.logp) x -= lz;
  return d;
}

std::string encode_shard(const ProbShard& shard) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(shard.header.version);
  w.u64(shard.header.vocab_fingerprint);
  w.u64(shard.header.k);
  w.f64(shard.header.epsilon);
  w.u64(shard.records.size());
  for (const auto& r : shard.records) {
    if (r.logp.size() != r.positions() * kByteDistSize)
      fail(ErrorKind::InvalidArgument, "shard record for sample " + std::to_string(r.sample_id) + " has wrong size");
    w.u64(r.sample_id);
    w.u32(r.byte_length);
    for (float f : r.logp) w.f32(f);
  }
  return w.take();
}

ProbShard decode_shard(std::string_view data, std::optional<std::uint64_t> expected_fingerprint) {
  Reader rd(data);
  if (data.size() >= 4 && std::memcmp(data.data(), kMagic, 4) != 0)
    fail(ErrorKind::Format, "not a probability shard (bad magic)");
  rd.raw(4, "magic");
  ProbShard s;
  s.header.version = rd.u32("version");
  if (s.header.version != kShardVersion)
    fail(ErrorKind::UnsupportedVersion, "unsupported shard version " + std::to_string(s.header.version));
  s.header.vocab_fingerprint = rd.u64("fingerprint");
  if (expected_fingerprint && *expected_fingerprint != s.header.vocab_fingerprint)
    fail(ErrorKind::Fingerprint, "shard was built with a different vocabulary");
  s.header.k = rd.u64("beam width");
  s.header.epsilon = rd.f64("epsilon");
  std::uint64_t count = rd.u64("record count");
  for (std::uint64_t i = 0; i < count; ++i) {
    ShardRecord r;
    r.sample_id = rd.u64("sample id");
    r.byte_length = rd.u32("byte length");
    std::size_t n = r.positions() * kByteDistSize;
    auto body = rd.raw(n * 4, "log-probabilities");
    r.logp.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(body[k * 4 + static_cast<std::size_t>(b)])) << (8 * b);
      r.logp[k] = std::bit_cast<float>(bits);
    }
    s.records.push_back(std::move(r));
  }
  if (!rd.done()) fail(ErrorKind::Format, "trailing bytes after shard records at offset " + std::to_string(rd.offset()));
  return s;
}

void write_shard(const std::filesystem::path& path, const ProbShard& shard) { write_file_atomic(path, encode_shard(shard)); }

ProbShard read_shard(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint) {
  try {
    return decode_shard(read_file(path), expected_fingerprint);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Io) throw;
    fail(e.kind(), path.string() + ": " + e.what());
  }
}

std::string shard_file_name(std::size_t shard) {
  std::ostringstream os;
  os << "shard-" << std::setw(5) << std::setfill('0') << shard << ".bldp";
  return os.str();
}

ShardTargets::ShardTargets(const std::filesystem::path& shard_dir, std::optional<std::uint64_t> teacher_fingerprint,
                           TokenizerPtr student_tokenizer, std::size_t byte_heads)
    : student_tokenizer_(std::move(student_tokenizer)), heads_(byte_heads) {
  std::error_code ec;
  if (!std::filesystem::is_directory(shard_dir, ec)) fail(ErrorKind::Io, "shard directory " + shard_dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(shard_dir))
    if (entry.path().extension() == ".bldp") files.push_back(entry.path());
  if (files.empty()) fail(ErrorKind::Io, "no shard files in " + shard_dir.string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    auto shard = read_shard(f, teacher_fingerprint);
    for (auto& r : shard.records) records_[r.sample_id] = std::move(r);
    auto sidecar = f;
    sidecar += ".errors";
    if (!std::filesystem::exists(sidecar, ec)) continue;
    std::istringstream lines(read_file(sidecar));
    for (std::string line; std::getline(lines, line);)
      if (!line.empty()) failed_.insert(std::stoull(line.substr(0, line.find('\t'))));
  }
}

bool ShardTargets::available(std::size_t sample_index) const {
  return records_.count(sample_index) > 0 || failed_.count(sample_index) == 0;
}

TeacherByteTargets ShardTargets::targets(std::size_t sample_index, std::span<const Byte> sample) const {
  auto it = records_.find(sample_index);
  if (it == records_.end()) fail(ErrorKind::Io, "no shard record for sample " + std::to_string(sample_index));
  const auto& r = it->second;
  if (r.byte_length != sample.size())
    fail(ErrorKind::Contract, "shard record for sample " + std::to_string(sample_index) + " has " +
                                  std::to_string(r.byte_length) + " bytes, corpus sample has " + std::to_string(sample.size()));
  std::vector<ByteDistribution> stream;
  stream.reserve(r.positions());
  for (std::size_t p = 0; p < r.positions(); ++p) stream.push_back(r.dist(p));
  return align_byte_targets(stream, *student_tokenizer_, sample, heads_);
}

}  // namespace bld
