#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "bld/beam.hpp"
#include "bld/distill.hpp"

namespace bld {

struct IngestResult {
  std::vector<ByteString> samples;
  std::size_t skipped_empty = 0;
};

/// One sample per line, raw bytes, file order. Empty lines are skipped and
/// counted; a trailing carriage return is kept. Throws Io for an unreadable file
/// and EmptyInput when no samples remain.
IngestResult ingest(const std::filesystem::path& corpus_path);
IngestResult ingest_text(std::string_view text);

/// Contiguous partition of sample indices: shard s gets [s*n/S, (s+1)*n/S).
struct ShardPlan {
  std::size_t sample_count = 0;
  std::size_t shard_count = 1;
  unsigned workers = 1;

  ShardPlan(std::size_t samples, std::size_t shards, unsigned workers = 1);
  std::size_t begin(std::size_t shard) const;
  std::size_t end(std::size_t shard) const;
};

struct ShardRecord {
  std::uint64_t sample_id = 0;
  std::uint32_t byte_length = 0;
  std::vector<float> logp;  // (byte_length + 1) x 257, row-major

  std::size_t positions() const { return byte_length + 1u; }
  ByteDistribution dist(std::size_t pos) const;
  friend bool operator==(const ShardRecord&, const ShardRecord&) = default;
};

struct ShardHeader {
  std::uint32_t version = 1;
  std::uint64_t vocab_fingerprint = 0;
  std::uint64_t k = 0;  // UINT64_MAX for an unbounded beam
  double epsilon = 0.0;
  friend bool operator==(const ShardHeader&, const ShardHeader&) = default;
};

/// Dense teacher byte log-probabilities. Little-endian layout: "BLDP", u32
/// version, u64 vocabulary fingerprint, u64 K, f64 epsilon, u64 record count,
/// then per record u64 sample id, u32 byte length and (length + 1) x 257 f32.
struct ProbShard {
  ShardHeader header;
  std::vector<ShardRecord> records;
  friend bool operator==(const ProbShard&, const ProbShard&) = default;
};

inline constexpr std::uint32_t kShardVersion = 1;

std::string encode_shard(const ProbShard& shard);
/// Throws Format (bad magic), UnsupportedVersion, Fingerprint (when
/// `expected_fingerprint` is given and differs) or Truncated (naming the offset).
ProbShard decode_shard(std::string_view data, std::optional<std::uint64_t> expected_fingerprint = std::nullopt);
void write_shard(const std::filesystem::path& path, const ProbShard& shard);
ProbShard read_shard(const std::filesystem::path& path, std::optional<std::uint64_t> expected_fingerprint = std::nullopt);

std::string shard_file_name(std::size_t shard);

struct PrecomputeSummary {
  std::vector<std::filesystem::path> shard_files;
  std::size_t samples_written = 0;
  std::size_t samples_failed = 0;
};

/// Writes one shard per plan entry into `out_dir`. Each record holds the
/// conditional stream of a fresh beam lattice over the sample. Failed samples
/// are listed in "<shard>.errors" next to the shard. Output is independent of
/// the worker count.
PrecomputeSummary precompute(std::span<const ByteString> corpus, const LanguageModelPtr& teacher,
                             const BeamParams& params, const ShardPlan& plan, const std::filesystem::path& out_dir);

/// Teacher targets read from precomputed shards, keyed by sample id. Samples
/// listed in ".errors" sidecars are reported unavailable.
class ShardTargets final : public TargetProvider {
 public:
  /// `teacher_fingerprint`, when given, must match every shard header.
  ShardTargets(const std::filesystem::path& shard_dir, std::optional<std::uint64_t> teacher_fingerprint,
               TokenizerPtr student_tokenizer, std::size_t byte_heads);
  TeacherByteTargets targets(std::size_t sample_index, std::span<const Byte> sample) const override;
  bool available(std::size_t sample_index) const override;
  std::size_t size() const { return records_.size(); }
  std::size_t failed_count() const { return failed_.size(); }

 private:
  std::map<std::uint64_t, ShardRecord> records_;
  std::set<std::uint64_t> failed_;
  TokenizerPtr student_tokenizer_;
  std::size_t heads_;
};

/// Run configuration loaded from JSON. Unknown keys are rejected.
struct RunConfig {
  struct Paths {
    std::string vocab, merges, corpus, shards, checkpoint, reports, teacher_vocab, teacher_merges, teacher_checkpoint;
  } paths;
  BeamParams beam{10, 0.01, 256};
  SweepConfig sweep;
  TrainConfig train;
  std::size_t sft_epochs = 3;
  std::size_t shards = 4;
  unsigned workers = 4;
  std::uint64_t seed = 0;
  std::uint32_t d = 64;
  std::uint32_t layers = 2;
  std::uint32_t max_seq_len = 128;
  std::uint32_t byte_heads = 10;
  std::uint32_t byte_vocab = 260;

  void validate() const;
};

RunConfig default_run_config();
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string serialize_run_config(const RunConfig& config);

/// Name of the environment variable holding a default config path.
inline constexpr const char* kConfigEnv = "BLD_CONFIG";

struct ReportFiles {
  std::filesystem::path table;
  std::vector<std::filesystem::path> plots;
};

/// Aligned text table plus two SVG plots (JSD against K per epsilon; seconds per
/// sample against epsilon per K). Throws EmptyInput for an empty report.
ReportFiles emit_report(const SweepReport& sweep, const std::filesystem::path& out_dir);
/// Table and a loss-curve SVG for a training trace.
ReportFiles emit_report(std::span<const MetricRecord> trace, const std::filesystem::path& out_dir);
/// Table and the four-curve SVG for byte-only SFT.
ReportFiles emit_report(std::span<const SftEpochRecord> records, const std::filesystem::path& out_dir);

std::string sweep_table(const SweepReport& sweep);

/// Minimal SVG line chart; series are drawn in order with a legend.
struct PlotSeries {
  std::string label;
  std::vector<std::pair<double, double>> points;
};
std::string svg_line_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                          std::span<const PlotSeries> series, bool log_x = false, bool log_y = false);

}  // namespace bld
