#include <atomic>
#include <mutex>
#include <thread>

#include "bld/pipeline.hpp"

namespace bld {

namespace {

struct ShardOutcome {
  std::size_t written = 0;
  std::size_t failed = 0;
};

ShardOutcome build_shard(std::span<const ByteString> corpus, const LanguageModelPtr& teacher, const BeamParams& params,
                         const ShardPlan& plan, std::size_t s, const std::filesystem::path& path) {
  ProbShard shard;
  shard.header.version = kShardVersion;
  shard.header.vocab_fingerprint = teacher->vocab().fingerprint();
  shard.header.k = params.k == kUnboundedBeam ? std::numeric_limits<std::uint64_t>::max() : params.k;
  shard.header.epsilon = params.epsilon;
  std::string errors;
  ShardOutcome out;
  for (std::size_t i = plan.begin(s); i < plan.end(s); ++i) {
    const auto& sample = corpus[i];
    try {
      auto stream = beam_byte_stream(teacher, sample, params);
      ShardRecord r;
      r.sample_id = i;
      r.byte_length = static_cast<std::uint32_t>(sample.size());
      r.logp.reserve(stream.size() * kByteDistSize);
      for (const auto& d : stream)
        for (double x : d.logp) r.logp.push_back(static_cast<float>(x));
      shard.records.push_back(std::move(r));
      ++out.written;
    } catch (const Error& e) {
      errors += std::to_string(i) + "\t" + to_string(e.kind()) + "\t" + e.what() + "\n";
      ++out.failed;
    }
  }
  write_shard(path, shard);
  auto sidecar = path;
  sidecar += ".errors";
  if (errors.empty()) {
    std::error_code ec;
    std::filesystem::remove(sidecar, ec);
  } else {
    write_file_atomic(sidecar, errors);
  }
  return out;
}

}  // namespace

PrecomputeSummary precompute(std::span<const ByteString> corpus, const LanguageModelPtr& teacher,
                             const BeamParams& params, const ShardPlan& plan, const std::filesystem::path& out_dir) {
  if (!teacher) fail(ErrorKind::InvalidArgument, "precompute needs a teacher");
  params.validate();
  if (plan.sample_count != corpus.size())
    fail(ErrorKind::Config, "shard plan covers " + std::to_string(plan.sample_count) + " samples, corpus has " +
                                std::to_string(corpus.size()));
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + out_dir.string() + ": " + ec.message());

  PrecomputeSummary summary;
  std::vector<ShardOutcome> outcomes(plan.shard_count);
  for (std::size_t s = 0; s < plan.shard_count; ++s) summary.shard_files.push_back(out_dir / shard_file_name(s));

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr error;
  auto work = [&] {
    for (std::size_t s = next.fetch_add(1); s < plan.shard_count; s = next.fetch_add(1)) {
      try {
        outcomes[s] = build_shard(corpus, teacher, params, plan, s, summary.shard_files[s]);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < plan.workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  for (const auto& o : outcomes) {
    summary.samples_written += o.written;
    summary.samples_failed += o.failed;
  }
  return summary;
}

}  // namespace bld
