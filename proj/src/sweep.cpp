#include <algorithm>
#include <atomic>
#include <chrono>
#include <numeric>
#include <random>
#include <thread>

#include "bld/beam.hpp"
#include "json.hpp"

namespace bld {

namespace {

struct SampleResult {
  // Per configuration: JSD at every position, seconds, leaked mass sum, queries.
  std::vector<std::vector<double>> jsds;
  std::vector<double> seconds;
  std::vector<double> leaked;
  std::vector<std::size_t> queries;
  std::vector<std::string> errors;  // per configuration, empty when fine
  std::string reference_error;
};

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

SweepReport sweep(const LanguageModelPtr& model, std::span<const ByteString> corpus, const SweepConfig& config) {
  if (corpus.empty()) fail(ErrorKind::EmptyInput, "sweep corpus is empty");
  if (config.ks.empty() || config.epsilons.empty()) fail(ErrorKind::Config, "sweep needs at least one K and one epsilon");
  BeamParams ref = config.reference;
  ref.batch_size = config.batch_size;
  ref.validate();

  std::vector<BeamParams> grid;
  for (std::size_t k : config.ks)
    for (double e : config.epsilons) {
      BeamParams p{k, e, config.batch_size};
      p.validate();
      grid.push_back(p);
    }

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  if (config.max_samples > 0 && config.max_samples < corpus.size()) {
    std::mt19937_64 rng(config.seed);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(config.max_samples);
    std::sort(order.begin(), order.end());
  }

  std::vector<SampleResult> results(order.size());
  std::atomic<std::size_t> next{0};
  auto work = [&]() {
    for (std::size_t i = next.fetch_add(1); i < order.size(); i = next.fetch_add(1)) {
      const auto& sample = corpus[order[i]];
      auto& r = results[i];
      r.jsds.resize(grid.size());
      r.seconds.assign(grid.size(), 0.0);
      r.leaked.assign(grid.size(), 0.0);
      r.queries.assign(grid.size(), 0);
      r.errors.assign(grid.size(), {});
      ConditionalStream reference;
      try {
        reference = byte_conditionals(model, sample, ref);
      } catch (const Error& e) {
        r.reference_error = e.what();
        continue;
      }
      for (std::size_t g = 0; g < grid.size(); ++g) {
        try {
          ConditionalStream s;
          double best = std::numeric_limits<double>::infinity();
          for (std::size_t rep = 0; rep < std::max<std::size_t>(1, config.repeats); ++rep) {
            auto t0 = std::chrono::steady_clock::now();
            s = byte_conditionals(model, sample, grid[g]);
            auto t1 = std::chrono::steady_clock::now();
            best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
          }
          r.seconds[g] = best;
          r.queries[g] = s.model_queries;
          for (double x : s.leaked_mass) r.leaked[g] += x;
          r.jsds[g].reserve(s.dists.size());
          for (std::size_t pos = 0; pos < s.dists.size(); ++pos) r.jsds[g].push_back(jsd(s.dists[pos], reference.dists[pos]));
        } catch (const Error& e) {
          r.errors[g] = e.what();
          r.jsds[g].clear();
        }
      }
    }
  };
  unsigned workers = std::max(1u, config.workers);
  std::vector<std::thread> pool;
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();

  SweepReport report;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    SweepRow row;
    row.k = grid[g].k;
    row.epsilon = grid[g].epsilon;
    std::vector<double> pooled;
    double seconds = 0.0, leaked = 0.0, queries = 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const auto& r = results[i];
      if (!r.reference_error.empty() || !r.errors[g].empty()) {
        ++row.failed_samples;
        continue;
      }
      ++ok;
      pooled.insert(pooled.end(), r.jsds[g].begin(), r.jsds[g].end());
      seconds += r.seconds[g];
      leaked += r.leaked[g];
      queries += static_cast<double>(r.queries[g]);
    }
    row.positions = pooled.size();
    row.median_jsd = median(pooled);
    row.mean_jsd = pooled.empty() ? 0.0 : std::accumulate(pooled.begin(), pooled.end(), 0.0) / static_cast<double>(pooled.size());
    if (ok > 0) {
      row.seconds_per_sample = seconds / static_cast<double>(ok);
      row.queries_per_sample = queries / static_cast<double>(ok);
    }
    row.mean_leaked_mass = pooled.empty() ? 0.0 : leaked / static_cast<double>(pooled.size());
    report.rows.push_back(row);
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (!r.reference_error.empty()) report.errors.push_back("sample " + std::to_string(order[i]) + ": reference: " + r.reference_error);
    for (std::size_t g = 0; g < r.errors.size(); ++g)
      if (!r.errors[g].empty())
        report.errors.push_back("sample " + std::to_string(order[i]) + ": K=" + std::to_string(grid[g].k) + ": " + r.errors[g]);
  }
  return report;
}

std::string serialize_sweep(const SweepReport& report) {
  std::string out;
  for (const auto& r : report.rows) {
    nlohmann::ordered_json j;
    if (r.k == kUnboundedBeam) {
      j["k"] = "inf";
    } else {
      j["k"] = r.k;
    }
    j["epsilon"] = r.epsilon;
    j["median_jsd"] = r.median_jsd;
    j["mean_jsd"] = r.mean_jsd;
    j["seconds_per_sample"] = r.seconds_per_sample;
    j["positions"] = r.positions;
    j["failed_samples"] = r.failed_samples;
    j["mean_leaked_mass"] = r.mean_leaked_mass;
    j["queries_per_sample"] = r.queries_per_sample;
    out += j.dump();
    out += '\n';
  }
  return out;
}

SweepReport parse_sweep(std::string_view text) {
  SweepReport report;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      SweepRow r;
      if (j.at("k").is_string()) {
        if (j.at("k").get<std::string>() != "inf") fail(ErrorKind::Format, "bad k");
        r.k = kUnboundedBeam;
      } else {
        r.k = j.at("k").get<std::size_t>();
      }
      r.epsilon = j.at("epsilon").get<double>();
      r.median_jsd = j.at("median_jsd").get<double>();
      r.mean_jsd = j.at("mean_jsd").get<double>();
      r.seconds_per_sample = j.at("seconds_per_sample").get<double>();
      r.positions = j.value("positions", std::size_t{0});
      r.failed_samples = j.value("failed_samples", std::size_t{0});
      r.mean_leaked_mass = j.value("mean_leaked_mass", 0.0);
      r.queries_per_sample = j.value("queries_per_sample", 0.0);
      report.rows.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::Format, "sweep record " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return report;
}

}  // namespace bld
