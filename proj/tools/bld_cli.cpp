// Command-line front end over the C API.
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "bld/bld.h"
#include "json.hpp"

namespace {

struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check(bld_status s, const std::string& stage) {
  if (s != BLD_OK) throw StageError(stage + ": " + bld_status_name(s) + ": " + bld_last_error());
}

template <typename T, void (*Free)(T*)>
struct Handle {
  T* p = nullptr;
  Handle() = default;
  Handle(const Handle&) = delete;
  Handle& operator=(const Handle&) = delete;
  Handle(Handle&& o) noexcept : p(std::exchange(o.p, nullptr)) {}
  Handle& operator=(Handle&& o) noexcept {
    std::swap(p, o.p);
    return *this;
  }
  ~Handle() {
    if (p) Free(p);
  }
  T** out() { return &p; }
  T* get() const { return p; }
  explicit operator bool() const { return p != nullptr; }
};

using Tokenizer = Handle<bld_tokenizer, bld_tokenizer_free>;
using Model = Handle<bld_model, bld_model_free>;
using Student = Handle<bld_student, bld_student_free>;
using Corpus = Handle<bld_corpus, bld_corpus_free>;
using Config = Handle<bld_config, bld_config_free>;

std::string take(char* s) {
  std::string out = s ? s : "";
  bld_string_free(s);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw StageError("output: cannot open " + path);
  f << text;
  if (!f) throw StageError("output: cannot write " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StageError("input: cannot open " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

std::vector<uint8_t> hex_to_bytes(const std::string& hex) {
  if (hex.size() % 2) throw StageError("input: hex string has odd length");
  std::vector<uint8_t> out;
  for (std::size_t i = 0; i < hex.size(); i += 2) out.push_back(static_cast<uint8_t>(std::stoi(hex.substr(i, 2), nullptr, 16)));
  return out;
}

std::string show_byte(int slot) {
  if (slot == 256) return "<eos>";
  if (slot >= 0x21 && slot < 0x7f) return std::string("'") + static_cast<char>(slot) + "'";
  char buf[8];
  std::snprintf(buf, sizeof buf, "0x%02x", slot);
  return buf;
}

/// Global options shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<uint64_t> seed;
  nlohmann::json overrides = nlohmann::json::object();

  Config load() const {
    nlohmann::json base = nlohmann::json::object();
    std::string path = config_path;
    if (path.empty())
      if (const char* env = std::getenv("BLD_CONFIG")) path = env;
    if (!path.empty()) {
      try {
        base = nlohmann::json::parse(read_text(path));
      } catch (const nlohmann::json::exception& e) {
        throw StageError("config: " + path + ": " + e.what());
      }
    }
    base.merge_patch(overrides);
    if (seed) base["seed"] = *seed;
    Config c;
    check(bld_config_parse(base.dump().c_str(), c.out()), "config");
    return c;
  }
  void set(const std::string& section, const std::string& key, nlohmann::json value) {
    overrides[section][key] = std::move(value);
  }
};

/// Tokenizer selection: a builtin name or a vocabulary file with optional merges.
struct TokenizerArgs {
  std::string vocab = "toy";
  std::string merges;

  void add(CLI::App* app, const std::string& prefix = "") {
    app->add_option("--" + prefix + "vocab", vocab, "builtin tokenizer (toy, char) or vocabulary file")
        ->capture_default_str();
    app->add_option("--" + prefix + "merges", merges, "merges file for a vocabulary file");
  }
  Tokenizer load(const std::string& stage) const {
    Tokenizer t;
    if (vocab == "toy" || vocab == "char") {
      check(bld_tokenizer_builtin(vocab.c_str(), t.out()), stage);
    } else {
      check(bld_tokenizer_load(vocab.c_str(), merges.empty() ? nullptr : merges.c_str(), t.out()), stage);
    }
    return t;
  }
};

/// Teacher selection over a tokenizer.
struct TeacherArgs {
  std::string kind = "uniform";
  std::string checkpoint;
  std::string corpus;
  double eos_weight = 0.0;

  void add(CLI::App* app) {
    app->add_option("--teacher", kind, "teacher model: uniform, bigram, random or student")
        ->check(CLI::IsMember({"uniform", "bigram", "random", "student"}))
        ->capture_default_str();
    app->add_option("--teacher-checkpoint", checkpoint, "student checkpoint used as the teacher");
    app->add_option("--teacher-corpus", corpus, "corpus for the bigram teacher");
    app->add_option("--eos-weight", eos_weight, "end-of-sequence weight for uniform and random teachers");
  }
  Model load(const Tokenizer& tok, uint64_t seed) const {
    Model m;
    const std::string stage = "teacher";
    if (kind == "uniform") {
      check(bld_model_uniform(tok.get(), eos_weight, m.out()), stage);
    } else if (kind == "random") {
      check(bld_model_random(tok.get(), seed, eos_weight > 0 ? eos_weight : 0.05, m.out()), stage);
    } else if (kind == "bigram") {
      if (corpus.empty()) throw StageError("teacher: --teacher-corpus is required for a bigram teacher");
      Corpus c;
      check(bld_corpus_load(corpus.c_str(), c.out(), nullptr), stage);
      check(bld_model_bigram(tok.get(), c.get(), 0.1, m.out()), stage);
    } else {
      if (checkpoint.empty()) throw StageError("teacher: --teacher-checkpoint is required for a student teacher");
      Student s;
      check(bld_student_load(checkpoint.c_str(), s.out()), stage);
      check(bld_model_from_student(tok.get(), s.get(), m.out()), stage);
    }
    return m;
  }
};

/// Corpus from a file or a seeded synthetic generator.
struct CorpusArgs {
  std::string path;
  std::size_t synthetic = 0;
  std::size_t lexicon = 120;

  void add(CLI::App* app) {
    app->add_option("--corpus", path, "line-delimited corpus file");
    app->add_option("--synthetic", synthetic, "generate this many synthetic samples instead of reading a file");
    app->add_option("--lexicon", lexicon, "synthetic lexicon size")->capture_default_str();
  }
  Corpus load(uint64_t seed) const {
    Corpus c;
    if (!path.empty()) {
      std::size_t skipped = 0;
      check(bld_corpus_load(path.c_str(), c.out(), &skipped), "ingest");
      if (skipped) std::cerr << "ingest: skipped " << skipped << " empty line(s)\n";
    } else if (synthetic > 0) {
      check(bld_corpus_synthetic(seed, lexicon, synthetic, c.out()), "ingest");
    } else {
      throw StageError("ingest: give --corpus or --synthetic");
    }
    return c;
  }
};

void print_dist(const double* logp, std::size_t top) {
  std::vector<int> order(BLD_BYTE_DIST_SIZE);
  for (int i = 0; i < BLD_BYTE_DIST_SIZE; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return logp[a] > logp[b]; });
  double sum = 0.0;
  for (int i = 0; i < BLD_BYTE_DIST_SIZE; ++i) sum += std::exp(logp[i]);
  std::size_t shown = 0;
  for (int slot : order) {
    if (shown == top || std::isinf(logp[slot])) break;
    std::printf("  %s=%.12g", show_byte(slot).c_str(), std::exp(logp[slot]));
    ++shown;
  }
  std::printf("  (sum %.15g)\n", sum);
}

std::vector<uint8_t> input_bytes(const std::string& text, const std::string& hex) {
  if (!hex.empty()) return hex_to_bytes(hex);
  return {text.begin(), text.end()};
}

std::string context_label(const std::vector<uint8_t>& b, std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += (b[i] >= 0x20 && b[i] < 0x7f) ? std::string(1, static_cast<char>(b[i])) : show_byte(b[i]);
  return s;
}

template <typename T>
std::vector<T> parse_list(const std::string& s, const char* what) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      if constexpr (std::is_same_v<T, double>) {
        out.push_back(std::stod(item));
      } else {
        out.push_back(static_cast<T>(std::stoull(item)));
      }
    } catch (const std::exception&) {
      throw StageError(std::string("arguments: bad ") + what + " value '" + item + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Byte-level distillation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(bld_version()));
  Common common;
  uint64_t seed_value = 0;
  app.add_option("--config", common.config_path, "JSON run configuration (default: $BLD_CONFIG)");
  auto* seed_opt = app.add_option("--seed", seed_value, "random seed for every stage");

  // vocab build
  auto* vocab = app.add_subcommand("vocab", "vocabulary tools");
  vocab->require_subcommand(1);
  auto* vbuild = vocab->add_subcommand("build", "write a vocabulary and merges file");
  std::string vb_tokens, vb_merges, vb_builtin, vb_out, vb_merges_out;
  std::size_t vb_size = 0;
  bool vb_suffix = false;
  CorpusArgs vb_corpus;
  vbuild->add_option("--tokens", vb_tokens, "token list: one hex string per line");
  vbuild->add_option("--merges", vb_merges, "merges for the token list");
  vbuild->add_option("--builtin", vb_builtin, "builtin tokenizer to export (toy, char)");
  vb_corpus.add(vbuild);
  vbuild->add_option("--size", vb_size, "user tokens for a corpus-derived word-chain vocabulary");
  vbuild->add_flag("--suffix", vb_suffix, "suffix chains instead of prefix chains");
  vbuild->add_option("--out", vb_out, "vocabulary output path")->required();
  vbuild->add_option("--merges-out", vb_merges_out, "merges output path");

  // tokenize
  auto* tokenize = app.add_subcommand("tokenize", "tokenize bytes");
  TokenizerArgs tk_tok;
  std::string tk_input, tk_hex;
  tk_tok.add(tokenize);
  tokenize->add_option("--input", tk_input, "text input");
  tokenize->add_option("--hex", tk_hex, "hex input");

  // byteprobs exact / beam
  auto* byteprobs = app.add_subcommand("byteprobs", "next-byte distributions");
  byteprobs->require_subcommand(1);
  auto* bp_exact = byteprobs->add_subcommand("exact", "exact marginalization over coverings");
  auto* bp_beam = byteprobs->add_subcommand("beam", "beam-approximated lattice");
  TokenizerArgs bp_tok;
  TeacherArgs bp_teacher;
  std::string bp_input, bp_hex;
  std::size_t bp_top = 8;
  std::string bp_k;
  std::optional<double> bp_eps;
  for (auto* sub : {bp_exact, bp_beam}) {
    bp_tok.add(sub);
    bp_teacher.add(sub);
    sub->add_option("--input", bp_input, "text input");
    sub->add_option("--hex", bp_hex, "hex input");
    sub->add_option("--top", bp_top, "entries shown per position")->capture_default_str();
  }
  bp_beam->add_option("--k", bp_k, "beam width (integer or inf)");
  bp_beam->add_option("--eps", bp_eps, "pruning threshold");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "JSD and runtime over a K x epsilon grid");
  TokenizerArgs sw_tok;
  TeacherArgs sw_teacher;
  CorpusArgs sw_corpus;
  std::string sw_k, sw_eps, sw_out, sw_report;
  std::size_t sw_repeats = 0;
  sw_tok.add(sweep);
  sw_teacher.add(sweep);
  sw_corpus.add(sweep);
  sweep->add_option("--k", sw_k, "comma-separated beam widths");
  sweep->add_option("--eps", sw_eps, "comma-separated pruning thresholds");
  sweep->add_option("--repeats", sw_repeats, "timing repeats per sample");
  sweep->add_option("--out", sw_out, "write the JSONL report here");
  sweep->add_option("--report-dir", sw_report, "also emit table and plots here");

  // precompute
  auto* pre = app.add_subcommand("precompute", "write teacher byte-probability shards");
  TokenizerArgs pc_tok;
  TeacherArgs pc_teacher;
  CorpusArgs pc_corpus;
  std::string pc_out, pc_k;
  std::optional<double> pc_eps;
  std::optional<std::size_t> pc_shards;
  std::optional<unsigned> pc_workers;
  pc_tok.add(pre);
  pc_teacher.add(pre);
  pc_corpus.add(pre);
  pre->add_option("--out", pc_out, "shard directory")->required();
  pre->add_option("--k", pc_k, "beam width (integer or inf)");
  pre->add_option("--eps", pc_eps, "pruning threshold");
  pre->add_option("--shards", pc_shards, "shard count");
  pre->add_option("--workers", pc_workers, "worker threads");

  // distill
  auto* distill = app.add_subcommand("distill", "train a student with the byte-level loss");
  TokenizerArgs ds_tok, ds_teacher_tok;
  TeacherArgs ds_teacher;
  CorpusArgs ds_corpus;
  std::string ds_shards, ds_init, ds_out, ds_metrics, ds_init_out;
  std::optional<std::size_t> ds_steps, ds_batch, ds_warmup;
  std::optional<double> ds_lr, ds_lkl, ds_lb;
  bool ds_sft_only = false;
  ds_tok.add(distill);
  ds_teacher_tok.add(distill, "teacher-");
  ds_teacher.add(distill);
  ds_corpus.add(distill);
  distill->add_option("--shards", ds_shards, "precomputed shard directory (default: targets on the fly)");
  distill->add_flag("--sft-only", ds_sft_only, "train without teacher targets");
  distill->add_option("--init", ds_init, "initial student checkpoint");
  distill->add_option("--init-out", ds_init_out, "write the initial student here");
  distill->add_option("--out", ds_out, "trained checkpoint path")->required();
  distill->add_option("--metrics", ds_metrics, "metrics trace path (JSONL)");
  distill->add_option("--steps", ds_steps, "optimizer steps");
  distill->add_option("--batch-size", ds_batch, "samples per step");
  distill->add_option("--warmup", ds_warmup, "warm-up steps");
  distill->add_option("--lr", ds_lr, "peak learning rate");
  distill->add_option("--lambda-kl", ds_lkl, "weight of the byte KL term");
  distill->add_option("--lambda-byte", ds_lb, "weight of the byte CE term");

  // byte-sft
  auto* bsft = app.add_subcommand("byte-sft", "byte-only fine-tuning with a frozen token head");
  TokenizerArgs bs_tok;
  CorpusArgs bs_corpus;
  std::string bs_init, bs_out, bs_records;
  std::size_t bs_held_out = 0;
  std::optional<std::size_t> bs_epochs;
  std::optional<double> bs_lr;
  bs_tok.add(bsft);
  bs_corpus.add(bsft);
  bsft->add_option("--held-out", bs_held_out, "validation samples taken from the end of the corpus")->required();
  bsft->add_option("--init", bs_init, "initial student checkpoint");
  bsft->add_option("--out", bs_out, "trained checkpoint path");
  bsft->add_option("--records", bs_records, "per-epoch records path (JSONL)");
  bsft->add_option("--epochs", bs_epochs, "epochs");
  bsft->add_option("--lr", bs_lr, "peak learning rate");

  // naive-ctd
  auto* nctd = app.add_subcommand("naive-ctd", "student token probabilities by chaining teacher byte conditionals");
  TokenizerArgs nc_tok, nc_teacher_tok;
  TeacherArgs nc_teacher;
  std::string nc_input, nc_hex;
  std::size_t nc_top = 10;
  nc_tok.add(nctd);
  nc_teacher_tok.add(nctd, "teacher-");
  nc_teacher.add(nctd);
  nctd->add_option("--input", nc_input, "context text");
  nctd->add_option("--hex", nc_hex, "context hex");
  nctd->add_option("--top", nc_top, "tokens shown")->capture_default_str();

  // report
  auto* report = app.add_subcommand("report", "tables and plots from a JSONL record file");
  std::string rp_kind = "sweep", rp_input, rp_out;
  report->add_option("--kind", rp_kind, "sweep, metrics or sft")
      ->check(CLI::IsMember({"sweep", "metrics", "sft"}))
      ->capture_default_str();
  report->add_option("--input", rp_input, "JSONL input")->required();
  report->add_option("--out", rp_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (*seed_opt) common.seed = seed_value;

  try {
    auto seed = [&](const Config& c) {
      nlohmann::json j = nlohmann::json::parse(take([&] {
        char* s = nullptr;
        check(bld_config_to_json(c.get(), &s), "config");
        return s;
      }()));
      return j.at("seed").get<uint64_t>();
    };
    auto set_k = [&](const std::string& section, const std::string& k) {
      if (k.empty()) return;
      if (k == "inf") {
        common.set(section, "k", "inf");
      } else {
        common.set(section, "k", parse_list<std::size_t>(k, "K").at(0));
      }
    };

    if (*vbuild) {
      Config cfg = common.load();
      Tokenizer t;
      if (!vb_builtin.empty()) {
        check(bld_tokenizer_builtin(vb_builtin.c_str(), t.out()), "vocab");
      } else if (!vb_tokens.empty()) {
        check(bld_tokenizer_from_token_list(vb_tokens.c_str(), vb_merges.empty() ? nullptr : vb_merges.c_str(), t.out()),
              "vocab");
      } else {
        if (vb_size == 0) throw StageError("vocab: give --builtin, --tokens, or a corpus with --size");
        Corpus c = vb_corpus.load(seed(cfg));
        check(bld_tokenizer_from_corpus(c.get(), vb_size, vb_suffix ? 1 : 0, t.out()), "vocab");
      }
      check(bld_tokenizer_save(t.get(), vb_out.c_str(), vb_merges_out.empty() ? nullptr : vb_merges_out.c_str()), "vocab");
      std::printf("vocabulary: %zu entries (including eos), fingerprint %016llx\n", bld_tokenizer_vocab_size(t.get()),
                  static_cast<unsigned long long>(bld_tokenizer_fingerprint(t.get())));
      return 0;
    }

    if (*tokenize) {
      Tokenizer t = tk_tok.load("tokenize");
      auto bytes = input_bytes(tk_input, tk_hex);
      std::vector<int32_t> ids(bytes.size() + 1);
      std::size_t n = 0;
      check(bld_tokenize(t.get(), bytes.data(), bytes.size(), ids.data(), ids.size(), &n), "tokenize");
      for (std::size_t i = 0; i < n; ++i) {
        char* hex = nullptr;
        check(bld_token_bytes(t.get(), ids[i], &hex), "tokenize");
        std::printf("%d\t%s\n", ids[i], take(hex).c_str());
      }
      return 0;
    }

    if (*bp_exact || *bp_beam) {
      if (*bp_beam) {
        set_k("beam", bp_k);
        if (bp_eps) common.set("beam", "epsilon", *bp_eps);
      }
      Config cfg = common.load();
      nlohmann::json cj = nlohmann::json::parse(take([&] {
        char* s = nullptr;
        check(bld_config_to_json(cfg.get(), &s), "config");
        return s;
      }()));
      Tokenizer t = bp_tok.load("tokenizer");
      Model m = bp_teacher.load(t, cj.at("seed").get<uint64_t>());
      auto bytes = input_bytes(bp_input, bp_hex);
      std::vector<double> dists((bytes.size() + 1) * BLD_BYTE_DIST_SIZE);
      if (*bp_exact) {
        for (std::size_t i = 0; i <= bytes.size(); ++i)
          check(bld_exact_next_byte(m.get(), bytes.data(), i, dists.data() + i * BLD_BYTE_DIST_SIZE), "byteprobs exact");
        double lp = 0.0;
        check(bld_exact_prefix_logprob(m.get(), bytes.data(), bytes.size(), &lp), "byteprobs exact");
        std::printf("P(prefix) = %.12g\n", std::exp(lp));
      } else {
        const auto& kj = cj.at("beam").at("k");
        std::size_t k = kj.is_string() ? BLD_UNBOUNDED_BEAM : kj.get<std::size_t>();
        double eps = cj.at("beam").at("epsilon").get<double>();
        check(bld_beam_stream(m.get(), bytes.data(), bytes.size(), k, eps, dists.data()), "byteprobs beam");
      }
      for (std::size_t i = 0; i <= bytes.size(); ++i) {
        std::printf("position %zu after \"%s\":", i, context_label(bytes, i).c_str());
        print_dist(dists.data() + i * BLD_BYTE_DIST_SIZE, bp_top);
      }
      return 0;
    }

    if (*sweep) {
      if (!sw_k.empty()) common.set("sweep", "ks", parse_list<std::size_t>(sw_k, "K"));
      if (!sw_eps.empty()) common.set("sweep", "epsilons", parse_list<double>(sw_eps, "epsilon"));
      if (sw_repeats) common.set("sweep", "repeats", sw_repeats);
      Config cfg = common.load();
      uint64_t s = seed(cfg);
      Tokenizer t = sw_tok.load("tokenizer");
      Model m = sw_teacher.load(t, s);
      Corpus c = sw_corpus.load(s);
      char* out = nullptr;
      check(bld_sweep(m.get(), c.get(), cfg.get(), &out), "sweep");
      std::string notes = bld_last_error();
      std::string jsonl = take(out);
      if (!notes.empty()) std::cerr << notes;
      if (!sw_out.empty()) write_text(sw_out, jsonl);
      std::string dir = sw_report.empty() ? std::string() : sw_report;
      if (dir.empty()) {
        std::fputs(jsonl.c_str(), stdout);
      } else {
        char* table = nullptr;
        check(bld_report("sweep", jsonl.c_str(), dir.c_str(), &table), "report");
        std::fputs(take(table).c_str(), stdout);
      }
      return 0;
    }

    if (*pre) {
      set_k("beam", pc_k);
      if (pc_eps) common.set("beam", "epsilon", *pc_eps);
      if (pc_shards) common.set("data", "shards", *pc_shards);
      if (pc_workers) common.set("data", "workers", *pc_workers);
      Config cfg = common.load();
      uint64_t s = seed(cfg);
      Tokenizer t = pc_tok.load("tokenizer");
      Model m = pc_teacher.load(t, s);
      Corpus c = pc_corpus.load(s);
      std::size_t written = 0, failed = 0;
      check(bld_precompute(m.get(), c.get(), cfg.get(), pc_out.c_str(), &written, &failed), "precompute");
      std::printf("precompute: %zu samples written, %zu failed\n", written, failed);
      return 0;
    }

    if (*distill) {
      if (ds_steps) common.set("schedule", "steps", *ds_steps);
      if (ds_batch) common.set("schedule", "batch_size", *ds_batch);
      if (ds_warmup) common.set("schedule", "warmup_steps", *ds_warmup);
      if (ds_lr) common.set("optimizer", "lr", *ds_lr);
      if (ds_lkl) common.set("loss", "lambda_kl", *ds_lkl);
      if (ds_lb) common.set("loss", "lambda_byte", *ds_lb);
      Config cfg = common.load();
      uint64_t s = seed(cfg);
      Tokenizer t = ds_tok.load("tokenizer");
      Corpus c = ds_corpus.load(s);
      Student st;
      if (!ds_init.empty()) {
        check(bld_student_load(ds_init.c_str(), st.out()), "student");
      } else {
        check(bld_student_new(t.get(), cfg.get(), s, st.out()), "student");
      }
      if (!ds_init_out.empty()) check(bld_student_save(st.get(), ds_init_out.c_str()), "student");
      Tokenizer tt;
      Model teacher;
      if (!ds_sft_only) {
        tt = ds_teacher_tok.load("teacher tokenizer");
        teacher = ds_teacher.load(tt, s);
      }
      char* metrics = nullptr;
      check(bld_train(st.get(), t.get(), c.get(), teacher.get(), ds_shards.empty() ? nullptr : ds_shards.c_str(),
                      cfg.get(), &metrics),
            "distill");
      std::string trace = take(metrics);
      if (!ds_metrics.empty()) write_text(ds_metrics, trace);
      check(bld_student_save(st.get(), ds_out.c_str()), "checkpoint");
      std::size_t lines = static_cast<std::size_t>(std::count(trace.begin(), trace.end(), '\n'));
      std::printf("distill: %zu steps, checkpoint %s\n", lines, ds_out.c_str());
      return 0;
    }

    if (*bsft) {
      if (bs_epochs) common.set("schedule", "sft_epochs", *bs_epochs);
      if (bs_lr) common.set("optimizer", "lr", *bs_lr);
      Config cfg = common.load();
      uint64_t s = seed(cfg);
      Tokenizer t = bs_tok.load("tokenizer");
      Corpus all = bs_corpus.load(s);
      Corpus train, val;
      check(bld_corpus_split(all.get(), bs_held_out, train.out(), val.out()), "ingest");
      Student st;
      if (!bs_init.empty()) {
        check(bld_student_load(bs_init.c_str(), st.out()), "student");
      } else {
        check(bld_student_new(t.get(), cfg.get(), s, st.out()), "student");
      }
      char* records = nullptr;
      check(bld_byte_sft(st.get(), t.get(), train.get(), val.get(), cfg.get(), &records), "byte-sft");
      std::string text = take(records);
      if (!bs_records.empty()) write_text(bs_records, text);
      if (!bs_out.empty()) check(bld_student_save(st.get(), bs_out.c_str()), "checkpoint");
      std::fputs(text.c_str(), stdout);
      return 0;
    }

    if (*nctd) {
      Config cfg = common.load();
      uint64_t s = seed(cfg);
      Tokenizer student_tok = nc_tok.load("student tokenizer");
      Tokenizer teacher_tok = nc_teacher_tok.load("teacher tokenizer");
      Model m = nc_teacher.load(teacher_tok, s);
      auto bytes = input_bytes(nc_input, nc_hex);
      std::vector<double> probs(bld_tokenizer_vocab_size(student_tok.get()));
      double sum = 0.0;
      check(bld_naive_ctd(m.get(), student_tok.get(), bytes.data(), bytes.size(), probs.data(), &sum), "naive-ctd");
      std::vector<std::size_t> order(probs.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
      for (std::size_t i = 0; i < std::min(nc_top, order.size()); ++i) {
        char* hex = nullptr;
        check(bld_token_bytes(student_tok.get(), static_cast<int32_t>(order[i]), &hex), "naive-ctd");
        std::string h = take(hex);
        std::printf("%zu\t%s\t%.12g\n", order[i], h.empty() ? "<eos>" : h.c_str(), probs[order[i]]);
      }
      std::printf("sum over student vocabulary: %.12g\n", sum);
      return 0;
    }

    if (*report) {
      std::string text = read_text(rp_input);
      char* table = nullptr;
      check(bld_report(rp_kind.c_str(), text.c_str(), rp_out.c_str(), &table), "report");
      std::fputs(take(table).c_str(), stdout);
      return 0;
    }
  } catch (const StageError& e) {
    std::fprintf(stderr, "bld: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bld: %s\n", e.what());
    return 1;
  }
  return 0;
}
