#include "bld/bld.h"

#include <cstring>
#include <memory>
#include <string>

#include "bld/beam.hpp"
#include "bld/distill.hpp"
#include "bld/exact.hpp"
#include "bld/pipeline.hpp"
#include "bld/synthetic.hpp"
#include "json.hpp"

struct bld_tokenizer {
  bld::TokenizerPtr tok;
};
struct bld_model {
  bld::LanguageModelPtr lm;
};
struct bld_student {
  std::shared_ptr<bld::StudentModel> model;
};
struct bld_corpus {
  std::vector<bld::ByteString> samples;
};
struct bld_config {
  bld::RunConfig cfg;
};
struct bld_lattice {
  bld::BeamLattice lat;
};

namespace {

thread_local std::string g_last_error;

bld_status status_of(bld::ErrorKind kind) {
  using K = bld::ErrorKind;
  switch (kind) {
    case K::InvalidArgument: return BLD_ERR_INVALID_ARGUMENT;
    case K::Lookup: return BLD_ERR_LOOKUP;
    case K::Construction: return BLD_ERR_CONSTRUCTION;
    case K::Io: return BLD_ERR_IO;
    case K::Format: return BLD_ERR_FORMAT;
    case K::UnsupportedVersion: return BLD_ERR_UNSUPPORTED_VERSION;
    case K::Fingerprint: return BLD_ERR_FINGERPRINT;
    case K::Truncated: return BLD_ERR_TRUNCATED;
    case K::Feasibility: return BLD_ERR_FEASIBILITY;
    case K::Conditioning: return BLD_ERR_CONDITIONING;
    case K::Degenerate: return BLD_ERR_DEGENERATE;
    case K::Advance: return BLD_ERR_ADVANCE;
    case K::Numeric: return BLD_ERR_NUMERIC;
    case K::Contract: return BLD_ERR_CONTRACT;
    case K::Coverage: return BLD_ERR_COVERAGE;
    case K::Config: return BLD_ERR_CONFIG;
    case K::EmptyInput: return BLD_ERR_EMPTY_INPUT;
  }
  return BLD_ERR_INTERNAL;
}

template <typename F>
bld_status guard(F&& f) {
  g_last_error.clear();
  try {
    f();
    return BLD_OK;
  } catch (const bld::Error& e) {
    g_last_error = e.what();
    return status_of(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return BLD_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return BLD_ERR_INTERNAL;
  }
}

template <typename T>
const T& need(const T* p, const char* what) {
  if (!p) bld::fail(bld::ErrorKind::InvalidArgument, std::string(what) + " is null");
  return *p;
}

const char* need(const char* p, const char* what) {
  if (!p) bld::fail(bld::ErrorKind::InvalidArgument, std::string(what) + " is null");
  return p;
}

template <typename T>
T& need_mut(T* p, const char* what) {
  if (!p) bld::fail(bld::ErrorKind::InvalidArgument, std::string(what) + " is null");
  return *p;
}

void need_out(const void* p) {
  if (!p) bld::fail(bld::ErrorKind::InvalidArgument, "output pointer is null");
}

std::span<const bld::Byte> bytes_of(const uint8_t* p, size_t len) {
  if (!p && len > 0) bld::fail(bld::ErrorKind::InvalidArgument, "byte pointer is null");
  return {p, len};
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void copy_dist(const bld::ByteDistribution& d, double* out) {
  for (std::size_t i = 0; i < bld::kByteDistSize; ++i) out[i] = d.logp[i];
}

std::vector<bld::ByteString> parse_token_list(std::string_view text) {
  std::vector<bld::ByteString> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(bld::hex_decode(line));
    } catch (const bld::Error& e) {
      bld::fail(bld::ErrorKind::Format, "token list line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

bld::StudentConfig student_config(const bld::Tokenizer& tok, const bld::RunConfig& cfg, uint64_t seed) {
  bld::StudentConfig c = bld::student_config_for(tok, cfg.d, seed);
  c.layers = cfg.layers;
  c.max_seq_len = cfg.max_seq_len;
  c.byte_heads = cfg.byte_heads;
  c.byte_vocab = cfg.byte_vocab;
  return c;
}

}  // namespace

extern "C" {

const char* bld_last_error(void) { return g_last_error.c_str(); }

const char* bld_status_name(bld_status status) {
  switch (status) {
    case BLD_OK: return "ok";
    case BLD_ERR_INVALID_ARGUMENT: return "invalid argument";
    case BLD_ERR_LOOKUP: return "lookup error";
    case BLD_ERR_CONSTRUCTION: return "construction error";
    case BLD_ERR_IO: return "I/O error";
    case BLD_ERR_FORMAT: return "format error";
    case BLD_ERR_UNSUPPORTED_VERSION: return "unsupported version";
    case BLD_ERR_FINGERPRINT: return "fingerprint mismatch";
    case BLD_ERR_TRUNCATED: return "truncated input";
    case BLD_ERR_FEASIBILITY: return "feasibility limit";
    case BLD_ERR_CONDITIONING: return "zero-probability conditioning";
    case BLD_ERR_DEGENERATE: return "degenerate lattice";
    case BLD_ERR_ADVANCE: return "unreachable byte";
    case BLD_ERR_NUMERIC: return "numeric error";
    case BLD_ERR_CONTRACT: return "contract violation";
    case BLD_ERR_COVERAGE: return "coverage error";
    case BLD_ERR_CONFIG: return "config error";
    case BLD_ERR_EMPTY_INPUT: return "empty input";
    case BLD_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* bld_version(void) { return "0.1.0"; }

void bld_string_free(char* s) { std::free(s); }

bld_status bld_config_default(bld_config** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_config{bld::default_run_config()};
  });
}

bld_status bld_config_parse(const char* json, bld_config** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_config{bld::parse_run_config(need(json, "json"))};
  });
}

bld_status bld_config_load(const char* path, bld_config** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_config{bld::load_run_config(need(path, "path"))};
  });
}

bld_status bld_config_to_json(const bld_config* config, char** out) {
  return guard([&] {
    need_out(out);
    *out = dup_string(bld::serialize_run_config(need(config, "config").cfg));
  });
}

void bld_config_free(bld_config* config) { delete config; }

bld_status bld_tokenizer_builtin(const char* name, bld_tokenizer** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_tokenizer{bld::builtin_tokenizer(need(name, "name"))};
  });
}

bld_status bld_tokenizer_load(const char* vocab_path, const char* merges_path, bld_tokenizer** out) {
  return guard([&] {
    need_out(out);
    std::optional<std::filesystem::path> merges;
    if (merges_path) merges = merges_path;
    *out = new bld_tokenizer{bld::load_tokenizer(need(vocab_path, "vocab path"), merges)};
  });
}

bld_status bld_tokenizer_from_token_list(const char* tokens_path, const char* merges_path, bld_tokenizer** out) {
  return guard([&] {
    need_out(out);
    auto tokens = parse_token_list(bld::read_file(need(tokens_path, "tokens path")));
    bld::MergeRules merges;
    if (merges_path) merges = bld::parse_merges(bld::read_file(merges_path));
    *out = new bld_tokenizer{std::make_shared<const bld::Tokenizer>(bld::Tokenizer::build(tokens, merges))};
  });
}

bld_status bld_tokenizer_from_corpus(const bld_corpus* corpus, size_t user_tokens, int direction,
                                     bld_tokenizer** out) {
  return guard([&] {
    need_out(out);
    if (direction != 0 && direction != 1) bld::fail(bld::ErrorKind::InvalidArgument, "direction must be 0 or 1");
    auto dir = direction == 0 ? bld::ChainDirection::Prefix : bld::ChainDirection::Suffix;
    *out = new bld_tokenizer{std::make_shared<const bld::Tokenizer>(
        bld::chain_tokenizer(need(corpus, "corpus").samples, user_tokens, dir))};
  });
}

bld_status bld_tokenizer_save(const bld_tokenizer* tok, const char* vocab_path, const char* merges_path) {
  return guard([&] {
    const auto& t = *need(tok, "tokenizer").tok;
    bld::write_vocab_file(need(vocab_path, "vocab path"), t.vocab());
    if (merges_path) bld::write_merges_file(merges_path, t.merges());
  });
}

size_t bld_tokenizer_vocab_size(const bld_tokenizer* tok) { return tok ? tok->tok->vocab().size() : 0; }

uint64_t bld_tokenizer_fingerprint(const bld_tokenizer* tok) { return tok ? tok->tok->vocab().fingerprint() : 0; }

bld_status bld_tokenize(const bld_tokenizer* tok, const uint8_t* bytes, size_t len, int32_t* ids, size_t cap,
                        size_t* count) {
  return guard([&] {
    need_out(count);
    auto out = need(tok, "tokenizer").tok->tokenize(bytes_of(bytes, len));
    *count = out.size();
    if (out.size() > cap || (!ids && !out.empty()))
      bld::fail(bld::ErrorKind::InvalidArgument, "id buffer holds " + std::to_string(cap) + " ids, " +
                                                     std::to_string(out.size()) + " needed");
    std::copy(out.begin(), out.end(), ids);
  });
}

bld_status bld_decode(const bld_tokenizer* tok, const int32_t* ids, size_t n, char** out_hex) {
  return guard([&] {
    need_out(out_hex);
    if (!ids && n > 0) bld::fail(bld::ErrorKind::InvalidArgument, "id pointer is null");
    auto b = need(tok, "tokenizer").tok->decode(std::span<const int32_t>(ids, n));
    *out_hex = dup_string(bld::hex_encode(b));
  });
}

bld_status bld_token_bytes(const bld_tokenizer* tok, int32_t id, char** out_hex) {
  return guard([&] {
    need_out(out_hex);
    const auto& v = need(tok, "tokenizer").tok->vocab();
    *out_hex = dup_string(id == v.eos_id() ? std::string() : bld::hex_encode(v.bytes(id)));
  });
}

void bld_tokenizer_free(bld_tokenizer* tok) { delete tok; }

bld_status bld_corpus_load(const char* path, bld_corpus** out, size_t* skipped_empty) {
  return guard([&] {
    need_out(out);
    auto r = bld::ingest(need(path, "path"));
    if (skipped_empty) *skipped_empty = r.skipped_empty;
    *out = new bld_corpus{std::move(r.samples)};
  });
}

bld_status bld_corpus_synthetic(uint64_t seed, size_t lexicon, size_t count, bld_corpus** out) {
  return guard([&] {
    need_out(out);
    if (count == 0) bld::fail(bld::ErrorKind::EmptyInput, "synthetic corpus needs at least one sample");
    auto lang = bld::SyntheticLanguage::make(seed, lexicon);
    *out = new bld_corpus{lang.sample(count, seed + 1)};
  });
}

bld_status bld_corpus_save(const bld_corpus* corpus, const char* path) {
  return guard([&] {
    std::string text;
    for (const auto& s : need(corpus, "corpus").samples) {
      text.append(s.begin(), s.end());
      text += '\n';
    }
    bld::write_file_atomic(need(path, "path"), text);
  });
}

size_t bld_corpus_size(const bld_corpus* corpus) { return corpus ? corpus->samples.size() : 0; }

bld_status bld_corpus_split(const bld_corpus* corpus, size_t held_out, bld_corpus** train, bld_corpus** test) {
  return guard([&] {
    need_out(train);
    need_out(test);
    const auto& s = need(corpus, "corpus").samples;
    if (held_out == 0 || held_out >= s.size())
      bld::fail(bld::ErrorKind::InvalidArgument, "held-out count must leave both parts non-empty");
    auto cut = s.begin() + static_cast<std::ptrdiff_t>(s.size() - held_out);
    auto a = std::make_unique<bld_corpus>(bld_corpus{{s.begin(), cut}});
    auto b = std::make_unique<bld_corpus>(bld_corpus{{cut, s.end()}});
    *train = a.release();
    *test = b.release();
  });
}

void bld_corpus_free(bld_corpus* corpus) { delete corpus; }

bld_status bld_model_uniform(const bld_tokenizer* tok, double eos_weight, bld_model** out) {
  return guard([&] {
    need_out(out);
    const auto& t = need(tok, "tokenizer").tok;
    std::vector<bld::TokenId> support;
    for (std::size_t i = 0; i < t->vocab().user_token_count(); ++i) support.push_back(static_cast<bld::TokenId>(i));
    *out = new bld_model{std::make_shared<bld::UniformLM>(t, std::move(support), eos_weight)};
  });
}

bld_status bld_model_bigram(const bld_tokenizer* tok, const bld_corpus* corpus, double alpha, bld_model** out) {
  return guard([&] {
    need_out(out);
    const auto& t = need(tok, "tokenizer").tok;
    auto counts = bld::BigramLM::count(*t, need(corpus, "corpus").samples);
    *out = new bld_model{std::make_shared<bld::BigramLM>(t, std::move(counts), alpha)};
  });
}

bld_status bld_model_random(const bld_tokenizer* tok, uint64_t seed, double eos_weight, bld_model** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_model{std::make_shared<bld::RandomLM>(need(tok, "tokenizer").tok, seed,
                                                         std::vector<bld::TokenId>{}, eos_weight)};
  });
}

bld_status bld_model_from_student(const bld_tokenizer* tok, const bld_student* student, bld_model** out) {
  return guard([&] {
    need_out(out);
    auto snapshot = std::make_shared<const bld::StudentModel>(*need(student, "student").model);
    *out = new bld_model{std::make_shared<bld::StudentLM>(need(tok, "tokenizer").tok, snapshot)};
  });
}

bld_status bld_model_next_token(const bld_model* model, const int32_t* prefix, size_t n, double* probs) {
  return guard([&] {
    need_out(probs);
    if (!prefix && n > 0) bld::fail(bld::ErrorKind::InvalidArgument, "prefix pointer is null");
    auto d = need(model, "model").lm->next_token_dist(std::span<const int32_t>(prefix, n));
    std::copy(d.probs.begin(), d.probs.end(), probs);
  });
}

void bld_model_free(bld_model* model) { delete model; }

bld_status bld_exact_prefix_logprob(const bld_model* model, const uint8_t* bytes, size_t len, double* out) {
  return guard([&] {
    need_out(out);
    *out = bld::exact_prefix_logprob(*need(model, "model").lm, bytes_of(bytes, len));
  });
}

bld_status bld_exact_next_byte(const bld_model* model, const uint8_t* bytes, size_t len, double* dist) {
  return guard([&] {
    need_out(dist);
    copy_dist(bld::exact_next_byte_dist(*need(model, "model").lm, bytes_of(bytes, len)), dist);
  });
}

bld_status bld_lattice_new(const bld_model* model, size_t k, double epsilon, bld_lattice** out) {
  return guard([&] {
    need_out(out);
    bld::BeamParams p;
    p.k = k;
    p.epsilon = epsilon;
    *out = new bld_lattice{bld::BeamLattice(need(model, "model").lm, p)};
  });
}

bld_status bld_lattice_logp_next(const bld_lattice* lat, double* dist) {
  return guard([&] {
    need_out(dist);
    copy_dist(need(lat, "lattice").lat.logp_next(), dist);
  });
}

bld_status bld_lattice_advance(bld_lattice* lat, uint8_t byte) {
  return guard([&] { need_mut(lat, "lattice").lat.advance(byte); });
}

size_t bld_lattice_size(const bld_lattice* lat) { return lat ? lat->lat.hypotheses().size() : 0; }

void bld_lattice_free(bld_lattice* lat) { delete lat; }

bld_status bld_beam_stream(const bld_model* model, const uint8_t* bytes, size_t len, size_t k, double epsilon,
                           double* dists) {
  return guard([&] {
    need_out(dists);
    bld::BeamParams p;
    p.k = k;
    p.epsilon = epsilon;
    auto stream = bld::beam_byte_stream(need(model, "model").lm, bytes_of(bytes, len), p);
    for (std::size_t i = 0; i < stream.size(); ++i) copy_dist(stream[i], dists + i * bld::kByteDistSize);
  });
}

bld_status bld_sweep(const bld_model* model, const bld_corpus* corpus, const bld_config* config, char** out_jsonl) {
  return guard([&] {
    need_out(out_jsonl);
    auto report = bld::sweep(need(model, "model").lm, need(corpus, "corpus").samples, need(config, "config").cfg.sweep);
    std::string text = bld::serialize_sweep(report);
    for (const auto& e : report.errors) g_last_error += e + "\n";
    *out_jsonl = dup_string(text);
  });
}

bld_status bld_precompute(const bld_model* teacher, const bld_corpus* corpus, const bld_config* config,
                          const char* out_dir, size_t* written, size_t* failed) {
  return guard([&] {
    const auto& cfg = need(config, "config").cfg;
    const auto& samples = need(corpus, "corpus").samples;
    bld::ShardPlan plan(samples.size(), cfg.shards, cfg.workers);
    auto s = bld::precompute(samples, need(teacher, "teacher").lm, cfg.beam, plan, need(out_dir, "output directory"));
    if (written) *written = s.samples_written;
    if (failed) *failed = s.samples_failed;
  });
}

bld_status bld_student_new(const bld_tokenizer* tok, const bld_config* config, uint64_t seed, bld_student** out) {
  return guard([&] {
    need_out(out);
    auto c = student_config(*need(tok, "tokenizer").tok, need(config, "config").cfg, seed);
    *out = new bld_student{std::make_shared<bld::StudentModel>(c)};
  });
}

bld_status bld_student_transfer(const bld_student* source, const bld_tokenizer* source_tok,
                                const bld_tokenizer* target_tok, uint64_t seed, bld_student** out) {
  return guard([&] {
    need_out(out);
    auto m = bld::fvt_transfer(*need(source, "source").model, *need(source_tok, "source tokenizer").tok,
                               *need(target_tok, "target tokenizer").tok, seed);
    *out = new bld_student{std::make_shared<bld::StudentModel>(std::move(m))};
  });
}

bld_status bld_student_load(const char* path, bld_student** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_student{std::make_shared<bld::StudentModel>(bld::StudentModel::load(need(path, "path")))};
  });
}

bld_status bld_student_save(const bld_student* student, const char* path) {
  return guard([&] { need(student, "student").model->save(need(path, "path")); });
}

bld_status bld_student_detach_byte_head(const bld_student* student, bld_student** out) {
  return guard([&] {
    need_out(out);
    *out = new bld_student{std::make_shared<bld::StudentModel>(need(student, "student").model->detach_byte_head())};
  });
}

size_t bld_student_parameter_count(const bld_student* student) {
  return student ? student->model->parameter_count() : 0;
}

int bld_student_equal(const bld_student* a, const bld_student* b) {
  if (!a || !b) return 0;
  return *a->model == *b->model ? 1 : 0;
}

void bld_student_free(bld_student* student) { delete student; }

bld_status bld_train(bld_student* student, const bld_tokenizer* tok, const bld_corpus* corpus,
                     const bld_model* teacher, const char* shard_dir, const bld_config* config,
                     char** out_metrics_jsonl) {
  return guard([&] {
    auto& model = *need_mut(student, "student").model;
    const auto& t = need(tok, "tokenizer").tok;
    const auto& cfg = need(config, "config").cfg;
    const std::size_t heads = model.has_byte_head() ? model.config().byte_heads : 0;
    std::unique_ptr<bld::TargetProvider> provider;
    if (shard_dir) {
      std::optional<std::uint64_t> fp;
      if (teacher) fp = teacher->lm->vocab().fingerprint();
      provider = std::make_unique<bld::ShardTargets>(shard_dir, fp, t, heads);
    } else if (teacher) {
      provider = std::make_unique<bld::OnTheFlyTargets>(teacher->lm, t, cfg.beam, heads);
    }
    auto trace = bld::train(model, *t, need(corpus, "corpus").samples, provider.get(), cfg.train);
    if (out_metrics_jsonl) *out_metrics_jsonl = dup_string(bld::serialize_metrics(trace));
  });
}

bld_status bld_evaluate(const bld_student* student, const bld_tokenizer* tok, const bld_corpus* corpus,
                        char** out_json) {
  return guard([&] {
    need_out(out_json);
    auto l = bld::evaluate(*need(student, "student").model, *need(tok, "tokenizer").tok,
                           need(corpus, "corpus").samples, nullptr, bld::LossWeights{1.0, 0.0, 1.0});
    nlohmann::ordered_json j;
    j["token_ce"] = l.token_ce;
    j["byte_ce"] = l.byte_ce;
    *out_json = dup_string(j.dump());
  });
}

bld_status bld_byte_sft(bld_student* student, const bld_tokenizer* tok, const bld_corpus* train,
                        const bld_corpus* val, const bld_config* config, char** out_jsonl) {
  return guard([&] {
    const auto& cfg = need(config, "config").cfg;
    bld::SftConfig sc;
    sc.epochs = cfg.sft_epochs;
    sc.train = cfg.train;
    auto records = bld::byte_only_sft(*need_mut(student, "student").model, *need(tok, "tokenizer").tok,
                                      need(train, "train corpus").samples, need(val, "validation corpus").samples, sc);
    if (out_jsonl) *out_jsonl = dup_string(bld::serialize_sft(records));
  });
}

bld_status bld_naive_ctd(const bld_model* teacher, const bld_tokenizer* student_tok, const uint8_t* context,
                         size_t len, double* probs, double* sum) {
  return guard([&] {
    need_out(probs);
    bld::ExactByteSource source(need(teacher, "teacher").lm);
    auto r = bld::naive_ctd_token_probs(source, need(student_tok, "student tokenizer").tok->vocab(),
                                        bytes_of(context, len));
    std::copy(r.probs.begin(), r.probs.end(), probs);
    if (sum) *sum = r.sum;
  });
}

bld_status bld_report(const char* kind, const char* jsonl, const char* out_dir, char** out_table) {
  return guard([&] {
    std::string k = need(kind, "kind");
    std::string_view text = need(jsonl, "input");
    std::filesystem::path dir = need(out_dir, "output directory");
    bld::ReportFiles files;
    if (k == "sweep") {
      files = bld::emit_report(bld::parse_sweep(text), dir);
    } else if (k == "metrics") {
      files = bld::emit_report(bld::parse_metrics(text), dir);
    } else if (k == "sft") {
      files = bld::emit_report(bld::parse_sft(text), dir);
    } else {
      bld::fail(bld::ErrorKind::InvalidArgument, "unknown report kind '" + k + "'");
    }
    if (out_table) *out_table = dup_string(bld::read_file(files.table));
  });
}

}  // extern "C"
