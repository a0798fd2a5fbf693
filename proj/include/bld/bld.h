/* C interface to the byte-level distillation library. All handles are opaque.
 * Every function returns a status code; on failure bld_last_error() holds a
 * message for the calling thread. Strings returned through char** are owned by
 * the caller and released with bld_string_free. */
#ifndef BLD_BLD_H
#define BLD_BLD_H

#include <stddef.h>
#include <stdint.h>

#if defined(BLD_BUILDING_LIBRARY)
#define BLD_API __attribute__((visibility("default")))
#else
#define BLD_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bld_status {
  BLD_OK = 0,
  BLD_ERR_INVALID_ARGUMENT = 1,
  BLD_ERR_LOOKUP = 2,
  BLD_ERR_CONSTRUCTION = 3,
  BLD_ERR_IO = 4,
  BLD_ERR_FORMAT = 5,
  BLD_ERR_UNSUPPORTED_VERSION = 6,
  BLD_ERR_FINGERPRINT = 7,
  BLD_ERR_TRUNCATED = 8,
  BLD_ERR_FEASIBILITY = 9,
  BLD_ERR_CONDITIONING = 10,
  BLD_ERR_DEGENERATE = 11,
  BLD_ERR_ADVANCE = 12,
  BLD_ERR_NUMERIC = 13,
  BLD_ERR_CONTRACT = 14,
  BLD_ERR_COVERAGE = 15,
  BLD_ERR_CONFIG = 16,
  BLD_ERR_EMPTY_INPUT = 17,
  BLD_ERR_INTERNAL = 99
} bld_status;

/* Number of slots in a next-byte distribution: 256 bytes then end-of-sequence. */
#define BLD_BYTE_DIST_SIZE 257
#define BLD_UNBOUNDED_BEAM SIZE_MAX

typedef struct bld_tokenizer bld_tokenizer;
typedef struct bld_model bld_model;
typedef struct bld_student bld_student;
typedef struct bld_corpus bld_corpus;
typedef struct bld_config bld_config;
typedef struct bld_lattice bld_lattice;

BLD_API const char* bld_last_error(void);
BLD_API const char* bld_status_name(bld_status status);
BLD_API const char* bld_version(void);
BLD_API void bld_string_free(char* s);

/* Configuration (JSON; unknown keys rejected). */
BLD_API bld_status bld_config_default(bld_config** out);
BLD_API bld_status bld_config_parse(const char* json, bld_config** out);
BLD_API bld_status bld_config_load(const char* path, bld_config** out);
BLD_API bld_status bld_config_to_json(const bld_config* config, char** out);
BLD_API void bld_config_free(bld_config* config);

/* Tokenizers. */
BLD_API bld_status bld_tokenizer_builtin(const char* name, bld_tokenizer** out);
BLD_API bld_status bld_tokenizer_load(const char* vocab_path, const char* merges_path, bld_tokenizer** out);
/* Tokens and merges given as text files of hex strings: one token per line;
 * one "left right" pair per line. merges_path may be NULL. */
BLD_API bld_status bld_tokenizer_from_token_list(const char* tokens_path, const char* merges_path, bld_tokenizer** out);
/* Word-chain tokenizer over a corpus; direction 0 = prefix chains, 1 = suffix chains. */
BLD_API bld_status bld_tokenizer_from_corpus(const bld_corpus* corpus, size_t user_tokens, int direction,
                                             bld_tokenizer** out);
BLD_API bld_status bld_tokenizer_save(const bld_tokenizer* tok, const char* vocab_path, const char* merges_path);
BLD_API size_t bld_tokenizer_vocab_size(const bld_tokenizer* tok);
BLD_API uint64_t bld_tokenizer_fingerprint(const bld_tokenizer* tok);
/* Fills ids (capacity cap) and sets *count; returns BLD_ERR_INVALID_ARGUMENT with
 * *count set to the required size when cap is too small. */
BLD_API bld_status bld_tokenize(const bld_tokenizer* tok, const uint8_t* bytes, size_t len, int32_t* ids, size_t cap,
                                size_t* count);
BLD_API bld_status bld_decode(const bld_tokenizer* tok, const int32_t* ids, size_t n, char** out_hex);
/* Hex-encoded bytes of one token; eos yields an empty string. */
BLD_API bld_status bld_token_bytes(const bld_tokenizer* tok, int32_t id, char** out_hex);
BLD_API void bld_tokenizer_free(bld_tokenizer* tok);

/* Corpora. */
BLD_API bld_status bld_corpus_load(const char* path, bld_corpus** out, size_t* skipped_empty);
/* `lexicon` words, `count` sentences. */
BLD_API bld_status bld_corpus_synthetic(uint64_t seed, size_t lexicon, size_t count, bld_corpus** out);
BLD_API bld_status bld_corpus_save(const bld_corpus* corpus, const char* path);
BLD_API size_t bld_corpus_size(const bld_corpus* corpus);
/* Splits off the last `held_out` samples into a second corpus. */
BLD_API bld_status bld_corpus_split(const bld_corpus* corpus, size_t held_out, bld_corpus** train, bld_corpus** test);
BLD_API void bld_corpus_free(bld_corpus* corpus);

/* Teacher language models over a tokenizer. The uniform model spreads its mass
 * over the user tokens, or over every content token when there are none. */
BLD_API bld_status bld_model_uniform(const bld_tokenizer* tok, double eos_weight, bld_model** out);
BLD_API bld_status bld_model_bigram(const bld_tokenizer* tok, const bld_corpus* corpus, double alpha, bld_model** out);
BLD_API bld_status bld_model_random(const bld_tokenizer* tok, uint64_t seed, double eos_weight, bld_model** out);
BLD_API bld_status bld_model_from_student(const bld_tokenizer* tok, const bld_student* student, bld_model** out);
/* probs has vocab_size entries (content tokens then eos). */
BLD_API bld_status bld_model_next_token(const bld_model* model, const int32_t* prefix, size_t n, double* probs);
BLD_API void bld_model_free(bld_model* model);

/* Exact byte probabilities. dist has BLD_BYTE_DIST_SIZE log-probabilities. */
BLD_API bld_status bld_exact_prefix_logprob(const bld_model* model, const uint8_t* bytes, size_t len, double* out);
BLD_API bld_status bld_exact_next_byte(const bld_model* model, const uint8_t* bytes, size_t len, double* dist);

/* Beam lattice. */
BLD_API bld_status bld_lattice_new(const bld_model* model, size_t k, double epsilon, bld_lattice** out);
BLD_API bld_status bld_lattice_logp_next(const bld_lattice* lat, double* dist);
BLD_API bld_status bld_lattice_advance(bld_lattice* lat, uint8_t byte);
BLD_API size_t bld_lattice_size(const bld_lattice* lat);
BLD_API void bld_lattice_free(bld_lattice* lat);
/* (len + 1) x BLD_BYTE_DIST_SIZE log-probabilities: the conditional before each
 * byte and after the last one. */
BLD_API bld_status bld_beam_stream(const bld_model* model, const uint8_t* bytes, size_t len, size_t k, double epsilon,
                                   double* dists);

/* K/epsilon sweep using the config's sweep section; *out_jsonl gets one record per row. */
BLD_API bld_status bld_sweep(const bld_model* model, const bld_corpus* corpus, const bld_config* config,
                             char** out_jsonl);

/* Writes shards for the corpus under out_dir using the config's beam and data
 * sections. */
BLD_API bld_status bld_precompute(const bld_model* teacher, const bld_corpus* corpus, const bld_config* config,
                                  const char* out_dir, size_t* written, size_t* failed);

/* Students. */
BLD_API bld_status bld_student_new(const bld_tokenizer* tok, const bld_config* config, uint64_t seed,
                                   bld_student** out);
/* Student for target_tok initialized from source by vocabulary transfer. */
BLD_API bld_status bld_student_transfer(const bld_student* source, const bld_tokenizer* source_tok,
                                        const bld_tokenizer* target_tok, uint64_t seed, bld_student** out);
BLD_API bld_status bld_student_load(const char* path, bld_student** out);
BLD_API bld_status bld_student_save(const bld_student* student, const char* path);
BLD_API bld_status bld_student_detach_byte_head(const bld_student* student, bld_student** out);
BLD_API size_t bld_student_parameter_count(const bld_student* student);
BLD_API int bld_student_equal(const bld_student* a, const bld_student* b);
BLD_API void bld_student_free(bld_student* student);

/* Training. Teacher targets come from shard_dir when non-NULL, else on the fly
 * from teacher when non-NULL, else training is plain token SFT. The config's
 * loss weights apply. */
BLD_API bld_status bld_train(bld_student* student, const bld_tokenizer* tok, const bld_corpus* corpus,
                             const bld_model* teacher, const char* shard_dir, const bld_config* config,
                             char** out_metrics_jsonl);
/* Mean per-sequence losses as a JSON object. */
BLD_API bld_status bld_evaluate(const bld_student* student, const bld_tokenizer* tok, const bld_corpus* corpus,
                                char** out_json);
BLD_API bld_status bld_byte_sft(bld_student* student, const bld_tokenizer* tok, const bld_corpus* train,
                                const bld_corpus* val, const bld_config* config, char** out_jsonl);

/* Naive byte-chain token probabilities: probs has student vocab_size entries. */
BLD_API bld_status bld_naive_ctd(const bld_model* teacher, const bld_tokenizer* student_tok, const uint8_t* context,
                                 size_t len, double* probs, double* sum);

/* Reports. kind: "sweep", "metrics" or "sft"; input is the matching JSONL text.
 * *out_table receives the text table. */
BLD_API bld_status bld_report(const char* kind, const char* jsonl, const char* out_dir, char** out_table);

#ifdef __cplusplus
}
#endif

#endif
