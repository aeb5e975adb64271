#ifndef MWPGEN_H
#define MWPGEN_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MWPGEN_API __declspec(dllexport)
#else
#define MWPGEN_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mwpgen_status {
  MWPGEN_OK = 0,
  MWPGEN_E_USAGE = 2,
  MWPGEN_E_DATA = 3,
  MWPGEN_E_NUMERICAL = 4
} mwpgen_status;

typedef struct mwpgen_corpus mwpgen_corpus;
typedef struct mwpgen_config mwpgen_config;
typedef struct mwpgen_model mwpgen_model;

MWPGEN_API const char* mwpgen_version(void);

/* Message and context of the last failure on the calling thread. */
MWPGEN_API const char* mwpgen_last_error(void);
MWPGEN_API const char* mwpgen_last_error_context(void);

/* Frees strings returned through char** out parameters. */
MWPGEN_API void mwpgen_string_free(char* s);

/* Corpus: JSON Lines {"id", "mwp", "equation"}, number-masked on load. */
MWPGEN_API mwpgen_status mwpgen_corpus_load_jsonl(const char* path, int lowercase, mwpgen_corpus** out);
MWPGEN_API mwpgen_status mwpgen_corpus_synth(size_t n, uint64_t seed, mwpgen_corpus** out);
MWPGEN_API mwpgen_status mwpgen_corpus_subset(const mwpgen_corpus* c, const size_t* indices, size_t n,
                                              mwpgen_corpus** out);
MWPGEN_API size_t mwpgen_corpus_size(const mwpgen_corpus* c);
MWPGEN_API mwpgen_status mwpgen_corpus_write_jsonl(const mwpgen_corpus* c, const char* path);
MWPGEN_API mwpgen_status mwpgen_corpus_write_masked(const mwpgen_corpus* c, const char* path);
MWPGEN_API mwpgen_status mwpgen_corpus_write_vocab(const mwpgen_corpus* c, size_t min_freq, const char* path);
/* {"count", "mean_mwp_tokens", "mean_equation_symbols", "roundtrip_failures"} */
MWPGEN_API mwpgen_status mwpgen_corpus_stats(const mwpgen_corpus* c, char** out_json);
MWPGEN_API void mwpgen_corpus_free(mwpgen_corpus* c);

/* Configuration: defaults, then TOML, then key=value overrides. */
MWPGEN_API mwpgen_status mwpgen_config_new(mwpgen_config** out);
MWPGEN_API mwpgen_status mwpgen_config_load_toml(mwpgen_config* cfg, const char* path);
MWPGEN_API mwpgen_status mwpgen_config_set(mwpgen_config* cfg, const char* key, const char* value);
MWPGEN_API mwpgen_status mwpgen_config_to_json(const mwpgen_config* cfg, char** out_json);
MWPGEN_API mwpgen_status mwpgen_config_fingerprint(const mwpgen_config* cfg, char** out_hex);
MWPGEN_API void mwpgen_config_free(mwpgen_config* cfg);

/* Two-stage training; writes the final checkpoint and, when log_path is not
   NULL, one JSON line per optimizer step. */
MWPGEN_API mwpgen_status mwpgen_train(const mwpgen_corpus* train, const mwpgen_config* cfg,
                                      const char* checkpoint_path, const char* log_path);

MWPGEN_API mwpgen_status mwpgen_model_load(const char* checkpoint_path, mwpgen_model** out);
MWPGEN_API mwpgen_status mwpgen_model_config_json(const mwpgen_model* m, char** out_json);
MWPGEN_API mwpgen_status mwpgen_model_fingerprint(const mwpgen_model* m, char** out_hex);
MWPGEN_API void mwpgen_model_free(mwpgen_model* m);

/* mode is "greedy" or "top_k". Numbers written as digits in the equation
   are masked before generation and restored in the output. keywords is a
   space-separated list (NULL for none). */
MWPGEN_API mwpgen_status mwpgen_generate(const mwpgen_model* m, const char* equation, const char* keywords,
                                         const char* mode, size_t top_k, double temperature, uint64_t seed,
                                         size_t max_new_tokens, char** out_text);

/* {"keywords": [...], "probabilities": {token: q}} */
MWPGEN_API mwpgen_status mwpgen_select_keywords(const mwpgen_model* m, const char* mwp_text, char** out_json);

/* MetricsReport JSON; train may be NULL (novelty is then reported as 0). */
MWPGEN_API mwpgen_status mwpgen_evaluate(const mwpgen_model* m, const mwpgen_corpus* test,
                                         const mwpgen_corpus* train, char** out_json);
MWPGEN_API mwpgen_status mwpgen_report_mean(const char* const* reports_json, size_t n, char** out_json);

/* out_folds receives n fold indices in [0, k). */
MWPGEN_API mwpgen_status mwpgen_kfold_assign(size_t n, size_t k, uint64_t seed, int* out_folds);

MWPGEN_API mwpgen_status mwpgen_gradcheck(uint64_t seed, char** out_json, int* all_pass);

#ifdef __cplusplus
}
#endif

#endif
