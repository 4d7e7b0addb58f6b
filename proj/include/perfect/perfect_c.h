#ifndef PERFECT_C_H
#define PERFECT_C_H

/* C interface to the PERFECT few-shot library.
 *
 * Every call returns a perfect_status. On failure the message for the calling
 * thread is available from perfect_last_error() until the next failing call on
 * that thread. Strings returned through char** out-parameters are owned by
 * the caller and released with perfect_string_free().
 *
 * Configurations are JSON documents; see README.md for the keys. */

#include <stddef.h>
#include <stdint.h>

#if defined(PERFECT_BUILDING_LIBRARY)
#define PERFECT_API __attribute__((visibility("default")))
#else
#define PERFECT_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum perfect_status {
  PERFECT_OK = 0,
  PERFECT_ERR_INPUT = 1,     /* bad configuration, flag, corpus or file content */
  PERFECT_ERR_DIMENSION = 2, /* tensor shape mismatch */
  PERFECT_ERR_CONTRACT = 3,  /* precondition violated by the caller */
  PERFECT_ERR_NUMERIC = 4,   /* non-finite loss or value */
  PERFECT_ERR_IO = 5,        /* file system failure */
  PERFECT_ERR_INTERNAL = 6   /* anything else */
} perfect_status;

typedef struct perfect_task perfect_task;       /* corpus, test set, vocabulary, verbalizers */
typedef struct perfect_results perfect_results; /* per-run records of one experiment */
typedef struct perfect_model perfect_model;     /* a model restored from a checkpoint */

PERFECT_API const char* perfect_version(void);
PERFECT_API const char* perfect_last_error(void);
PERFECT_API const char* perfect_status_name(perfect_status status);
PERFECT_API void perfect_string_free(char* s);

/* Tasks. config_json is an experiment configuration; only its "task" and
 * "model.pattern" entries matter here. NULL selects the defaults. */
PERFECT_API perfect_status perfect_task_load(const char* config_json, perfect_task** out);
PERFECT_API void perfect_task_free(perfect_task* task);
/* {"name", "classes", "pair", "label_names", "pool_examples", "test_examples", "vocab_size", "verbalizers"} */
PERFECT_API perfect_status perfect_task_describe(const perfect_task* task, char** out_json);

/* Writes a synthetic corpus (TSV, or JSON lines for .jsonl/.json paths).
 * spec_json holds SynthSpec keys: task, classes, examples, length, cues,
 * cue_pool, distractors, seed. */
PERFECT_API perfect_status perfect_generate_synthetic(const char* spec_json, const char* path);

/* Experiments over the cross-product of data and train seeds. */
PERFECT_API perfect_status perfect_experiment_run(const perfect_task* task, const char* config_json,
                                                  perfect_results** out);
PERFECT_API size_t perfect_results_count(const perfect_results* results);
PERFECT_API int perfect_results_complete(const perfect_results* results);
PERFECT_API perfect_status perfect_results_aggregate(const perfect_results* results, double* mean, double* worst,
                                                     double* std_dev);
PERFECT_API perfect_status perfect_results_csv(const perfect_results* results, char** out_csv);
PERFECT_API perfect_status perfect_results_json(const perfect_results* results, char** out_json);
/* results.csv, aggregates.json and runs/ under dir (created if missing). */
PERFECT_API perfect_status perfect_results_write(const perfect_results* results, const char* dir);
PERFECT_API void perfect_results_free(perfect_results* results);

/* One run; writes its metadata JSON to *out_json and, when checkpoint_path is
 * not NULL, the trained model with its prototype bank. */
PERFECT_API perfect_status perfect_train(const perfect_task* task, const char* config_json, uint64_t data_seed,
                                         uint64_t train_seed, const char* checkpoint_path, char** out_json);

/* Sweeps one setting ("masks", "sigma", "loss", "inference", "placement",
 * "method") over comma-separated values (NULL: the default grid). Writes
 * ablation.csv / ablation.json under out_dir when it is not NULL. */
PERFECT_API perfect_status perfect_ablation_run(const perfect_task* task, const char* config_json,
                                                const char* sweep, const char* values, const char* out_dir,
                                                char** out_json);

/* Efficiency report. shape "roberta-large" is closed-form accounting only
 * (task may be NULL, classes taken from config "task.synthetic.classes" or 2);
 * shape "toy" trains one run on the task and measures it. */
PERFECT_API perfect_status perfect_bench(const perfect_task* task, const char* config_json, const char* shape,
                                         char** out_json);

/* mean, minimum and sample standard deviation (divisor n - 1; 0 when n == 1). */
PERFECT_API perfect_status perfect_aggregate(const double* values, size_t n, double* mean, double* worst,
                                             double* std_dev);
/* Parses a results.csv file and aggregates its completed rows. */
PERFECT_API perfect_status perfect_reaggregate_csv(const char* csv_path, char** out_json);

/* Checkpoints. */
PERFECT_API perfect_status perfect_model_load(const char* path, perfect_model** out);
PERFECT_API void perfect_model_free(perfect_model* model);
/* text_b may be NULL for single-sentence tasks. */
PERFECT_API perfect_status perfect_model_predict(const perfect_model* model, const char* text_a,
                                                 const char* text_b, size_t* label);

#ifdef __cplusplus
}
#endif

#endif /* PERFECT_C_H */
