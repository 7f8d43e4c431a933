#ifndef NLIMB_NLIMB_H
#define NLIMB_NLIMB_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define NLIMB_API __declspec(dllexport)
#else
#define NLIMB_API __attribute__((visibility("default")))
#endif

/* Status codes. Every call returning nlimb_status sets a thread-local error
   message on failure, readable with nlimb_last_error(). */
typedef enum {
  NLIMB_OK = 0,
  NLIMB_INVALID_ARGUMENT = 1,
  NLIMB_SHAPE_MISMATCH = 2,
  NLIMB_NON_FINITE = 3,
  NLIMB_PARSE_ERROR = 4,
  NLIMB_CONFIG_ERROR = 5,
  NLIMB_IO_ERROR = 6,
  NLIMB_RUNTIME = 7
} nlimb_status;

typedef struct nlimb_config nlimb_config;
typedef struct nlimb_env nlimb_env;

NLIMB_API const char* nlimb_version(void);
NLIMB_API const char* nlimb_last_error(void);
/* Strings returned through char** out-parameters are owned by the caller. */
NLIMB_API void nlimb_string_free(char* s);

/* Grammar: "default" or a grammar file path. The count is a decimal string
   (it can exceed 64 bits). */
NLIMB_API nlimb_status nlimb_count_designs(const char* grammar, char** out_decimal);

/* Experiment configuration. */
NLIMB_API nlimb_status nlimb_config_default(nlimb_config** out);
NLIMB_API nlimb_status nlimb_config_parse(const char* json_text, nlimb_config** out);
NLIMB_API nlimb_status nlimb_config_load(const char* path, nlimb_config** out);
NLIMB_API void nlimb_config_free(nlimb_config* cfg);
/* key_path is dotted ("train.budget"); value is JSON ("0", "\"gaps\""). */
NLIMB_API nlimb_status nlimb_config_set(nlimb_config* cfg, const char* key_path, const char* json_value);
NLIMB_API nlimb_status nlimb_config_to_json(const nlimb_config* cfg, char** out);
NLIMB_API nlimb_status nlimb_config_hash(const nlimb_config* cfg, char** out);
NLIMB_API const char* nlimb_config_schema(void);

/* Training. The log callback (may be NULL) receives one progress line per
   call. stop_after_iterations = 0 runs to the budget; otherwise the run is
   checkpointed and left resumable. out_run_dir may be NULL. */
typedef void (*nlimb_log_fn)(const char* line, void* user);
NLIMB_API nlimb_status nlimb_train(const nlimb_config* cfg, uint64_t stop_after_iterations, nlimb_log_fn log,
                                   void* user, char** out_run_dir);

typedef struct {
  double mean;
  double std;
  uint64_t episodes;
  int32_t divergences;
} nlimb_eval_result;

/* checkpoint and design_file may be NULL (latest checkpoint; the run's final
   design). has_seed = 0 uses the run seed. */
NLIMB_API nlimb_status nlimb_eval(const char* run_dir, const char* checkpoint, const char* design_file,
                                  uint64_t episodes, int has_seed, uint64_t seed, nlimb_eval_result* out);

/* Designs from the distribution in run_dir/checkpoint, or from the initial
   distribution of cfg when both are NULL (cfg may be NULL for defaults). */
NLIMB_API nlimb_status nlimb_sample_designs(const nlimb_config* cfg, const char* run_dir, const char* checkpoint,
                                            uint64_t k, uint64_t seed, char** out_json);
NLIMB_API nlimb_status nlimb_export_design(const nlimb_config* cfg, const char* run_dir, const char* checkpoint,
                                           char** out_json);

/* Renders reward (and generalization, when available) SVGs for the given
   runs into out_dir. out_files receives a JSON array of written paths. */
NLIMB_API nlimb_status nlimb_plot(const char* const* run_dirs, size_t n_runs, const char* out_dir, char** out_files);

/* Number of complete records in a metrics log; torn-line warnings go to
   out_warnings (JSON array, may be NULL). */
NLIMB_API nlimb_status nlimb_metrics_count(const char* path, uint64_t* out_records, char** out_warnings);

/* A single environment over a design document. */
NLIMB_API nlimb_status nlimb_env_create(const nlimb_config* cfg, const char* design_json, nlimb_env** out);
NLIMB_API void nlimb_env_free(nlimb_env* env);
NLIMB_API nlimb_status nlimb_env_reset(nlimb_env* env, uint64_t terrain_seed);
NLIMB_API nlimb_status nlimb_env_num_dofs(const nlimb_env* env, size_t* out);
/* torques has num_dofs entries. */
NLIMB_API nlimb_status nlimb_env_step(nlimb_env* env, const double* torques, size_t n, double* out_reward,
                                      int* out_terminated, int* out_truncated);
/* Writes up to cap values of the flattened observation; out_len gets the full length. */
NLIMB_API nlimb_status nlimb_env_observe(const nlimb_env* env, double* buf, size_t cap, size_t* out_len);

#ifdef __cplusplus
}
#endif

#endif
