#ifndef MODFED_H
#define MODFED_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define MODFED_API __declspec(dllexport)
#else
#define MODFED_API __attribute__((visibility("default")))
#endif

typedef enum modfed_status {
  MODFED_OK = 0,
  MODFED_ERR_CONFIG = 1,
  MODFED_ERR_SHAPE = 2,
  MODFED_ERR_UNSUPPORTED_SIZE = 3,
  MODFED_ERR_NUMERIC = 4,
  MODFED_ERR_IO = 5,
  MODFED_ERR_PROTOCOL = 6,
  MODFED_ERR_CONTRACT = 7,
  MODFED_ERR_CHECK_FAILED = 8,
  MODFED_ERR_INTERNAL = 99
} modfed_status;

typedef struct modfed_experiment modfed_experiment;

/* Message of the last failing call on this thread; "" if none. */
MODFED_API const char* modfed_last_error(void);
MODFED_API const char* modfed_version(void);
MODFED_API const char* modfed_status_name(modfed_status status);

/* Configuration. `profile` may be NULL (desk). JSON text may be NULL or "". */
MODFED_API modfed_status modfed_experiment_create(const char* profile, modfed_experiment** out);
MODFED_API modfed_status modfed_experiment_from_json(const char* json_text, const char* profile,
                                                     modfed_experiment** out);
MODFED_API modfed_status modfed_experiment_load(const char* path, const char* profile,
                                                modfed_experiment** out);
MODFED_API void modfed_experiment_destroy(modfed_experiment* exp);

MODFED_API modfed_status modfed_experiment_set_seed(modfed_experiment* exp, uint64_t seed);
MODFED_API modfed_status modfed_experiment_set_output_dir(modfed_experiment* exp, const char* dir);
/* Canonical JSON of the resolved configuration; free with modfed_string_free. */
MODFED_API modfed_status modfed_experiment_config_json(const modfed_experiment* exp, char** out);

/* Trains and evaluates; writes every artifact into the output directory. */
MODFED_API modfed_status modfed_experiment_run(modfed_experiment* exp);

/* Results of the last successful run. Rounds are 1-based. */
MODFED_API modfed_status modfed_experiment_round_count(const modfed_experiment* exp, int* out);
MODFED_API modfed_status modfed_experiment_client_count(const modfed_experiment* exp, int* out);
MODFED_API modfed_status modfed_experiment_round_loss(const modfed_experiment* exp, int round, double* out);
MODFED_API modfed_status modfed_experiment_test_psnr(const modfed_experiment* exp, int client,
                                                     double* psnr, double* zero_filled_psnr);
/* Human-readable summary of the last run; free with modfed_string_free. */
MODFED_API modfed_status modfed_experiment_summary(const modfed_experiment* exp, char** out);

/* Comparison table and CSV over finished run directories. Either output may be NULL. */
MODFED_API modfed_status modfed_compare_runs(const char* const* dirs, size_t count, char** table,
                                             char** csv);

/* Check suites. `report` receives one line per check; MODFED_ERR_CHECK_FAILED
   if any check fails. */
MODFED_API modfed_status modfed_gradcheck(uint64_t seed, char** report);
MODFED_API modfed_status modfed_selftest(uint64_t seed, char** report);

MODFED_API void modfed_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif
