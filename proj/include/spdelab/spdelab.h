#ifndef SPDELAB_SPDELAB_H
#define SPDELAB_SPDELAB_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define SPDELAB_API __attribute__((visibility("default")))
#else
#define SPDELAB_API
#endif

/* Status codes. Experiment runs reuse them as process exit codes. */
typedef enum {
  SPDELAB_OK = 0,
  SPDELAB_ECONFIG = 1,  /* malformed config, bad argument, shape or I/O problem */
  SPDELAB_EGATE = 2,    /* hypothesis gate refused the problem */
  SPDELAB_ENUMERIC = 3, /* divergence, non-convergence or failed checks */
} spdelab_status;

typedef struct spdelab_triple spdelab_triple;
typedef struct spdelab_experiment spdelab_experiment;

SPDELAB_API const char* spdelab_version(void);
/* Message for the last failing call on this thread; "" if none. */
SPDELAB_API const char* spdelab_last_error(void);

/* Periodic spectral pair on [-box/2, box/2)^dim with grid^dim nodes, order 1 or 2. */
SPDELAB_API spdelab_status spdelab_triple_create(int dim, int grid, double box, int order, spdelab_triple** out);
SPDELAB_API void spdelab_triple_destroy(spdelab_triple* t);
SPDELAB_API size_t spdelab_triple_size(const spdelab_triple* t);
/* Node coordinates, row-major with axis 0 slowest; `out` holds size * dim values. */
SPDELAB_API spdelab_status spdelab_triple_coords(const spdelab_triple* t, double* out);
/* v = R_lambda f; f and v hold size values and may alias. */
SPDELAB_API spdelab_status spdelab_triple_resolvent(const spdelab_triple* t, double lambda, const double* f, double* v);
SPDELAB_API spdelab_status spdelab_triple_norms(const spdelab_triple* t, const double* u, double* h_norm,
                                                double* v_norm);

SPDELAB_API spdelab_status spdelab_experiment_load(const char* path, spdelab_experiment** out);
/* `base_dir` resolves relative file references; NULL means ".". */
SPDELAB_API spdelab_status spdelab_experiment_load_string(const char* text, const char* base_dir,
                                                          spdelab_experiment** out);
SPDELAB_API void spdelab_experiment_destroy(spdelab_experiment* e);
SPDELAB_API spdelab_status spdelab_experiment_validate(const spdelab_experiment* e);
SPDELAB_API spdelab_status spdelab_experiment_set_param(spdelab_experiment* e, const char* name, double value);
SPDELAB_API spdelab_status spdelab_experiment_set_output(spdelab_experiment* e, const char* dir);
/* Effective output directory; valid until the next call on `e`. */
SPDELAB_API const char* spdelab_experiment_output(spdelab_experiment* e);
/* Writes the hex config hash (17 bytes including the terminator). */
SPDELAB_API spdelab_status spdelab_experiment_hash(const spdelab_experiment* e, char* out, size_t capacity);

/* Runs the experiment. The return value is the exit status; the summary of
   the last run (JSON with status, message, headline, files) stays readable
   through spdelab_experiment_summary until the next run. */
SPDELAB_API spdelab_status spdelab_experiment_run(spdelab_experiment* e);
SPDELAB_API const char* spdelab_experiment_summary(const spdelab_experiment* e);

/* Runs the experiment once per value with `param` set, writing sweep.csv and
   manifest.json into out_dir. */
SPDELAB_API spdelab_status spdelab_sweep(const spdelab_experiment* e, const char* param, const double* values,
                                         size_t count, const char* out_dir);

#ifdef __cplusplus
}
#endif

#endif
