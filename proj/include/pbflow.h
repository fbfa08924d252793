#ifndef PBFLOW_H
#define PBFLOW_H

/* C API for the pbflow library: contrastive descriptor losses, a small
 * trainable patch encoder, randomized correspondence search, and geodesic
 * densification, packaged behind opaque handles and status codes.
 *
 * Every function that can fail returns a pbf_status; on failure,
 * pbf_last_error() returns a thread-local human-readable message. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define PBF_API __declspec(dllexport)
#else
#define PBF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pbf_status {
  PBF_OK = 0,
  PBF_ERR_INVALID_ARGUMENT = 1,
  PBF_ERR_DIMENSION = 2,
  PBF_ERR_DOMAIN = 3,
  PBF_ERR_DEGENERATE_BATCH = 4,
  PBF_ERR_STATE = 5,
  PBF_ERR_SAMPLING = 6,
  PBF_ERR_INTERPOLATION = 7,
  PBF_ERR_PIPELINE = 8,
  PBF_ERR_IO = 9,
  PBF_ERR_RUNTIME = 10
} pbf_status;

PBF_API const char* pbf_version(void);

/* Message for the most recent failure on this thread; empty string if the
 * most recent call succeeded. The pointer stays valid until the next call
 * on the same thread. */
PBF_API const char* pbf_last_error(void);

/* ---------------------------------------------------------------- losses */

typedef enum pbf_loss_variant {
  PBF_LOSS_SPRING = 0,
  PBF_LOSS_CENTRIFUGE = 1,
  PBF_LOSS_SPRING_SD = 2,
  PBF_LOSS_CENTRIFUGE_SD = 3
} pbf_loss_variant;

/* Single-pair loss; variant must be PBF_LOSS_SPRING or PBF_LOSS_CENTRIFUGE.
 * label: 0 = matching, 1 = non-matching. */
PBF_API pbf_status pbf_pair_loss(pbf_loss_variant variant, int label,
                                 double distance, double margin, double* out);

/* Batch loss over pairwise distances. lambda is ignored for non-SD
 * variants. SD variants require at least two samples of each label. */
PBF_API pbf_status pbf_batch_loss(pbf_loss_variant variant, double margin,
                                  double lambda, const double* distances,
                                  const int* labels, size_t count, double* out);

/* Gradient of the batch loss with respect to each distance; grad_out must
 * hold count doubles. */
PBF_API pbf_status pbf_batch_loss_grad(pbf_loss_variant variant, double margin,
                                       double lambda, const double* distances,
                                       const int* labels, size_t count,
                                       double* grad_out);

/* Probability that a label-1 score exceeds a label-0 score, ties counted
 * half. Requires at least one score of each label. */
PBF_API pbf_status pbf_auc(const double* scores, const int* labels,
                           size_t count, double* out);

/* ---------------------------------------------------------------- images */

/* Grayscale image held as doubles. */
typedef struct pbf_image pbf_image;

PBF_API pbf_status pbf_image_create(int width, int height,
                                    const double* pixels, pbf_image** out);
PBF_API pbf_status pbf_image_read_pgm(const char* path, pbf_image** out);
PBF_API pbf_status pbf_image_write_pgm(const pbf_image* img, const char* path);
PBF_API int pbf_image_width(const pbf_image* img);
PBF_API int pbf_image_height(const pbf_image* img);
PBF_API void pbf_image_free(pbf_image* img);

/* ----------------------------------------------------------- flow fields */

/* Per-pixel displacement field with a validity mask. */
typedef struct pbf_flow pbf_flow;

PBF_API pbf_status pbf_flow_create(int width, int height, const float* u,
                                   const float* v, const uint8_t* valid,
                                   pbf_flow** out);
PBF_API pbf_status pbf_flow_read(const char* path, pbf_flow** out);
PBF_API pbf_status pbf_flow_write(const pbf_flow* flow, const char* path);
PBF_API int pbf_flow_width(const pbf_flow* flow);
PBF_API int pbf_flow_height(const pbf_flow* flow);
PBF_API pbf_status pbf_flow_get(const pbf_flow* flow, int x, int y, float* u,
                                float* v, uint8_t* valid);
PBF_API void pbf_flow_free(pbf_flow* flow);

/* ---------------------------------------------------------------- models */

/* Trained descriptor encoder (checkpoint handle). */
typedef struct pbf_model pbf_model;

PBF_API pbf_status pbf_model_load(const char* path, pbf_model** out);
PBF_API pbf_status pbf_model_save(const pbf_model* model, const char* path);
/* Smallest square patch the encoder maps to a single descriptor, or 0 if
 * the model does not encode square patches. */
PBF_API int pbf_model_patch_size(const pbf_model* model);
PBF_API void pbf_model_free(pbf_model* model);

/* -------------------------------------------- synthetic cluster benchmark */

/* Grid of AUC measurements on synthetic Gaussian cluster data. Writes
 * cells.csv and summary.csv (and optionally auc_plot.svg) into out_dir. */
typedef struct pbf_synth_opts {
  const int* nc_values;      /* cluster counts; required, at least one */
  size_t nc_count;
  const double* tau_values;  /* noise variances; required, at least one */
  size_t tau_count;
  int normalize;             /* nonzero: per-coordinate whitening of pairs */
  const char* methods;       /* comma-separated subset of baseline,spring,
                                centrifuge,spring_sd,centrifuge_sd;
                                NULL: all five */
  int repetitions;           /* <= 0: 10 */
  int epochs;                /* <= 0: 30 */
  int batch;                 /* <= 0: 256 */
  double lambda;             /* <= 0: 0.8 */
  double margin;             /* <= 0: coarse sweep per method and cell */
  int threads;               /* <= 0: hardware concurrency */
  uint64_t seed;
  int write_svg;             /* nonzero: also emit auc_plot.svg */
} pbf_synth_opts;

PBF_API pbf_status pbf_synth_run(const pbf_synth_opts* opts,
                                 const char* out_dir, int* any_cell_failed);

/* -------------------------------------------------------------- training */

/* Trains the patch encoder on image pairs with ground-truth flow.
 * data_file lists one whitespace-separated triple per line:
 *   first.pgm second.pgm flow.pbfl
 * Saves a checkpoint after every finite epoch; a non-finite epoch loss
 * aborts with PBF_ERR_RUNTIME, leaving the last finite checkpoint. */
typedef struct pbf_train_opts {
  const char* data_file;     /* required */
  pbf_loss_variant variant;
  double margin;             /* required, > 0 */
  double lambda;             /* <= 0: 0.8 */
  int epochs;                /* <= 0: 20 */
  int batch;                 /* <= 0: 256 */
  int patch;                 /* <= 0: 9; odd */
  int pairs_per_epoch;       /* <= 0: 2048 */
  uint64_t seed;
} pbf_train_opts;

PBF_API pbf_status pbf_train_run(const pbf_train_opts* opts,
                                 const char* out_checkpoint,
                                 const char* log_csv /* may be NULL */);

/* ------------------------------------------------------ end-to-end flow */

typedef struct pbf_flow_opts {
  int iterations;            /* <= 0: 2 */
  int search_radius;         /* <= 0: 32 */
  int cc_area;               /* < 0: 50 */
  int border;                /* < 0: 8 */
  int downsample;            /* <= 0: 1; one of 1, 2, 4 */
  int knn;                   /* <= 0: 25 */
  double kappa;              /* < 0: 100 */
  double bad_threshold;      /* <= 0: 3 */
  double accuracy_radius;    /* <= 0: 10 */
  uint64_t seed;
} pbf_flow_opts;

typedef struct pbf_flow_stats {
  int has_metrics;           /* nonzero when ground truth was supplied */
  double dense_epe, dense_bad_rate, dense_accuracy;
  double sparse_epe, sparse_bad_rate, sparse_accuracy;
  uint64_t raw_matches, surviving_matches, seeds_used;
} pbf_flow_stats;

/* Runs match -> filter -> densify on a pair of images. Any of sparse_out,
 * dense_out, stats may be NULL. gt may be NULL (metrics then absent). */
PBF_API pbf_status pbf_flow_run(pbf_model* model, const pbf_image* first,
                                const pbf_image* second, const pbf_flow* gt,
                                const pbf_flow_opts* opts,
                                pbf_flow** sparse_out, pbf_flow** dense_out,
                                pbf_flow_stats* stats);

/* Writes the stats as a small CSV (one row per scope). */
PBF_API pbf_status pbf_flow_stats_csv(const pbf_flow_stats* stats,
                                      const char* path);

#ifdef __cplusplus
}
#endif

#endif /* PBFLOW_H */
