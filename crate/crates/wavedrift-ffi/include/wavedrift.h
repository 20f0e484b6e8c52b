/* C interface of the wavedrift traveling-wave laboratory.
 *
 * Every function returns a wd_status code; results come back through out
 * pointers.  Handles are opaque and must be released with the matching
 * wd_*_free.  The last failure message is kept per thread; fetch it with
 * wd_last_error_message.
 *
 * Link against the wavedrift_ffi cdylib or staticlib.
 */

#ifndef WAVEDRIFT_H
#define WAVEDRIFT_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. */
enum {
  WD_OK = 0,
  WD_ERR_VALIDATION = 1, /* bad parameters or buffer sizes */
  WD_ERR_NUMERICAL = 2,  /* solver breakdown or blown-up path */
  WD_ERR_NULL = 3,       /* a required pointer was NULL */
  WD_ERR_PANIC = 4       /* internal failure */
};
typedef int wd_status;

/* Opaque handles. */
typedef struct WdWave WdWave;   /* model + traveling wave + adjoint frame */
typedef struct WdSwave WdSwave; /* noise-corrected wave at one amplitude */
typedef struct WdPath WdPath;   /* recorded series of one sample path */

/* Copies the last error message of this thread into buf (NUL-terminated,
 * truncating) and returns the full message length in bytes.  buf may be NULL
 * to query the length only. */
size_t wd_last_error_message(char *buf, size_t cap);

/* ----- deterministic waves ---------------------------------------------- */

/* Scalar bistable front on [-half_length, half_length], threshold a in
 * (0, 1/2).  On success *out owns a new handle. */
wd_status wd_wave_solve_nagumo(double a, double half_length, size_t points,
                               WdWave **out);

/* Two-component excitable pulse; noise acts on the first component. */
wd_status wd_wave_solve_fhn(double a, double epsilon, double gamma,
                            double rho_w, double half_length, size_t points,
                            WdWave **out);

void wd_wave_free(WdWave *handle);

wd_status wd_wave_speed(const WdWave *wave, double *out);
wd_status wd_wave_points(const WdWave *wave, size_t *out);
wd_status wd_wave_n_comp(const WdWave *wave, size_t *out);

/* Copies component comp of the profile into buf (len >= wd_wave_points). */
wd_status wd_wave_profile(const WdWave *wave, size_t comp, double *buf,
                          size_t len);

/* Spectral gap certified by a dense eigensolve on a grid capped at
 * points_cap points (512 is a reasonable cap). */
wd_status wd_wave_spectral_gap(const WdWave *wave, size_t points_cap,
                               double *out);

/* ----- noise-corrected waves and drift predictions ---------------------- */

wd_status wd_swave_solve(const WdWave *wave, double sigma, WdSwave **out);
void wd_swave_free(WdSwave *handle);

wd_status wd_swave_speed(const WdSwave *swave, double *out);
wd_status wd_swave_profile(const WdSwave *swave, size_t comp, double *buf,
                           size_t len);

/* Speed and drift predictions at the amplitude of swave. */
typedef struct WdDrift {
  double sigma;
  double c0;      /* deterministic speed */
  double c_sigma; /* corrected-wave speed */
  double c02;     /* quadratic coefficient of the corrected speed */
  double c_od_leading; /* leading-order drift coefficient; NaN if unsupported */
  double c_od_general;
  double c_lim_2; /* quadratic coefficient of the limiting observed speed */
} WdDrift;

/* gap_beta must be a positive lower bound for the spectral gap (see
 * wd_wave_spectral_gap). */
wd_status wd_drift_predict(const WdWave *wave, const WdSwave *swave,
                           double gap_beta, WdDrift *out);

/* ----- sample paths and ensembles --------------------------------------- */

/* Integrates one path of the coupled field/phase system up to t_end with
 * step dt; eps is the decay rate of the stability functional. */
wd_status wd_path_run(const WdWave *wave, const WdSwave *swave, double dt,
                      double t_end, double eps, uint64_t seed, WdPath **out);
void wd_path_free(WdPath *handle);

wd_status wd_path_len(const WdPath *path, size_t *out);

/* Recorded columns. */
enum {
  WD_COL_TIME = 0,
  WD_COL_GAMMA = 1,    /* tracked phase */
  WD_COL_DRIFT = 2,    /* phase minus c_sigma t */
  WD_COL_DRIFT_VR = 3, /* variance-reduced drift */
  WD_COL_NEPS = 4,     /* stability functional */
  WD_COL_V_L2 = 5      /* L2 norm of the shape deviation */
};

/* Copies one recorded column into buf (len >= wd_path_len). */
wd_status wd_path_column(const WdPath *path, int column, double *buf,
                         size_t len);
wd_status wd_path_sup_neps(const WdPath *path, double *out);

typedef struct WdEnsemble {
  size_t n_paths;
  size_t n_excluded; /* blown-up paths dropped (capped at 1%) */
  double c_od_obs;   /* observed drift rate of the tracked phase */
  double p_eps;      /* fraction of paths exceeding eta */
  double p_eps_ci_low;
  double p_eps_ci_high; /* 95% confidence bounds for p_eps */
} WdEnsemble;

wd_status wd_ensemble_run(const WdWave *wave, const WdSwave *swave, double dt,
                          double t_end, double eps, double eta, size_t n_paths,
                          uint64_t base_seed, WdEnsemble *out);

#ifdef __cplusplus
}
#endif

#endif /* WAVEDRIFT_H */
