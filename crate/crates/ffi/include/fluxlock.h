#ifndef FLUXLOCK_H
#define FLUXLOCK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_DOMAIN = 2,
  FL_STATUS_INVALID_INPUT = 3,
  FL_STATUS_DIVERGED = 4,
  FL_STATUS_PANIC = 5,
} FlStatus;

typedef struct FlClosedLoopRecord FlClosedLoopRecord;

typedef struct FlNoiseModel FlNoiseModel;

typedef struct FlSpectrum FlSpectrum;

typedef struct FlRamseyConfig {
  double tau_s;
  double cycle_time_s;
  uint32_t shots_per_estimate;
  double measurement_phase;
  double init_fidelity;
} FlRamseyConfig;

// Loop settings. `fixed_point` selects the integer pipeline; the DAC
// fields are ignored otherwise.
typedef struct FlLoopConfig {
  double gain;
  uint32_t update_stride;
  double idle_gap_s;
  bool fixed_point;
  double dac_full_scale_hz;
  uint32_t dac_bits;
  uint32_t acc_frac_bits;
} FlLoopConfig;

typedef struct FlComplex {
  double re;
  double im;
} FlComplex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread. Valid until the next failing
// call on the same thread. Empty if nothing failed yet.
const char *fl_last_error(void);

// τ = 1.25 µs, T = 3.5 µs, N = 20, φ = π/2, ideal contrast.
struct FlRamseyConfig fl_ramsey_config_default(void);

// Real arithmetic, `G = 0.35`, `N_S = N`, 16-bit DAC spanning ±1/τ.
struct FlLoopConfig fl_loop_config_default(struct FlRamseyConfig rcfg);

// `X_p(f)`, defined on `[0, 1/(2·(N_S·T + gap))]`.
//
// # Safety
// `rcfg` and `lcfg` must be null or point to valid configs; `out` must be
// null or writable.
enum FlStatus fl_transfer_p(double f,
                            const struct FlRamseyConfig *rcfg,
                            const struct FlLoopConfig *lcfg,
                            struct FlComplex *out);

// `X_e(f)`, same domain as [`fl_transfer_p`].
//
// # Safety
// As for [`fl_transfer_p`].
enum FlStatus fl_transfer_e(double f,
                            const struct FlRamseyConfig *rcfg,
                            const struct FlLoopConfig *lcfg,
                            struct FlComplex *out);

// Decoherence-limited error per gate. Pass `INFINITY` to omit a channel.
//
// # Safety
// `out` must be null or writable.
enum FlStatus fl_coherence_limit(double gate_time_s,
                                 double t1_s,
                                 double t_phi1_s,
                                 double t_phi2_s,
                                 double *out);

// `√A_Φ` in Φ0 from a dephasing slope `k` (Φ0) and bandwidth factor `eta`.
//
// # Safety
// `out` must be null or writable.
enum FlStatus fl_flux_noise_amplitude(double k, double eta, double *out);

// `A·(1 Hz/f)^α` with no lines and no cutoff.
//
// # Safety
// `out` must be null or writable.
enum FlStatus fl_noise_model_new(double amplitude_at_1hz,
                                 double exponent_alpha,
                                 struct FlNoiseModel **out);

// Add a spectral line of total power `power_hz2` at `frequency_hz`.
//
// # Safety
// `model` must be null or a live handle.
enum FlStatus fl_noise_model_add_line(struct FlNoiseModel *model,
                                      double frequency_hz,
                                      double power_hz2);

// One-sided PSD at `f`, Hz²/Hz.
//
// # Safety
// `model` must be null or a live handle; `out` must be null or writable.
enum FlStatus fl_noise_model_psd(const struct FlNoiseModel *model, double f, double *out);

// # Safety
// `model` must be null or a handle not yet freed.
void fl_noise_model_free(struct FlNoiseModel *model);

// One-sided periodogram of `n` samples spaced `dt` seconds apart.
//
// # Safety
// `values` must be null or point to `n` readable doubles; `out` must be
// null or writable.
enum FlStatus fl_periodogram(const double *values, uintptr_t n, double dt, struct FlSpectrum **out);

// Number of frequency bins; 0 for a null handle.
//
// # Safety
// `spec` must be null or a live handle.
uintptr_t fl_spectrum_len(const struct FlSpectrum *spec);

// Bin frequencies, Hz.
//
// # Safety
// `spec` must be null or a live handle.
const double *fl_spectrum_frequencies(const struct FlSpectrum *spec);

// PSD ordinates, Hz²/Hz.
//
// # Safety
// `spec` must be null or a live handle.
const double *fl_spectrum_psd(const struct FlSpectrum *spec);

// # Safety
// `spec` must be null or a handle not yet freed.
void fl_spectrum_free(struct FlSpectrum *spec);

// Simulate `n_estimates` loop updates. Returns [`FlStatus::Diverged`] if
// the lock is lost.
//
// # Safety
// Pointers must be null or valid; `out` must be null or writable.
enum FlStatus fl_run_closed_loop(const struct FlNoiseModel *model,
                                 const struct FlRamseyConfig *rcfg,
                                 const struct FlLoopConfig *lcfg,
                                 uintptr_t n_estimates,
                                 uint64_t seed,
                                 struct FlClosedLoopRecord **out);

// Number of updates; 0 for a null handle.
//
// # Safety
// `rec` must be null or a live handle.
uintptr_t fl_record_len(const struct FlClosedLoopRecord *rec);

// Time between updates, s; 0 for a null handle.
//
// # Safety
// `rec` must be null or a live handle.
double fl_record_sample_period(const struct FlClosedLoopRecord *rec);

// Error signal `e[n]`, Hz.
//
// # Safety
// `rec` must be null or a live handle.
const double *fl_record_error_signal(const struct FlClosedLoopRecord *rec);

// Control signal `p[n]`, Hz.
//
// # Safety
// `rec` must be null or a live handle.
const double *fl_record_control_signal(const struct FlClosedLoopRecord *rec);

// Residual qubit frequency `f̃[n] + p[n]`, Hz.
//
// # Safety
// `rec` must be null or a live handle.
const double *fl_record_true_frequency(const struct FlClosedLoopRecord *rec);

// # Safety
// `rec` must be null or a handle not yet freed.
void fl_record_free(struct FlClosedLoopRecord *rec);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLUXLOCK_H */
