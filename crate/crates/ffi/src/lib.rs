//! C ABI for the fluxlock simulator.
//!
//! Every fallible function returns an [`FlStatus`]; on failure the message
//! is available from [`fl_last_error`] on the same thread. Handles returned
//! through `out` pointers are owned by the caller and released with the
//! matching `*_free` function. Array accessors return pointers that stay
//! valid until the handle is freed.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fluxlock::coherence::flux_noise_amplitude;
use fluxlock::feedback::{self, ArithmeticMode, ClosedLoopRecord, LoopConfig};
use fluxlock::physics::{NoiseModel, TimeTrace};
use fluxlock::ramsey::RamseyConfig;
use fluxlock::rb::coherence_limit;
use fluxlock::spectral::{self, SpectrumEstimate};
use fluxlock::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    Domain = 2,
    InvalidInput = 3,
    Diverged = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlComplex {
    pub re: f64,
    pub im: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlRamseyConfig {
    pub tau_s: f64,
    pub cycle_time_s: f64,
    pub shots_per_estimate: u32,
    pub measurement_phase: f64,
    pub init_fidelity: f64,
}

/// Loop settings. `fixed_point` selects the integer pipeline; the DAC
/// fields are ignored otherwise.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlLoopConfig {
    pub gain: f64,
    pub update_stride: u32,
    pub idle_gap_s: f64,
    pub fixed_point: bool,
    pub dac_full_scale_hz: f64,
    pub dac_bits: u32,
    pub acc_frac_bits: u32,
}

pub struct FlNoiseModel(NoiseModel);

pub struct FlSpectrum(SpectrumEstimate);

pub struct FlClosedLoopRecord(ClosedLoopRecord);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FlStatus {
    match e {
        Error::Domain { .. } | Error::Divergent(_) => FlStatus::Domain,
        Error::Diverged { .. } => FlStatus::Diverged,
        Error::Input(_) | Error::Bounds { .. } | Error::NoCrossing { .. } | Error::Fit(_) => FlStatus::InvalidInput,
    }
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), FlStatusError>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(FlStatusError(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            FlStatus::Panic
        }
    }
}

struct FlStatusError(FlStatus, String);

impl From<Error> for FlStatusError {
    fn from(e: Error) -> Self {
        FlStatusError(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> FlStatusError {
    FlStatusError(FlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, FlStatusError> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(out: *mut T, value: T, what: &str) -> Result<(), FlStatusError> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn ramsey(c: &FlRamseyConfig) -> RamseyConfig {
    RamseyConfig {
        tau_s: c.tau_s,
        cycle_time_s: c.cycle_time_s,
        shots_per_estimate: c.shots_per_estimate as usize,
        measurement_phase: c.measurement_phase,
        init_fidelity: c.init_fidelity,
    }
}

fn loop_config(c: &FlLoopConfig, r: &RamseyConfig) -> LoopConfig {
    LoopConfig {
        gain: c.gain,
        update_stride: c.update_stride as usize,
        idle_gap_s: c.idle_gap_s,
        mode: if c.fixed_point { ArithmeticMode::FixedPoint } else { ArithmeticMode::Real },
        dac_full_scale_hz: c.dac_full_scale_hz,
        dac_bits: c.dac_bits,
        acc_frac_bits: c.acc_frac_bits,
        ..LoopConfig::new(c.gain, r)
    }
}

/// Message of the last failure on this thread. Valid until the next failing
/// call on the same thread. Empty if nothing failed yet.
#[no_mangle]
pub extern "C" fn fl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// τ = 1.25 µs, T = 3.5 µs, N = 20, φ = π/2, ideal contrast.
#[no_mangle]
pub extern "C" fn fl_ramsey_config_default() -> FlRamseyConfig {
    let r = RamseyConfig::reference();
    FlRamseyConfig {
        tau_s: r.tau_s,
        cycle_time_s: r.cycle_time_s,
        shots_per_estimate: r.shots_per_estimate as u32,
        measurement_phase: r.measurement_phase,
        init_fidelity: r.init_fidelity,
    }
}

/// Real arithmetic, `G = 0.35`, `N_S = N`, 16-bit DAC spanning ±1/τ.
#[no_mangle]
pub extern "C" fn fl_loop_config_default(rcfg: FlRamseyConfig) -> FlLoopConfig {
    let l = LoopConfig::reference(&ramsey(&rcfg));
    FlLoopConfig {
        gain: l.gain,
        update_stride: l.update_stride as u32,
        idle_gap_s: l.idle_gap_s,
        fixed_point: false,
        dac_full_scale_hz: l.dac_full_scale_hz,
        dac_bits: l.dac_bits,
        acc_frac_bits: l.acc_frac_bits,
    }
}

fn transfer(
    f: f64,
    rcfg: *const FlRamseyConfig,
    lcfg: *const FlLoopConfig,
    out: *mut FlComplex,
    h: fn(f64, &LoopConfig, &RamseyConfig) -> fluxlock::Result<num_complex::Complex64>,
) -> FlStatus {
    guard(|| unsafe {
        let r = ramsey(deref(rcfg, "rcfg")?);
        let l = loop_config(deref(lcfg, "lcfg")?, &r);
        l.validate_structure(&r)?;
        let z = h(f, &l, &r)?;
        write(out, FlComplex { re: z.re, im: z.im }, "out")
    })
}

/// `X_p(f)`, defined on `[0, 1/(2·(N_S·T + gap))]`.
///
/// # Safety
/// `rcfg` and `lcfg` must be null or point to valid configs; `out` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_transfer_p(
    f: f64,
    rcfg: *const FlRamseyConfig,
    lcfg: *const FlLoopConfig,
    out: *mut FlComplex,
) -> FlStatus {
    transfer(f, rcfg, lcfg, out, feedback::transfer_p)
}

/// `X_e(f)`, same domain as [`fl_transfer_p`].
///
/// # Safety
/// As for [`fl_transfer_p`].
#[no_mangle]
pub unsafe extern "C" fn fl_transfer_e(
    f: f64,
    rcfg: *const FlRamseyConfig,
    lcfg: *const FlLoopConfig,
    out: *mut FlComplex,
) -> FlStatus {
    transfer(f, rcfg, lcfg, out, feedback::transfer_e)
}

/// Decoherence-limited error per gate. Pass `INFINITY` to omit a channel.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_coherence_limit(
    gate_time_s: f64,
    t1_s: f64,
    t_phi1_s: f64,
    t_phi2_s: f64,
    out: *mut f64,
) -> FlStatus {
    guard(|| write(out, coherence_limit(gate_time_s, t1_s, t_phi1_s, t_phi2_s)?, "out"))
}

/// `√A_Φ` in Φ0 from a dephasing slope `k` (Φ0) and bandwidth factor `eta`.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_flux_noise_amplitude(k: f64, eta: f64, out: *mut f64) -> FlStatus {
    guard(|| write(out, flux_noise_amplitude(k, eta)?.sqrt_a_phi, "out"))
}

/// `A·(1 Hz/f)^α` with no lines and no cutoff.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_noise_model_new(
    amplitude_at_1hz: f64,
    exponent_alpha: f64,
    out: *mut *mut FlNoiseModel,
) -> FlStatus {
    guard(|| {
        let m = NoiseModel::new(amplitude_at_1hz, exponent_alpha)?;
        write(out, Box::into_raw(Box::new(FlNoiseModel(m))), "out")
    })
}

/// Add a spectral line of total power `power_hz2` at `frequency_hz`.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_noise_model_add_line(
    model: *mut FlNoiseModel,
    frequency_hz: f64,
    power_hz2: f64,
) -> FlStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        m.0 = m.0.clone().with_line(frequency_hz, power_hz2)?;
        Ok(())
    })
}

/// One-sided PSD at `f`, Hz²/Hz.
///
/// # Safety
/// `model` must be null or a live handle; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_noise_model_psd(model: *const FlNoiseModel, f: f64, out: *mut f64) -> FlStatus {
    guard(|| write(out, deref(model, "model")?.0.psd(f)?, "out"))
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_noise_model_free(model: *mut FlNoiseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// One-sided periodogram of `n` samples spaced `dt` seconds apart.
///
/// # Safety
/// `values` must be null or point to `n` readable doubles; `out` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_periodogram(
    values: *const f64,
    n: usize,
    dt: f64,
    out: *mut *mut FlSpectrum,
) -> FlStatus {
    guard(|| {
        if values.is_null() {
            return Err(null("values"));
        }
        let trace = TimeTrace::new(dt, std::slice::from_raw_parts(values, n).to_vec())?;
        let est = spectral::periodogram(&trace)?;
        write(out, Box::into_raw(Box::new(FlSpectrum(est))), "out")
    })
}

/// Number of frequency bins; 0 for a null handle.
///
/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_spectrum_len(spec: *const FlSpectrum) -> usize {
    spec.as_ref().map_or(0, |s| s.0.len())
}

/// Bin frequencies, Hz.
///
/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_spectrum_frequencies(spec: *const FlSpectrum) -> *const f64 {
    spec.as_ref().map_or(ptr::null(), |s| s.0.frequencies.as_ptr())
}

/// PSD ordinates, Hz²/Hz.
///
/// # Safety
/// `spec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_spectrum_psd(spec: *const FlSpectrum) -> *const f64 {
    spec.as_ref().map_or(ptr::null(), |s| s.0.psd.as_ptr())
}

/// # Safety
/// `spec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_spectrum_free(spec: *mut FlSpectrum) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Simulate `n_estimates` loop updates. Returns [`FlStatus::Diverged`] if
/// the lock is lost.
///
/// # Safety
/// Pointers must be null or valid; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn fl_run_closed_loop(
    model: *const FlNoiseModel,
    rcfg: *const FlRamseyConfig,
    lcfg: *const FlLoopConfig,
    n_estimates: usize,
    seed: u64,
    out: *mut *mut FlClosedLoopRecord,
) -> FlStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let r = ramsey(deref(rcfg, "rcfg")?);
        let l = loop_config(deref(lcfg, "lcfg")?, &r);
        let rec = feedback::run_closed_loop(&m.0, &r, &l, n_estimates, seed)?;
        write(out, Box::into_raw(Box::new(FlClosedLoopRecord(rec))), "out")
    })
}

/// Number of updates; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_record_len(rec: *const FlClosedLoopRecord) -> usize {
    rec.as_ref().map_or(0, |r| r.0.len())
}

/// Time between updates, s; 0 for a null handle.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_record_sample_period(rec: *const FlClosedLoopRecord) -> f64 {
    rec.as_ref().map_or(0.0, |r| r.0.error_signal.sample_period())
}

/// Error signal `e[n]`, Hz.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_record_error_signal(rec: *const FlClosedLoopRecord) -> *const f64 {
    rec.as_ref().map_or(ptr::null(), |r| r.0.error_signal.values().as_ptr())
}

/// Control signal `p[n]`, Hz.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_record_control_signal(rec: *const FlClosedLoopRecord) -> *const f64 {
    rec.as_ref().map_or(ptr::null(), |r| r.0.control_signal.values().as_ptr())
}

/// Residual qubit frequency `f̃[n] + p[n]`, Hz.
///
/// # Safety
/// `rec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_record_true_frequency(rec: *const FlClosedLoopRecord) -> *const f64 {
    rec.as_ref().map_or(ptr::null(), |r| r.0.true_frequency.values().as_ptr())
}

/// # Safety
/// `rec` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_record_free(rec: *mut FlClosedLoopRecord) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}
