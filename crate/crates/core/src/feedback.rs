//! The feedback loop: accumulator controller with one-step actuation delay,
//! its sampled-data transfer functions, and a bit-exact fixed-point variant
//! of the FPGA pipeline (running buffer sum, lookup table, accumulator, DAC).

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;

use crate::error::{domain, Error, Result};
use crate::physics::{synthesize_trace, NoiseModel, TimeTrace};
use crate::ramsey::{invert_p1, ramsey_p1, virtual_reset_from, RamseyConfig, ShotRecord};
use crate::seed::{derive_seed, rng_from_seed, SimRng};

pub const REFERENCE_GAIN: f64 = 0.35;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithmeticMode {
    Real,
    FixedPoint,
}

/// Which part of each shot the qubit frequency is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotAveraging {
    /// The free-evolution window `[t, t + τ)` only.
    FreeEvolution,
    /// The whole shot period `[t, t + T)`.
    FullPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub gain: f64,
    /// N_S: shots between accumulator updates. The estimate uses the last
    /// N of them.
    pub update_stride: usize,
    pub mode: ArithmeticMode,
    /// Half range of the DAC, Hz.
    pub dac_full_scale_hz: f64,
    pub dac_bits: u32,
    /// Extra fractional bits the accumulator carries below one DAC step.
    pub acc_frac_bits: u32,
    /// Dead time after each update (computation phase), s.
    pub idle_gap_s: f64,
    pub averaging: ShotAveraging,
    /// Lock is declared lost when `|p|` exceeds this. `None` means one
    /// fringe period, `1/τ`.
    pub divergence_limit_hz: Option<f64>,
}

impl LoopConfig {
    /// Real arithmetic with the given gain, `N_S = N`.
    pub fn new(gain: f64, rcfg: &RamseyConfig) -> Self {
        LoopConfig {
            gain,
            update_stride: rcfg.shots_per_estimate,
            mode: ArithmeticMode::Real,
            dac_full_scale_hz: 1.0 / rcfg.tau_s,
            dac_bits: 16,
            acc_frac_bits: 16,
            idle_gap_s: 0.0,
            averaging: ShotAveraging::FreeEvolution,
            divergence_limit_hz: None,
        }
    }

    pub fn reference(rcfg: &RamseyConfig) -> Self {
        LoopConfig::new(REFERENCE_GAIN, rcfg)
    }

    pub fn open(rcfg: &RamseyConfig) -> Self {
        LoopConfig::new(0.0, rcfg)
    }

    /// Everything except the stability bound on the gain.
    pub fn validate_structure(&self, rcfg: &RamseyConfig) -> Result<()> {
        rcfg.validate()?;
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(domain("gain", self.gain));
        }
        if self.update_stride < rcfg.shots_per_estimate {
            return Err(Error::Input(format!(
                "update stride {} shorter than the {} shots of an estimate",
                self.update_stride, rcfg.shots_per_estimate
            )));
        }
        if !(self.idle_gap_s >= 0.0 && self.idle_gap_s.is_finite()) {
            return Err(domain("idle gap", self.idle_gap_s));
        }
        if self.mode == ArithmeticMode::FixedPoint {
            if !(1..=40).contains(&self.dac_bits) {
                return Err(Error::Input(format!("dac_bits {} outside 1..=40", self.dac_bits)));
            }
            if self.acc_frac_bits > 20 {
                return Err(Error::Input("acc_frac_bits above 20".into()));
            }
            if !(self.dac_full_scale_hz > 0.0 && self.dac_full_scale_hz.is_finite()) {
                return Err(domain("DAC full scale", self.dac_full_scale_hz));
            }
        }
        if let Some(l) = self.divergence_limit_hz {
            if !(l > 0.0) {
                return Err(domain("divergence limit", l));
            }
        }
        Ok(())
    }

    pub fn validate(&self, rcfg: &RamseyConfig) -> Result<()> {
        self.validate_structure(rcfg)?;
        if self.gain >= 2.0 {
            return Err(Error::Input(format!(
                "gain {} violates the stability bound 0 <= G < 2",
                self.gain
            )));
        }
        Ok(())
    }

    /// Time between accumulator updates, `N_S·T + gap`.
    pub fn update_period(&self, rcfg: &RamseyConfig) -> f64 {
        self.update_stride as f64 * rcfg.cycle_time_s + self.idle_gap_s
    }

    pub fn nyquist_hz(&self, rcfg: &RamseyConfig) -> f64 {
        0.5 / self.update_period(rcfg)
    }

    fn divergence_limit(&self, rcfg: &RamseyConfig) -> f64 {
        self.divergence_limit_hz.unwrap_or(1.0 / rcfg.tau_s)
    }
}

/// Accumulator state. `acc` is only used in fixed-point mode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoopState {
    pub p: f64,
    pub n: usize,
    pub acc: i64,
    pub saturated: bool,
}

/// One accumulator update `p ← p + G·error`.
///
/// In fixed-point mode the increment is quantized to the accumulator LSB
/// before it is added and `p` is the DAC output for the new accumulator.
pub fn loop_step(state: LoopState, error: f64, cfg: &LoopConfig) -> LoopState {
    match cfg.mode {
        ArithmeticMode::Real => LoopState {
            p: state.p + cfg.gain * error,
            n: state.n + 1,
            acc: state.acc,
            saturated: false,
        },
        ArithmeticMode::FixedPoint => {
            let fmt = FixedPointFormat::from_config(cfg);
            let inc = (cfg.gain * error / fmt.acc_lsb_hz()).round() as i64;
            let (acc, saturated) = fmt.saturate(state.acc.saturating_add(inc));
            LoopState { p: fmt.dac_value(acc), n: state.n + 1, acc, saturated }
        }
    }
}

/// Number format of the fixed-point pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointFormat {
    pub dac_bits: u32,
    pub dac_full_scale_hz: f64,
    pub acc_frac_bits: u32,
}

impl FixedPointFormat {
    pub fn from_config(cfg: &LoopConfig) -> Self {
        FixedPointFormat {
            dac_bits: cfg.dac_bits,
            dac_full_scale_hz: cfg.dac_full_scale_hz,
            acc_frac_bits: cfg.acc_frac_bits,
        }
    }

    /// One DAC step in Hz.
    pub fn dac_lsb_hz(&self) -> f64 {
        2.0 * self.dac_full_scale_hz / (1u64 << self.dac_bits) as f64
    }

    pub fn acc_lsb_hz(&self) -> f64 {
        self.dac_lsb_hz() / (1u64 << self.acc_frac_bits) as f64
    }

    fn code_range(&self) -> (i64, i64) {
        let half = 1i64 << (self.dac_bits - 1);
        (-half, half - 1)
    }

    fn acc_range(&self) -> (i64, i64) {
        let (lo, hi) = self.code_range();
        (lo << self.acc_frac_bits, ((hi + 1) << self.acc_frac_bits) - 1)
    }

    /// Clamp to the representable accumulator range.
    pub fn saturate(&self, acc: i64) -> (i64, bool) {
        let (lo, hi) = self.acc_range();
        let c = acc.clamp(lo, hi);
        (c, c != acc)
    }

    /// Mid-tread DAC code for an accumulator value.
    pub fn dac_code(&self, acc: i64) -> i64 {
        let (lo, hi) = self.code_range();
        let f = self.acc_frac_bits;
        let code = if f == 0 { acc } else { (acc + (1 << (f - 1))) >> f };
        code.clamp(lo, hi)
    }

    pub fn dac_value(&self, acc: i64) -> f64 {
        self.dac_code(acc) as f64 * self.dac_lsb_hz()
    }
}

/// Lookup table mapping the buffer sum `s ∈ 0..=N` to the accumulator
/// increment, `round(G·invert_p1(s/N)/acc_lsb)`.
pub fn build_lut(lcfg: &LoopConfig, rcfg: &RamseyConfig) -> Result<Vec<i64>> {
    let fmt = FixedPointFormat::from_config(lcfg);
    let n = rcfg.shots_per_estimate;
    (0..=n)
        .map(|k| {
            let d = invert_p1(k as f64 / n as f64, rcfg)?;
            Ok((lcfg.gain * d / fmt.acc_lsb_hz()).round() as i64)
        })
        .collect()
}

/// Sliding window of the last N corrected bits with their running sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotBuffer {
    window: VecDeque<u8>,
    capacity: usize,
    sum: usize,
}

impl ShotBuffer {
    pub fn new(capacity: usize) -> Self {
        ShotBuffer { window: VecDeque::with_capacity(capacity + 1), capacity, sum: 0 }
    }

    /// `s_i = s_{i-1} - q_{i-N} + q_i`.
    pub fn push(&mut self, q: u8) {
        self.window.push_back(q);
        self.sum += q as usize;
        if self.window.len() > self.capacity {
            self.sum -= self.window.pop_front().unwrap_or(0) as usize;
        }
    }

    pub fn sum(&self) -> usize {
        self.sum
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.capacity
    }

    pub fn bits(&self) -> impl Iterator<Item = u8> + '_ {
        self.window.iter().copied()
    }
}

/// Result of one fixed-point update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointStep {
    pub acc: i64,
    pub voltage_code: i64,
    pub saturated: bool,
}

/// `acc' = sat(acc + lut[s])` followed by DAC quantization.
pub fn fixed_point_step(
    buffer: &ShotBuffer,
    lut: &[i64],
    acc: i64,
    fmt: &FixedPointFormat,
) -> Result<FixedPointStep> {
    let inc = *lut
        .get(buffer.sum())
        .ok_or_else(|| Error::Input(format!("buffer sum {} beyond lookup table", buffer.sum())))?;
    let (acc, saturated) = fmt.saturate(acc.saturating_add(inc));
    Ok(FixedPointStep { acc, voltage_code: fmt.dac_code(acc), saturated })
}

/// Stateful controller consuming corrected shot bits.
#[derive(Debug, Clone)]
pub struct Controller {
    lcfg: LoopConfig,
    rcfg: RamseyConfig,
    state: LoopState,
    buffer: ShotBuffer,
    lut: Vec<i64>,
    fmt: FixedPointFormat,
    saturations: usize,
    limit: f64,
}

impl Controller {
    pub fn new(lcfg: &LoopConfig, rcfg: &RamseyConfig) -> Result<Self> {
        lcfg.validate_structure(rcfg)?;
        let lut = match lcfg.mode {
            ArithmeticMode::FixedPoint => build_lut(lcfg, rcfg)?,
            ArithmeticMode::Real => Vec::new(),
        };
        Ok(Controller {
            lcfg: *lcfg,
            rcfg: *rcfg,
            state: LoopState::default(),
            buffer: ShotBuffer::new(rcfg.shots_per_estimate),
            lut,
            fmt: FixedPointFormat::from_config(lcfg),
            saturations: 0,
            limit: lcfg.divergence_limit(rcfg),
        })
    }

    pub fn push_shot(&mut self, corrected_bit: u8) {
        self.buffer.push(corrected_bit);
    }

    /// Control value currently applied to the qubit, Hz.
    pub fn control(&self) -> f64 {
        self.state.p
    }

    pub fn state(&self) -> LoopState {
        self.state
    }

    pub fn saturations(&self) -> usize {
        self.saturations
    }

    /// Estimate from the buffered shots and update the accumulator.
    /// Returns the error signal `δ̂`.
    pub fn update(&mut self) -> Result<f64> {
        if !self.buffer.is_full() {
            return Err(Error::Input("controller updated before N shots were buffered".into()));
        }
        let n = self.rcfg.shots_per_estimate;
        let error = invert_p1(self.buffer.sum() as f64 / n as f64, &self.rcfg)?;
        match self.lcfg.mode {
            ArithmeticMode::Real => {
                self.state = loop_step(self.state, error, &self.lcfg);
            }
            ArithmeticMode::FixedPoint => {
                let step = fixed_point_step(&self.buffer, &self.lut, self.state.acc, &self.fmt)?;
                self.saturations += step.saturated as usize;
                self.state = LoopState {
                    p: step.voltage_code as f64 * self.fmt.dac_lsb_hz(),
                    n: self.state.n + 1,
                    acc: step.acc,
                    saturated: step.saturated,
                };
            }
        }
        if !self.state.p.is_finite() || self.state.p.abs() > self.limit {
            return Err(Error::Diverged { update: self.state.n, control_hz: self.state.p });
        }
        Ok(error)
    }
}

/// Output of a closed-loop run, one sample per accumulator update.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRecord {
    /// `e[n] = δ̂[n]`.
    pub error_signal: TimeTrace,
    /// `p[n]` after update `n`.
    pub control_signal: TimeTrace,
    /// `f̃[n] + p[n]`: the intrinsic frequency sampled by estimate `n` plus
    /// the correction that update `n` produces.
    pub true_frequency: TimeTrace,
    /// `f̃[n]` alone.
    pub intrinsic_frequency: TimeTrace,
    /// Corrected bits of the N shots behind each estimate.
    pub shots: Vec<ShotRecord>,
    /// Number of updates where the fixed-point accumulator clamped.
    pub saturations: usize,
}

impl ClosedLoopRecord {
    pub fn len(&self) -> usize {
        self.error_signal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.error_signal.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "n,t_s,error_hz,control_hz,true_freq_hz")?;
        let dt = self.error_signal.sample_period();
        let e = self.error_signal.values();
        let p = self.control_signal.values();
        let f = self.true_frequency.values();
        for n in 0..e.len() {
            writeln!(w, "{},{},{},{},{}", n, n as f64 * dt, e[n], p[n], f[n])?;
        }
        Ok(())
    }
}

/// Start time of shot `j` of update `n`.
fn shot_start(n: usize, j: usize, lcfg: &LoopConfig, rcfg: &RamseyConfig) -> f64 {
    n as f64 * lcfg.update_period(rcfg) + j as f64 * rcfg.cycle_time_s
}

/// Trace duration needed for `n_updates` updates.
pub fn required_duration(n_updates: usize, lcfg: &LoopConfig, rcfg: &RamseyConfig) -> f64 {
    n_updates as f64 * lcfg.update_period(rcfg)
}

/// Intrinsic frequency seen by one shot starting at `t`.
pub(crate) fn shot_frequency(
    trace: &TimeTrace,
    t: f64,
    lcfg: &LoopConfig,
    rcfg: &RamseyConfig,
) -> Result<f64> {
    let span = match lcfg.averaging {
        ShotAveraging::FreeEvolution => rcfg.tau_s,
        ShotAveraging::FullPeriod => rcfg.cycle_time_s,
    };
    trace.window_mean(t, t + span)
}

/// Closed loop driven by an explicit intrinsic-frequency trace.
///
/// Every shot sees the detuning `-(f̃ + p[n-1])`, the raw readout carries
/// the previous qubit state (no physical reset) and is corrected by the
/// virtual reset before it enters the controller.
pub fn run_closed_loop_on_trace(
    trace: &TimeTrace,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    n_updates: usize,
    rng: &mut SimRng,
) -> Result<ClosedLoopRecord> {
    if n_updates == 0 {
        return Err(Error::Input("need at least one estimate".into()));
    }
    let mut ctl = Controller::new(lcfg, rcfg)?;
    let n = rcfg.shots_per_estimate;
    let stride = lcfg.update_stride;
    let mut errors = Vec::with_capacity(n_updates);
    let mut controls = Vec::with_capacity(n_updates);
    let mut truth = Vec::with_capacity(n_updates);
    let mut intrinsic = Vec::with_capacity(n_updates);
    let mut shots = Vec::with_capacity(n_updates);
    let mut prev_raw = 0u8;
    let mut raw = Vec::with_capacity(stride);
    for u in 0..n_updates {
        let p = ctl.control();
        raw.clear();
        let mut f_sum = 0.0;
        let carry_in = prev_raw;
        for j in 0..stride {
            let f = shot_frequency(trace, shot_start(u, j, lcfg, rcfg), lcfg, rcfg)?;
            if j >= stride - n {
                f_sum += f;
            }
            let x: f64 = rand::Rng::random(rng);
            let b = u8::from(x < ramsey_p1(-(f + p), rcfg));
            prev_raw ^= b;
            raw.push(prev_raw);
        }
        let corrected = virtual_reset_from(&ShotRecord { bits: raw.clone() }, carry_in);
        for &q in &corrected.bits {
            ctl.push_shot(q);
        }
        let e = ctl.update()?;
        let f_tilde = f_sum / n as f64;
        errors.push(e);
        controls.push(ctl.control());
        truth.push(f_tilde + ctl.control());
        intrinsic.push(f_tilde);
        shots.push(ShotRecord { bits: corrected.bits[stride - n..].to_vec() });
        // The idle gap lets the qubit relax.
        if lcfg.idle_gap_s > 0.0 {
            prev_raw = 0;
        }
    }
    let dt = lcfg.update_period(rcfg);
    Ok(ClosedLoopRecord {
        error_signal: TimeTrace::new(dt, errors)?,
        control_signal: TimeTrace::new(dt, controls)?,
        true_frequency: TimeTrace::new(dt, truth)?,
        intrinsic_frequency: TimeTrace::new(dt, intrinsic)?,
        shots,
        saturations: ctl.saturations(),
    })
}

/// Synthesize an intrinsic trace at one sample per shot period and run the
/// loop on it. The trace uses `derive_seed(seed, 0)` and the shots
/// `derive_seed(seed, 1)`, so runs with equal seeds share their noise.
pub fn run_closed_loop(
    model: &NoiseModel,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    n_updates: usize,
    seed: u64,
) -> Result<ClosedLoopRecord> {
    lcfg.validate_structure(rcfg)?;
    if n_updates == 0 {
        return Err(Error::Input("need at least one estimate".into()));
    }
    let dt = rcfg.cycle_time_s;
    let samples = (required_duration(n_updates, lcfg, rcfg) / dt).ceil() as usize + 1;
    let trace = synthesize_trace(model, samples.max(2), dt, derive_seed(seed, 0))?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    run_closed_loop_on_trace(&trace, rcfg, lcfg, n_updates, &mut rng)
}

/// Noise-free sampled model of the loop: `f[n] = f̃[n] + p[n-1]`,
/// `e[n] = v[n] - f[n]`, `p[n] = p[n-1] + G·e[n]`.
/// Returns `(e, p, f)`.
pub fn linear_loop(intrinsic: &[f64], sampling: &[f64], gain: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut p = 0.0;
    let mut es = Vec::with_capacity(intrinsic.len());
    let mut ps = Vec::with_capacity(intrinsic.len());
    let mut fs = Vec::with_capacity(intrinsic.len());
    for (i, &ft) in intrinsic.iter().enumerate() {
        let f = ft + p;
        let e = sampling.get(i).copied().unwrap_or(0.0) - f;
        p += gain * e;
        es.push(e);
        ps.push(p);
        fs.push(f);
    }
    (es, ps, fs)
}

fn unit_delay(f: f64, lcfg: &LoopConfig, rcfg: &RamseyConfig) -> Result<Complex64> {
    let nyq = lcfg.nyquist_hz(rcfg);
    if !(f >= 0.0 && f <= nyq * (1.0 + 1e-12)) {
        return Err(domain("frequency above loop Nyquist", f));
    }
    let w = 2.0 * PI * f * lcfg.update_period(rcfg);
    Ok(Complex64::from_polar(1.0, -w))
}

/// `X_p = G / (1 - z⁻¹ + G z⁻¹)`: from (sampling noise − intrinsic
/// frequency) to the control signal.
pub fn transfer_p(f: f64, lcfg: &LoopConfig, rcfg: &RamseyConfig) -> Result<Complex64> {
    let zi = unit_delay(f, lcfg, rcfg)?;
    let g = lcfg.gain;
    Ok(Complex64::new(g, 0.0) / (1.0 - zi + g * zi))
}

/// `X_e = (1 - z⁻¹) / (1 - z⁻¹ + G z⁻¹)`: to the error signal.
pub fn transfer_e(f: f64, lcfg: &LoopConfig, rcfg: &RamseyConfig) -> Result<Complex64> {
    let zi = unit_delay(f, lcfg, rcfg)?;
    let g = lcfg.gain;
    Ok((1.0 - zi) / (1.0 - zi + g * zi))
}

/// PSD of the stabilized frequency: `|X_p - 1|²·S_open + |X_p|²·S_est`.
pub fn closed_loop_psd(
    s_open: impl Fn(f64) -> f64,
    s_sampling: impl Fn(f64) -> f64,
    lcfg: &LoopConfig,
    rcfg: &RamseyConfig,
    f: f64,
) -> Result<f64> {
    let xp = transfer_p(f, lcfg, rcfg)?;
    Ok((xp - 1.0).norm_sqr() * s_open(f) + xp.norm_sqr() * s_sampling(f))
}

/// PSD of the error signal: `|X_e|²·(S_open + S_est)`.
pub fn error_signal_psd(
    s_open: impl Fn(f64) -> f64,
    s_sampling: impl Fn(f64) -> f64,
    lcfg: &LoopConfig,
    rcfg: &RamseyConfig,
    f: f64,
) -> Result<f64> {
    let xe = transfer_e(f, lcfg, rcfg)?;
    Ok(xe.norm_sqr() * (s_open(f) + s_sampling(f)))
}

/// Spectrum of `f̃[n]` when the intrinsic noise is a shot-rate sampled
/// process of PSD `model`: the N-shot average acts as a comb filter and
/// everything between the loop and shot Nyquist frequencies aliases down.
pub fn sampled_intrinsic_psd(
    model: &NoiseModel,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    f: f64,
) -> Result<f64> {
    let fs_loop = 1.0 / lcfg.update_period(rcfg);
    let f_shot_nyq = 0.5 / rcfg.cycle_time_s;
    if !(f > 0.0 && f <= 0.5 * fs_loop * (1.0 + 1e-12)) {
        return Err(domain("frequency", f));
    }
    let n = rcfg.shots_per_estimate as f64;
    let comb = |x: f64| {
        let a = PI * x * rcfg.cycle_time_s;
        let s = a.sin();
        if s.abs() < 1e-15 {
            1.0
        } else {
            ((n * a).sin() / (n * s)).powi(2)
        }
    };
    let mut total = 0.0;
    let mut k = 0usize;
    loop {
        let lo = k as f64 * fs_loop - f;
        let hi = k as f64 * fs_loop + f;
        if lo > f_shot_nyq {
            break;
        }
        if k > 0 && lo > 0.0 && lo <= f_shot_nyq {
            total += model.continuum_psd(lo) * comb(lo);
        }
        if hi <= f_shot_nyq {
            total += model.continuum_psd(hi) * comb(hi);
        }
        k += 1;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ramsey::sampling_noise_psd;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rc() -> RamseyConfig {
        RamseyConfig::reference()
    }

    #[test]
    fn accumulator_examples() {
        let c = LoopConfig::reference(&rc());
        let s = loop_step(LoopState::default(), 0.0, &c);
        assert_eq!(s.p, 0.0);
        let s = loop_step(LoopState::default(), 100e3, &c);
        assert_relative_eq!(s.p, 35e3, max_relative = 1e-12);
        let mut s = LoopState::default();
        for _ in 0..7 {
            s = loop_step(s, 10.0, &c);
        }
        assert_relative_eq!(s.p, 7.0 * 0.35 * 10.0, max_relative = 1e-12);
        assert_eq!(s.n, 7);
    }

    #[test]
    fn transfer_dc_and_nyquist() {
        let r = rc();
        let c = LoopConfig::reference(&r);
        let nyq = c.nyquist_hz(&r);
        assert_relative_eq!(nyq, 7142.857142857, max_relative = 1e-9);
        assert_eq!(transfer_p(0.0, &c, &r).unwrap(), Complex64::new(1.0, 0.0));
        assert_eq!(transfer_e(0.0, &c, &r).unwrap().norm(), 0.0);
        assert!((transfer_p(nyq, &c, &r).unwrap().norm() - 0.35 / 1.65).abs() < 1e-9);
        assert!((transfer_e(nyq, &c, &r).unwrap().norm() - 2.0 / 1.65).abs() < 1e-9);
        assert!(transfer_p(nyq * 1.01, &c, &r).is_err());
        assert!(transfer_e(-1.0, &c, &r).is_err());
    }

    #[test]
    fn deadbeat_gain() {
        let r = rc();
        let c = LoopConfig::new(1.0, &r);
        for f in [0.0, 10.0, 1e3, 7e3] {
            assert!((transfer_p(f, &c, &r).unwrap() - 1.0).norm() < 1e-12);
        }
    }

    #[test]
    fn closed_loop_psd_limits() {
        let r = rc();
        let open = LoopConfig::open(&r);
        let s = |f: f64| 27.3e6 * f.powf(-0.8);
        let est = sampling_noise_psd(&r);
        for f in [1.0, 100.0, 5e3] {
            assert_eq!(closed_loop_psd(s, |x| est.at(x), &open, &r, f).unwrap(), s(f));
        }
        let c = LoopConfig::reference(&r);
        let xp = transfer_p(1e-3, &c, &r).unwrap();
        assert!((xp - 1.0).norm_sqr() < 1e-6);
    }

    #[test]
    fn step_response_matches_inverse_transform() {
        let r = rc();
        let c = LoopConfig::reference(&r);
        let n0 = 5;
        let len = 64;
        let step: Vec<f64> = (0..len).map(|n| if n >= n0 { 1.0 } else { 0.0 }).collect();
        let (_, p, f) = linear_loop(&step, &[], c.gain);

        // Oracle: impulse response of X_p from an inverse DFT of its samples
        // on the unit circle, then integrate to a step response.
        let m = 4096;
        let t_l = c.update_period(&r);
        let h: Vec<f64> = (0..len)
            .map(|k| {
                (0..m)
                    .map(|j| {
                        let f = j as f64 / (m as f64 * t_l);
                        let zi = Complex64::from_polar(1.0, -2.0 * PI * f * t_l);
                        let xp = c.gain / (1.0 - zi + c.gain * zi);
                        (xp * Complex64::from_polar(1.0, 2.0 * PI * (j * k) as f64 / m as f64)).re
                    })
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        let mut acc = 0.0;
        for n in 0..len {
            if n >= n0 {
                acc += h[n - n0];
            }
            assert!((p[n] + acc).abs() < 1e-9, "n={n}: {} vs {}", p[n], -acc);
        }
        // The qubit sees the correction one update later.
        assert_eq!(f[n0], 1.0);
        assert_relative_eq!(f[n0 + 1], 1.0 - c.gain, max_relative = 1e-12);
    }

    #[test]
    fn lut_contents() {
        let r = rc();
        let c = LoopConfig { mode: ArithmeticMode::FixedPoint, ..LoopConfig::reference(&r) };
        let lut = build_lut(&c, &r).unwrap();
        assert_eq!(lut.len(), 21);
        assert_eq!(lut[10], 0);
        let fmt = FixedPointFormat::from_config(&c);
        assert_relative_eq!(lut[0] as f64 * fmt.acc_lsb_hz(), -70e3, max_relative = 1e-6);
        assert_relative_eq!(lut[20] as f64 * fmt.acc_lsb_hz(), 70e3, max_relative = 1e-6);
    }

    #[test]
    fn running_sum_matches_window() {
        let mut b = ShotBuffer::new(4);
        let bits = [1u8, 0, 1, 1, 1, 0, 0, 1, 0, 0];
        for (i, &q) in bits.iter().enumerate() {
            b.push(q);
            let lo = i.saturating_sub(3);
            let want: usize = bits[lo..=i].iter().map(|&x| x as usize).sum();
            assert_eq!(b.sum(), want);
        }
    }

    #[test]
    fn fixed_point_step_examples() {
        let r = rc();
        let c = LoopConfig { mode: ArithmeticMode::FixedPoint, ..LoopConfig::reference(&r) };
        let lut = build_lut(&c, &r).unwrap();
        let fmt = FixedPointFormat::from_config(&c);
        let mut b = ShotBuffer::new(20);
        for i in 0..20 {
            b.push((i % 2) as u8);
        }
        let s = fixed_point_step(&b, &lut, 12345, &fmt).unwrap();
        assert_eq!(s.acc, 12345);
        assert!(!s.saturated);
        let mut z = ShotBuffer::new(20);
        for _ in 0..20 {
            z.push(0);
        }
        let s = fixed_point_step(&z, &lut, 0, &fmt).unwrap();
        assert_eq!(s.acc, lut[0]);
    }

    #[test]
    fn fixed_point_saturates() {
        let r = rc();
        let c = LoopConfig {
            mode: ArithmeticMode::FixedPoint,
            dac_bits: 4,
            acc_frac_bits: 0,
            dac_full_scale_hz: 80e3,
            ..LoopConfig::reference(&r)
        };
        let fmt = FixedPointFormat::from_config(&c);
        assert_relative_eq!(fmt.dac_lsb_hz(), 10e3);
        let (a, sat) = fmt.saturate(100);
        assert_eq!((a, sat), (7, true));
        assert_eq!(fmt.dac_value(-100), -80e3);
        let s = loop_step(LoopState::default(), 1e6, &c);
        assert!(s.saturated);
        assert_eq!(s.p, 70e3);
    }

    #[test]
    fn fixed_point_tracks_real_mode() {
        let r = rc();
        let real = LoopConfig::reference(&r);
        let fixed = LoopConfig { mode: ArithmeticMode::FixedPoint, dac_bits: 24, ..real };
        let model = NoiseModel::reference();
        let a = run_closed_loop(&model, &r, &real, 500, 17).unwrap();
        let b = run_closed_loop(&model, &r, &fixed, 500, 17).unwrap();
        let lsb = FixedPointFormat::from_config(&fixed).dac_lsb_hz();
        for (x, y) in a.control_signal.values().iter().zip(b.control_signal.values()) {
            assert!((x - y).abs() <= lsb, "{x} vs {y}");
        }
        assert_eq!(b.saturations, 0);
    }

    #[test]
    fn zero_gain_is_open_loop() {
        let r = rc();
        let rec = run_closed_loop(&NoiseModel::reference(), &r, &LoopConfig::open(&r), 200, 3).unwrap();
        assert!(rec.control_signal.values().iter().all(|&p| p == 0.0));
        assert_eq!(rec.true_frequency, rec.intrinsic_frequency);
        assert_eq!(rec.len(), 200);
        assert_eq!(rec.shots[0].len(), 20);
        assert_relative_eq!(rec.error_signal.sample_period(), 70e-6, max_relative = 1e-12);
    }

    #[test]
    fn equal_seeds_share_intrinsic_noise() {
        let r = rc();
        let m = NoiseModel::reference();
        let a = run_closed_loop(&m, &r, &LoopConfig::open(&r), 100, 9).unwrap();
        let b = run_closed_loop(&m, &r, &LoopConfig::reference(&r), 100, 9).unwrap();
        assert_eq!(a.intrinsic_frequency, b.intrinsic_frequency);
        assert_ne!(a.control_signal, b.control_signal);
        assert_eq!(a, run_closed_loop(&m, &r, &LoopConfig::open(&r), 100, 9).unwrap());
    }

    #[test]
    fn unstable_gain_is_detected() {
        let r = rc();
        let c = LoopConfig::new(2.5, &r);
        assert!(c.validate(&r).is_err());
        let res = run_closed_loop(&NoiseModel::reference(), &r, &c, 2000, 1);
        assert!(matches!(res, Err(Error::Diverged { .. })), "{res:?}");
    }

    #[test]
    fn stride_longer_than_estimate() {
        let r = rc();
        let c = LoopConfig { update_stride: 21, ..LoopConfig::reference(&r) };
        let rec = run_closed_loop(&NoiseModel::reference(), &r, &c, 50, 4).unwrap();
        assert_relative_eq!(rec.error_signal.sample_period(), 21.0 * 3.5e-6, max_relative = 1e-12);
        assert!(rec.shots.iter().all(|s| s.len() == 20));
        let short = LoopConfig { update_stride: 19, ..c };
        assert!(run_closed_loop(&NoiseModel::reference(), &r, &short, 5, 4).is_err());
    }

    #[test]
    fn idle_gap_changes_loop_period() {
        let r = rc();
        let c = LoopConfig { idle_gap_s: 10e-6, ..LoopConfig::reference(&r) };
        assert_relative_eq!(c.nyquist_hz(&r), 0.5 / 80e-6, max_relative = 1e-12);
        let rec = run_closed_loop(&NoiseModel::reference(), &r, &c, 20, 2).unwrap();
        assert_eq!(rec.len(), 20);
    }

    #[test]
    fn csv_layout() {
        let r = rc();
        let rec = run_closed_loop(&NoiseModel::silent(), &r, &LoopConfig::reference(&r), 3, 0).unwrap();
        let mut out = Vec::new();
        rec.write_csv(&mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "n,t_s,error_hz,control_hz,true_freq_hz");
        assert_eq!(lines.len(), 4);
        assert!(s.ends_with('\n'));
    }

    #[test]
    fn aliased_intrinsic_spectrum_of_white_noise() {
        // A white shot-rate process averaged over N shots keeps its variance
        // divided by N, spread flat over the loop band.
        let r = rc();
        let c = LoopConfig::open(&r);
        let s0 = 2.0;
        let m = NoiseModel::white(s0).unwrap();
        let want = s0 * (0.5 / r.cycle_time_s) / 20.0 / c.nyquist_hz(&r);
        for f in [10.0, 1e3, 7e3] {
            assert_relative_eq!(sampled_intrinsic_psd(&m, &r, &c, f).unwrap(), want, max_relative = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn error_transfer_identity(f in 0.0f64..7142.0, g in 0.01f64..1.99) {
            let r = RamseyConfig::reference();
            let c = LoopConfig::new(g, &r);
            let zi = Complex64::from_polar(1.0, -2.0 * PI * f * c.update_period(&r));
            let lhs = transfer_e(f, &c, &r).unwrap();
            let rhs = 1.0 - zi * transfer_p(f, &c, &r).unwrap();
            prop_assert!((lhs - rhs).norm() < 1e-12);
        }

        #[test]
        fn bounded_errors_keep_accumulator_bounded(g in 0.05f64..1.95, seed in 0u64..1000) {
            // Sampled model driven by bounded noise stays within the l1 norm
            // of the noise-to-control impulse response.
            let mut rng = rng_from_seed(seed);
            let v: Vec<f64> = (0..2000).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
            let (_, p, _) = linear_loop(&vec![0.0; v.len()], &v, g);
            let bound = g / (1.0 - (1.0 - g).abs());
            prop_assert!(p.iter().all(|x| x.abs() <= bound + 1e-9));
        }
    }
}
