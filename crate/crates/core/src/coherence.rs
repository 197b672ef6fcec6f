//! Coherence: Gaussian-noise Ramsey envelopes from a PSD, T2 extraction,
//! interleaved Ramsey simulation with and without feedback, and the
//! dephasing-rate versus flux-sensitivity law.

use std::f64::consts::PI;
use std::io::{self, Write};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{domain, Error, Result};
use crate::feedback::{shot_frequency, Controller, LoopConfig, ShotAveraging};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::physics::{synthesize_trace, NoiseModel, TimeTrace, TransmonSpec};
use crate::ramsey::{ramsey_p1, virtual_reset_from, RamseyConfig, ShotRecord};
use crate::seed::{derive_seed, rng_from_seed};
use crate::spectral::SpectrumEstimate;

/// Echo bandwidth factor.
pub const ETA_ECHO: f64 = std::f64::consts::LN_2;

// 15-point Kronrod abscissae (non-negative half) and weights, with the
// embedded 7-point Gauss weights for the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

fn adaptive(f: &impl Fn(f64) -> f64, a: f64, b: f64, rel: f64, depth: u32) -> f64 {
    let (k, err) = gk15(f, a, b);
    if depth == 0 || err <= rel * k.abs() || err < 1e-300 {
        return k;
    }
    let m = 0.5 * (a + b);
    adaptive(f, a, m, rel, depth - 1) + adaptive(f, m, b, rel, depth - 1)
}

/// Relative accuracy requested from every quadrature segment.
pub const QUAD_REL_TOL: f64 = 1e-10;

/// `sin(x)/x`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `∫ S(f)·sinc²(πft) df` over `[f0, f_upper]`, split at octaves and at
/// the zeros `k/t` of the filter so each piece is smooth.
pub fn filter_integral(psd: impl Fn(f64) -> f64, t: f64, f0: f64, f_upper: f64, rel_tol: f64) -> Result<f64> {
    if !(f0 > 0.0) {
        return Err(Error::Divergent(format!(
            "lower cutoff {f0} Hz must be positive for a low-frequency divergent spectrum"
        )));
    }
    if !(f_upper > f0) || !f_upper.is_finite() {
        return Err(domain("upper cutoff", f_upper));
    }
    if !(t >= 0.0) {
        return Err(domain("time", t));
    }
    let mut edges = vec![f0];
    let mut e = f0;
    while e * 2.0 < f_upper {
        e *= 2.0;
        edges.push(e);
    }
    if t > 0.0 {
        let first = (f0 * t).floor() as u64 + 1;
        let last = ((f_upper * t).ceil() as u64).min(first + 200_000);
        edges.extend((first..last).map(|k| k as f64 / t).filter(|&z| z > f0 && z < f_upper));
    }
    edges.push(f_upper);
    edges.sort_by(f64::total_cmp);
    edges.dedup();
    let g = |f: f64| {
        let s = sinc(PI * f * t);
        psd(f) * s * s
    };
    let total: f64 = edges.windows(2).map(|w| adaptive(&g, w[0], w[1], rel_tol, 30)).sum();
    if !total.is_finite() {
        return Err(Error::Divergent(format!("filter integral is {total}")));
    }
    Ok(total)
}

/// Ramsey decay `χ(t) = exp[-2π²t² ∫ S(f) sinc²(πft) df]` for Gaussian
/// frequency noise of unilateral PSD `psd` on `[f0, f_upper]`.
pub fn ramsey_envelope(psd: impl Fn(f64) -> f64, t: f64, f0: f64, f_upper: f64) -> Result<f64> {
    let i = filter_integral(psd, t, f0, f_upper, QUAD_REL_TOL)?;
    Ok((-2.0 * PI * PI * t * t * i).exp())
}

/// [`ramsey_envelope`] for a [`NoiseModel`]; lines enter as delta
/// functions.
pub fn model_envelope(model: &NoiseModel, t: f64, f0: f64, f_upper: f64) -> Result<f64> {
    let top = model.cutoff_hz.map_or(f_upper, |c| c.min(f_upper));
    let mut i = if model.amplitude_at_1hz > 0.0 {
        filter_integral(|f| model.continuum_psd(f), t, f0, top, QUAD_REL_TOL)?
    } else {
        0.0
    };
    for l in &model.lines {
        if l.frequency_hz >= f0 && l.frequency_hz <= top {
            let s = sinc(PI * l.frequency_hz * t);
            i += l.power_hz2 * s * s;
        }
    }
    Ok((-2.0 * PI * PI * t * t * i).exp())
}

/// Envelope for a binned spectrum: the integral becomes a sum over bins.
pub fn envelope_from_estimate(est: &SpectrumEstimate, t: f64, f0: f64, f_upper: f64) -> f64 {
    let i: f64 = est
        .frequencies
        .iter()
        .zip(&est.psd)
        .filter(|(f, _)| **f >= f0 && **f <= f_upper && **f > 0.0)
        .map(|(&f, &p)| {
            let s = sinc(PI * f * t);
            p * s * s
        })
        .sum::<f64>()
        * est.resolution;
    (-2.0 * PI * PI * t * t * i).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayEnvelope {
    pub times: Vec<f64>,
    pub chi: Vec<f64>,
    pub lower_cutoff: f64,
}

impl DecayEnvelope {
    pub fn from_psd(psd: impl Fn(f64) -> f64, times: &[f64], f0: f64, f_upper: f64) -> Result<Self> {
        let chi = times.iter().map(|&t| ramsey_envelope(&psd, t, f0, f_upper)).collect::<Result<_>>()?;
        Ok(DecayEnvelope { times: times.to_vec(), chi, lower_cutoff: f0 })
    }

    pub fn from_model(model: &NoiseModel, times: &[f64], f0: f64, f_upper: f64) -> Result<Self> {
        let chi = times.iter().map(|&t| model_envelope(model, t, f0, f_upper)).collect::<Result<_>>()?;
        Ok(DecayEnvelope { times: times.to_vec(), chi, lower_cutoff: f0 })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_s,chi")?;
        for (t, c) in self.times.iter().zip(&self.chi) {
            writeln!(w, "{t},{c}")?;
        }
        Ok(())
    }
}

/// First 1/e crossing of the envelope, linearly interpolated.
pub fn extract_t2(env: &DecayEnvelope) -> Result<f64> {
    let target = (-1.0f64).exp();
    if env.times.len() != env.chi.len() || env.times.is_empty() {
        return Err(Error::Input("envelope times and values differ in length".into()));
    }
    for i in 1..env.chi.len() {
        let (c0, c1) = (env.chi[i - 1], env.chi[i]);
        if c0 >= target && c1 < target {
            let (t0, t1) = (env.times[i - 1], env.times[i]);
            return Ok(t0 + (c0 - target) / (c0 - c1) * (t1 - t0));
        }
    }
    Err(Error::NoCrossing { last: *env.chi.last().unwrap_or(&f64::NAN) })
}

/// 1/e time of the analytic envelope for `model`, found by bisection.
pub fn model_t2(model: &NoiseModel, f0: f64, f_upper: f64) -> Result<f64> {
    let target = (-1.0f64).exp();
    let mut hi = 1e-6;
    while model_envelope(model, hi, f0, f_upper)? > target {
        hi *= 2.0;
        if hi > 10.0 {
            return Err(Error::NoCrossing { last: model_envelope(model, hi, f0, f_upper)? });
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if model_envelope(model, mid, f0, f_upper)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fit of `offset + amplitude·exp(-t/Ta - (t/Tb)²)·cos(2πft + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RamseyFit {
    pub offset: f64,
    pub amplitude: f64,
    /// `1/Ta`, 1/s.
    pub exp_rate: f64,
    /// `1/Tb²`, 1/s².
    pub gauss_rate: f64,
    pub frequency_hz: f64,
    pub phase: f64,
    /// 1/e time of the fitted envelope.
    pub t2: f64,
    /// RMS residual.
    pub residual: f64,
}

impl RamseyFit {
    pub fn envelope(&self, t: f64) -> f64 {
        (-self.exp_rate * t - self.gauss_rate * t * t).exp()
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.offset + self.amplitude * self.envelope(t) * (2.0 * PI * self.frequency_hz * t + self.phase).cos()
    }
}

fn one_over_e_time(a: f64, b: f64) -> f64 {
    if b <= 1e-30 * a * a {
        return 1.0 / a;
    }
    (-a + (a * a + 4.0 * b).sqrt()) / (2.0 * b)
}

/// Fit a decaying Ramsey fringe. `frequency_guess` seeds the oscillation
/// frequency; the decay times are seeded from a coarse scan.
pub fn fit_ramsey(times: &[f64], p1: &[f64], frequency_guess: f64) -> Result<RamseyFit> {
    if times.len() != p1.len() || times.len() < 8 {
        return Err(Error::Fit(format!("need at least 8 points, got {}", times.len())));
    }
    let span = times.iter().cloned().fold(0.0, f64::max);
    if !(span > 0.0) {
        return Err(Error::Fit("time grid has no extent".into()));
    }
    // Times in units of the grid span keep the parameters O(1).
    let ts: Vec<f64> = times.iter().map(|t| t / span).collect();
    let model = |p: &[f64], t: f64| {
        let env = (-(p[2] * p[2]) * t - (p[3] * p[3]) * t * t).exp();
        p[0] + p[1] * env * (2.0 * PI * p[4] * t + p[5]).cos()
    };
    let resid = |p: &[f64]| ts.iter().zip(p1).map(|(&t, &y)| model(p, t) - y).collect::<Vec<_>>();
    let cost = |p: &[f64]| resid(p).iter().map(|r| r * r).sum::<f64>();
    let offset = p1.iter().sum::<f64>() / p1.len() as f64;
    let amp = (p1[0] - offset).abs().max(0.1);
    let fg = frequency_guess * span;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for scale in [0.05f64, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0, 1.5] {
        for df in [-0.02, 0.0, 0.02] {
            let p = vec![offset, amp, (0.5 / scale).sqrt(), 0.5f64.sqrt() / scale, fg * (1.0 + df), 0.0];
            let c = cost(&p);
            if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                best = Some((c, p));
            }
        }
    }
    let (_, p0) = best.expect("scan is non-empty");
    let res = levenberg_marquardt(resid, &p0, LmOptions { max_iter: 500, ..LmOptions::default() })?;
    let p = &res.params;
    let mut amplitude = p[1];
    let mut phase = p[5];
    if amplitude < 0.0 {
        amplitude = -amplitude;
        phase += PI;
    }
    let exp_rate = p[2] * p[2] / span;
    let gauss_rate = p[3] * p[3] / (span * span);
    if !(exp_rate > 0.0 || gauss_rate > 0.0) {
        return Err(Error::Fit("fitted envelope does not decay".into()));
    }
    Ok(RamseyFit {
        offset: p[0],
        amplitude,
        exp_rate,
        gauss_rate,
        frequency_hz: p[4] / span,
        phase: phase.rem_euclid(2.0 * PI),
        t2: one_over_e_time(exp_rate, gauss_rate),
        residual: (res.cost / p1.len() as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeReadout {
    /// Record the exact excited-state probability of every probe.
    Probability,
    /// Record one projective shot per probe.
    Shots,
}

/// Probe sequence interleaved with the frequency estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub tau_r_grid: Vec<f64>,
    /// Detuning of the probe drive, Hz.
    pub set_detuning_hz: f64,
    /// Sweeps of the grid per block.
    pub reps_per_block: usize,
    pub n_blocks: usize,
    /// Readout and reset time after each probe, s.
    pub readout_overhead_s: f64,
    /// Energy relaxation during the probe; `None` for none.
    pub t1_s: Option<f64>,
    pub readout: ProbeReadout,
    /// Trace samples per shot period.
    pub oversample: usize,
    /// Hard band edge applied to the noise; `None` keeps the full trace band.
    pub noise_cutoff_hz: Option<f64>,
    /// Keep the qubit frequency trace `f̃(t) + p(t)`.
    pub record_frequency: bool,
}

impl ProbeConfig {
    /// Linear τ_R grid `[0, t_max]` with `n_points` points and defaults
    /// matched to `rcfg`.
    pub fn linear(t_max: f64, n_points: usize, set_detuning_hz: f64, n_blocks: usize, rcfg: &RamseyConfig) -> Self {
        let step = t_max / (n_points.max(2) - 1) as f64;
        ProbeConfig {
            tau_r_grid: (0..n_points).map(|i| i as f64 * step).collect(),
            set_detuning_hz,
            reps_per_block: 1,
            n_blocks,
            readout_overhead_s: rcfg.cycle_time_s - rcfg.tau_s,
            t1_s: None,
            readout: ProbeReadout::Probability,
            oversample: 4,
            noise_cutoff_hz: Some(0.5 / rcfg.cycle_time_s),
            record_frequency: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_r_grid.is_empty() || self.tau_r_grid.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(Error::Input("probe grid must be non-empty with non-negative times".into()));
        }
        if self.reps_per_block == 0 || self.n_blocks == 0 || self.oversample == 0 {
            return Err(Error::Input("reps, blocks and oversample must be positive".into()));
        }
        if !(self.readout_overhead_s >= 0.0) {
            return Err(domain("readout overhead", self.readout_overhead_s));
        }
        if let Some(t1) = self.t1_s {
            if !(t1 > 0.0) {
                return Err(domain("T1", t1));
            }
        }
        Ok(())
    }

    /// Duration of one block under `lcfg`, s.
    pub fn block_duration(&self, rcfg: &RamseyConfig, lcfg: &LoopConfig) -> f64 {
        let per_cycle = lcfg.update_stride as f64 * rcfg.cycle_time_s + lcfg.idle_gap_s + self.readout_overhead_s;
        self.reps_per_block as f64 * self.tau_r_grid.iter().map(|t| per_cycle + t).sum::<f64>()
    }

    pub fn total_duration(&self, rcfg: &RamseyConfig, lcfg: &LoopConfig) -> f64 {
        self.n_blocks as f64 * self.block_duration(rcfg, lcfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedResult {
    pub tau_r: Vec<f64>,
    /// Mean probe outcome per block and grid point.
    pub blocks: Vec<Vec<f64>>,
    pub p1_mean: Vec<f64>,
    /// Standard error of `p1_mean` across blocks.
    pub p1_sem: Vec<f64>,
    /// Two-quadrature magnitude `|⟨e^{iθ}⟩|` times the contrast: the
    /// decay envelope with the oscillation removed.
    pub envelope: Vec<f64>,
    pub block_duration_s: f64,
    pub duration_s: f64,
    pub frequency: Option<TimeTrace>,
    pub saturations: usize,
}

impl InterleavedResult {
    /// Average of consecutive groups of `blocks_per_section` blocks.
    pub fn sections(&self, blocks_per_section: usize) -> Vec<Vec<f64>> {
        let k = blocks_per_section.max(1);
        self.blocks
            .chunks_exact(k)
            .map(|c| {
                (0..self.tau_r.len())
                    .map(|j| c.iter().map(|b| b[j]).sum::<f64>() / k as f64)
                    .collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "tau_r_s,p1_mean,p1_sem")?;
        for j in 0..self.tau_r.len() {
            writeln!(w, "{},{},{}", self.tau_r[j], self.p1_mean[j], self.p1_sem[j])?;
        }
        Ok(())
    }
}

/// Alternate frequency estimates (driving the loop) with probe Ramsey
/// experiments at swept delay, all against one evolving noise trace.
///
/// Each cycle is one loop update (N_S shots, optional gap) followed by one
/// probe of length `τ_R + overhead`. The probe sees the intrinsic noise
/// averaged over its free evolution plus the current correction.
pub fn simulate_interleaved_ramsey(
    model: &NoiseModel,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<InterleavedResult> {
    probe.validate()?;
    lcfg.validate_structure(rcfg)?;
    let dt = rcfg.cycle_time_s / probe.oversample as f64;
    let duration = probe.total_duration(rcfg, lcfg);
    let samples = (duration / dt).ceil() as usize + 2;
    let noise = match probe.noise_cutoff_hz {
        Some(c) => model.clone().with_cutoff(model.cutoff_hz.map_or(c, |m| m.min(c)))?,
        None => model.clone(),
    };
    let trace = synthesize_trace(&noise, samples, dt, derive_seed(seed, 0))?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut ctl = Controller::new(lcfg, rcfg)?;

    let n_tau = probe.tau_r_grid.len();
    let contrast = |tau: f64| rcfg.init_fidelity * probe.t1_s.map_or(1.0, |t1| (-tau / (2.0 * t1)).exp());
    let mut blocks = Vec::with_capacity(probe.n_blocks);
    let mut cos_sum = vec![0.0; n_tau];
    let mut sin_sum = vec![0.0; n_tau];
    let mut updates: Vec<(f64, f64)> = Vec::new();
    let mut t = 0.0;
    let stride = lcfg.update_stride;
    let mut raw = Vec::with_capacity(stride);
    for _ in 0..probe.n_blocks {
        let mut block = vec![0.0; n_tau];
        for _ in 0..probe.reps_per_block {
            for (j, &tau_r) in probe.tau_r_grid.iter().enumerate() {
                // Estimate: restless shots, virtual reset, controller update.
                let p = ctl.control();
                raw.clear();
                let mut prev = 0u8;
                for s in 0..stride {
                    let f = shot_frequency(&trace, t + s as f64 * rcfg.cycle_time_s, lcfg, rcfg)?;
                    let u: f64 = rand::Rng::random(&mut rng);
                    prev ^= u8::from(u < ramsey_p1(-(f + p), rcfg));
                    raw.push(prev);
                }
                for &q in &virtual_reset_from(&ShotRecord { bits: raw.clone() }, 0).bits {
                    ctl.push_shot(q);
                }
                ctl.update()?;
                t += stride as f64 * rcfg.cycle_time_s + lcfg.idle_gap_s;
                if probe.record_frequency {
                    updates.push((t, ctl.control()));
                }

                // Probe.
                let f_bar = if tau_r > 0.0 { trace.window_mean(t, t + tau_r)? } else { trace.window_mean(t, t)? };
                let theta = 2.0 * PI * (probe.set_detuning_hz - (f_bar + ctl.control())) * tau_r;
                let c = contrast(tau_r);
                cos_sum[j] += c * theta.cos();
                sin_sum[j] += c * theta.sin();
                let p1 = 0.5 + 0.5 * c * theta.cos();
                block[j] += match probe.readout {
                    ProbeReadout::Probability => p1,
                    ProbeReadout::Shots => {
                        let u: f64 = rand::Rng::random(&mut rng);
                        f64::from(u8::from(u < p1))
                    }
                };
                t += tau_r + probe.readout_overhead_s;
            }
        }
        for v in &mut block {
            *v /= probe.reps_per_block as f64;
        }
        blocks.push(block);
    }

    let nb = blocks.len() as f64;
    let p1_mean: Vec<f64> = (0..n_tau).map(|j| blocks.iter().map(|b| b[j]).sum::<f64>() / nb).collect();
    let p1_sem = (0..n_tau)
        .map(|j| {
            if blocks.len() < 2 {
                return 0.0;
            }
            let m = p1_mean[j];
            let var = blocks.iter().map(|b| (b[j] - m).powi(2)).sum::<f64>() / (nb - 1.0);
            (var / nb).sqrt()
        })
        .collect();
    let total = nb * probe.reps_per_block as f64;
    let envelope = (0..n_tau).map(|j| cos_sum[j].hypot(sin_sum[j]) / total).collect();

    let frequency = if probe.record_frequency {
        let mut k = 0;
        let mut p = 0.0;
        let vals = trace
            .values()
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let ti = i as f64 * dt;
                while k < updates.len() && updates[k].0 <= ti {
                    p = updates[k].1;
                    k += 1;
                }
                f + p
            })
            .collect();
        Some(TimeTrace::new(dt, vals)?)
    } else {
        None
    };

    Ok(InterleavedResult {
        tau_r: probe.tau_r_grid.clone(),
        blocks,
        p1_mean,
        p1_sem,
        envelope,
        block_duration_s: probe.block_duration(rcfg, lcfg),
        duration_s: duration,
        frequency,
        saturations: ctl.saturations(),
    })
}

/// Gaussian-noise prediction of [`InterleavedResult::envelope`].
///
/// The probe at grid point `j` accumulates the phase of
/// `f̄_probe + p[n]`, and `p[n] = -G Σ_k (1-G)^k (f̃[n-k] - v[n-k])` is a
/// fixed linear functional of the noise over the preceding cycles, so the
/// envelope is the decay formula with `sinc²` replaced by the squared
/// response `|W_j(f)|²` of that functional, plus the estimator noise
/// `σ²·G/(2-G)`. For `G = 0` this is exactly [`model_envelope`].
/// Cycle timing follows the simulated order, including the varying probe
/// lengths of the preceding grid points.
pub fn interleaved_envelope(
    model: &NoiseModel,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    probe: &ProbeConfig,
    f0: f64,
) -> Result<Vec<f64>> {
    probe.validate()?;
    lcfg.validate(rcfg)?;
    if !(f0 > 0.0) {
        return Err(Error::Divergent(format!("lower cutoff {f0} Hz must be positive")));
    }
    let noise = match probe.noise_cutoff_hz {
        Some(c) => model.clone().with_cutoff(model.cutoff_hz.map_or(c, |m| m.min(c)))?,
        None => model.clone(),
    };
    let g = lcfg.gain;
    let n_tau = probe.tau_r_grid.len();
    let span = match lcfg.averaging {
        ShotAveraging::FreeEvolution => rcfg.tau_s,
        ShotAveraging::FullPeriod => rcfg.cycle_time_s,
    };
    let stride = lcfg.update_stride;
    let n = rcfg.shots_per_estimate;
    let est_len = stride as f64 * rcfg.cycle_time_s + lcfg.idle_gap_s;
    let sigma2 = (1.0 / (2.0 * PI * rcfg.tau_s)).powi(2) / n as f64;

    // Enough cycles of history for the weights to fall below 1e-9.
    let depth = if g > 0.0 && g < 1.0 { ((1e-9f64).ln() / (1.0 - g).ln()).ceil() as usize + 1 } else { 1 };
    let top = noise.cutoff_hz.unwrap_or(0.5 / rcfg.cycle_time_s);

    let mut out = Vec::with_capacity(n_tau);
    for (j, &tau) in probe.tau_r_grid.iter().enumerate() {
        if tau == 0.0 {
            out.push(rcfg.init_fidelity);
            continue;
        }
        // Start times (relative to the probe start) and weights of every
        // estimate window that enters p[n].
        let mut starts = Vec::with_capacity(depth);
        let mut end = 0.0;
        let mut w = g;
        for k in 0..depth {
            if g == 0.0 {
                break;
            }
            let first_used = end - est_len + (stride - n) as f64 * rcfg.cycle_time_s;
            starts.push((first_used, w));
            // Probe of the previous cycle, grid point j-k-1.
            let prev = probe.tau_r_grid[(j + n_tau * (k + 1) - (k + 1)) % n_tau];
            end -= est_len + prev + probe.readout_overhead_s;
            w *= 1.0 - g;
        }
        let response = |f: f64| {
            let a = PI * f * tau;
            let mut h = Complex64::from_polar(sinc(a), -a);
            if !starts.is_empty() {
                let b = PI * f * span;
                let shot = Complex64::from_polar(sinc(b), -b);
                let c = PI * f * rcfg.cycle_time_s;
                let comb = if c.sin().abs() < 1e-15 { 1.0 } else { (n as f64 * c).sin() / (n as f64 * c.sin()) };
                // Mean over shots starting at s·T, s = 0..N-1.
                let comb = Complex64::from_polar(comb, -c * (n as f64 - 1.0)) * shot;
                for &(s, wk) in &starts {
                    h -= wk * comb * Complex64::from_polar(1.0, -2.0 * PI * f * s);
                }
            }
            h.norm_sqr()
        };
        let mut edges = vec![f0];
        let mut e = f0;
        while e * 2.0 < top {
            e *= 2.0;
            edges.push(e);
        }
        // Resolve the oscillation set by the longest delay in the kernel.
        let reach = starts.last().map_or(tau, |s| tau - s.0);
        let step = 0.25 / reach;
        let mut e = step;
        while e < top {
            if e > f0 {
                edges.push(e);
            }
            e += step;
        }
        edges.push(top);
        edges.sort_by(f64::total_cmp);
        edges.dedup();
        let integrand = |f: f64| noise.continuum_psd(f) * response(f);
        let mut var: f64 = if noise.amplitude_at_1hz > 0.0 {
            edges.windows(2).map(|w| adaptive(&integrand, w[0], w[1], 1e-8, 20)).sum()
        } else {
            0.0
        };
        for l in &noise.lines {
            if l.frequency_hz >= f0 && l.frequency_hz <= top {
                var += l.power_hz2 * response(l.frequency_hz);
            }
        }
        var += sigma2 * g / (2.0 - g);
        let contrast = rcfg.init_fidelity * probe.t1_s.map_or(1.0, |t1| (-tau / (2.0 * t1)).exp());
        out.push(contrast * (-2.0 * PI * PI * tau * tau * var).exp());
    }
    Ok(out)
}

/// Fitted T2 of every section of `blocks_per_section` blocks.
pub fn t2_by_section(res: &InterleavedResult, blocks_per_section: usize, frequency_guess: f64) -> Result<Vec<f64>> {
    res.sections(blocks_per_section)
        .iter()
        .map(|s| fit_ramsey(&res.tau_r, s, frequency_guess).map(|f| f.t2))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherenceResult {
    pub t2: f64,
    pub gamma_phi: f64,
    pub gamma_1: f64,
    pub fit_residual: f64,
}

impl CoherenceResult {
    pub fn from_fit(fit: &RamseyFit, t1: Option<f64>) -> Self {
        let (gamma_phi, _) = pure_dephasing_rate(fit.t2, t1.unwrap_or(f64::INFINITY));
        CoherenceResult {
            t2: fit.t2,
            gamma_phi,
            gamma_1: t1.map_or(0.0, |t| 1.0 / t),
            fit_residual: fit.residual,
        }
    }
}

/// `Γ_φ = 1/T2 - 1/(2T1)`. Returns the rate and whether it had to be
/// clamped to zero because `T2 > 2·T1`.
pub fn pure_dephasing_rate(t2: f64, t1: f64) -> (f64, bool) {
    let g = 1.0 / t2 - 0.5 / t1;
    if g < 0.0 {
        (0.0, true)
    } else {
        (g, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxNoiseAmplitude {
    pub sqrt_a_phi: f64,
    pub eta: f64,
    pub k: f64,
}

/// `√A_Φ = k / (2π√η)`.
pub fn flux_noise_amplitude(k: f64, eta: f64) -> Result<FluxNoiseAmplitude> {
    if !(k >= 0.0) {
        return Err(domain("slope k", k));
    }
    if !(eta > 0.0) {
        return Err(domain("eta", eta));
    }
    Ok(FluxNoiseAmplitude { sqrt_a_phi: k / (2.0 * PI * eta.sqrt()), eta, k })
}

/// Inverse of [`flux_noise_amplitude`]: `k = 2π√η·√A_Φ`.
pub fn slope_for_amplitude(sqrt_a_phi: f64, eta: f64) -> f64 {
    2.0 * PI * eta.sqrt() * sqrt_a_phi
}

/// Bandwidth factor `ln(f_u / (2π f_l))` of a Ramsey measurement.
pub fn eta_ramsey(f_upper: f64, f_lower: f64) -> Result<f64> {
    if !(f_lower > 0.0 && f_upper > 2.0 * PI * f_lower) {
        return Err(Error::Input(format!("bad bandwidth [{f_lower}, {f_upper}]")));
    }
    Ok((f_upper / (2.0 * PI * f_lower)).ln())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    /// Φ0.
    pub k: f64,
    pub r_squared: f64,
}

/// Zero-intercept least squares `Γ_φ = k·|∂f/∂Φ|` over `(sensitivity,
/// gamma_phi)` points.
pub fn dephasing_sensitivity_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", points.len())));
    }
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    if !(sxx > 0.0) {
        return Err(Error::Fit("all sensitivities are zero".into()));
    }
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let k = sxy / sxx;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|(x, y)| (y - k * x).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean_y).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(SlopeFit { k, r_squared })
}

/// One bias point of a simulated flux sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxPoint {
    pub phi: f64,
    pub sensitivity: f64,
    pub t2: f64,
    pub gamma_phi: f64,
    /// Length of the simulated record, s.
    pub duration_s: f64,
}

/// Fit `Γ_φ` against `|∂f/∂Φ|` and convert the slope to a flux-noise
/// amplitude. The bandwidth factor uses the median T2 as the upper and the
/// median record length as the lower frequency scale.
pub fn recover_flux_noise(points: &[FluxPoint]) -> Result<(SlopeFit, FluxNoiseAmplitude)> {
    let fit = dephasing_sensitivity_fit(&points.iter().map(|p| (p.sensitivity.abs(), p.gamma_phi)).collect::<Vec<_>>())?;
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let t2 = median(points.iter().map(|p| p.t2).collect());
    let dur = median(points.iter().map(|p| p.duration_s).collect());
    let eta = eta_ramsey(1.0 / t2, 1.0 / dur)?;
    Ok((fit, flux_noise_amplitude(fit.k, eta)?))
}

/// Settings for [`simulate_flux_sweep`].
#[derive(Debug, Clone, PartialEq)]
pub struct FluxSweepConfig {
    pub phis: Vec<f64>,
    pub sqrt_a_phi: f64,
    pub points_per_scan: usize,
    /// Blocks per bias point; each block is one sweep of the scan.
    pub n_blocks: usize,
    pub t1_s: Option<f64>,
}

/// Open-loop interleaved Ramsey at every bias in `cfg.phis` with frequency
/// noise transduced from 1/f flux noise. Each scan spans three predicted
/// T2 with a drive detuning of two fringes per predicted T2.
pub fn simulate_flux_sweep(
    spec: &TransmonSpec,
    cfg: &FluxSweepConfig,
    rcfg: &RamseyConfig,
    seed: u64,
) -> Result<Vec<FluxPoint>> {
    let lcfg = LoopConfig::open(rcfg);
    let f_upper = 0.5 / rcfg.cycle_time_s;
    cfg.phis
        .par_iter()
        .enumerate()
        .map(|(i, &phi)| {
            let model = spec.frequency_noise_from_flux(phi, cfg.sqrt_a_phi)?;
            let mut probe = ProbeConfig::linear(1.0, cfg.points_per_scan, 0.0, cfg.n_blocks, rcfg);
            probe.t1_s = cfg.t1_s;
            let f0 = 1.0 / probe.total_duration(rcfg, &lcfg).max(1e-3);
            let t2_pred = model_t2(&model, f0, f_upper)?;
            probe = ProbeConfig::linear(3.0 * t2_pred, cfg.points_per_scan, 2.0 / t2_pred, cfg.n_blocks, rcfg);
            probe.t1_s = cfg.t1_s;
            let res = simulate_interleaved_ramsey(&model, rcfg, &lcfg, &probe, derive_seed(seed, i as u64))?;
            let fit = fit_ramsey(&res.tau_r, &res.p1_mean, probe.set_detuning_hz)?;
            let c = CoherenceResult::from_fit(&fit, cfg.t1_s);
            Ok(FluxPoint {
                phi,
                sensitivity: spec.flux_sensitivity(phi)?,
                t2: c.t2,
                gamma_phi: c.gamma_phi,
                duration_s: res.duration_s,
            })
        })
        .collect()
}
