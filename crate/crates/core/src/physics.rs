//! Noise environment of the qubit: parametric frequency-noise spectra, time
//! domain synthesis of stationary Gaussian traces, and the transmon flux map.
//!
//! All spectral densities are unilateral (one-sided): the variance of a
//! process equals the integral of its PSD from 0 to the Nyquist frequency.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;

use crate::error::{domain, Error, Result};
use crate::seed::rng_from_seed;

/// Flux bias of the spectroscopy operating point, in flux quanta.
pub const REFERENCE_BIAS_FLUX: f64 = 0.11;
/// Sweet-spot frequency placing the 0.11 Φ0 bias at 4.69 GHz.
pub const REFERENCE_F_MAX_HZ: f64 = 4.835e9;
/// Fitted 1 Hz amplitude of the qubit-frequency noise at the 0.11 Φ0 bias.
pub const REFERENCE_AMPLITUDE: f64 = 27.3e6;
pub const REFERENCE_EXPONENT: f64 = 0.8;
/// Default width of the top-hat bin used to represent a discrete line.
pub const DEFAULT_LINE_WIDTH_HZ: f64 = 1.0;

/// A discrete spectral line (e.g. mains pickup) carrying `power_hz2` of
/// variance at `frequency_hz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralLine {
    pub frequency_hz: f64,
    pub power_hz2: f64,
}

/// Power-law qubit-frequency noise `A·(1 Hz/f)^α` plus discrete lines.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// PSD at 1 Hz, Hz²/Hz.
    pub amplitude_at_1hz: f64,
    pub exponent_alpha: f64,
    pub lines: Vec<SpectralLine>,
    /// Width of the top-hat each line occupies in [`NoiseModel::psd`].
    pub line_width_hz: f64,
    /// Optional hard upper band edge; the spectrum is zero above it.
    pub cutoff_hz: Option<f64>,
}

impl NoiseModel {
    pub fn new(amplitude_at_1hz: f64, exponent_alpha: f64) -> Result<Self> {
        let model = NoiseModel {
            amplitude_at_1hz,
            exponent_alpha,
            lines: Vec::new(),
            line_width_hz: DEFAULT_LINE_WIDTH_HZ,
            cutoff_hz: None,
        };
        model.validate()?;
        Ok(model)
    }

    /// The fitted spectrum of the reference operating point.
    pub fn reference() -> Self {
        NoiseModel::new(REFERENCE_AMPLITUDE, REFERENCE_EXPONENT).expect("reference model is valid")
    }

    /// Flat spectrum of level `level` Hz²/Hz.
    pub fn white(level: f64) -> Result<Self> {
        NoiseModel::new(level, 0.0)
    }

    pub fn silent() -> Self {
        NoiseModel::new(0.0, 0.0).expect("zero model is valid")
    }

    pub fn with_line(mut self, frequency_hz: f64, power_hz2: f64) -> Result<Self> {
        self.lines.push(SpectralLine { frequency_hz, power_hz2 });
        self.validate()?;
        Ok(self)
    }

    pub fn with_cutoff(mut self, cutoff_hz: f64) -> Result<Self> {
        self.cutoff_hz = Some(cutoff_hz);
        self.validate()?;
        Ok(self)
    }

    /// Scale every component of the spectrum by `factor` (e.g. a squared
    /// sensitivity ratio when moving to another flux bias).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(domain("scale factor", factor));
        }
        let mut out = self.clone();
        out.amplitude_at_1hz *= factor;
        for line in &mut out.lines {
            line.power_hz2 *= factor;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude_at_1hz >= 0.0 && self.amplitude_at_1hz.is_finite()) {
            return Err(domain("noise amplitude", self.amplitude_at_1hz));
        }
        if !(0.0..=2.0).contains(&self.exponent_alpha) {
            return Err(domain("noise exponent", self.exponent_alpha));
        }
        if !(self.line_width_hz > 0.0 && self.line_width_hz.is_finite()) {
            return Err(domain("line width", self.line_width_hz));
        }
        for line in &self.lines {
            if !(line.frequency_hz > 0.0 && line.frequency_hz.is_finite()) {
                return Err(domain("line frequency", line.frequency_hz));
            }
            if !(line.power_hz2 >= 0.0 && line.power_hz2.is_finite()) {
                return Err(domain("line power", line.power_hz2));
            }
        }
        if let Some(c) = self.cutoff_hz {
            if !(c > 0.0) {
                return Err(domain("cutoff frequency", c));
            }
        }
        Ok(())
    }

    fn above_cutoff(&self, f: f64) -> bool {
        self.cutoff_hz.is_some_and(|c| f > c)
    }

    /// Power-law part only.
    pub fn continuum_psd(&self, f: f64) -> f64 {
        if self.above_cutoff(f) || self.amplitude_at_1hz == 0.0 {
            return 0.0;
        }
        self.amplitude_at_1hz * f.powf(-self.exponent_alpha)
    }

    /// Unilateral PSD in Hz²/Hz at `f > 0`.
    pub fn psd(&self, f: f64) -> Result<f64> {
        if !(f > 0.0) || !f.is_finite() {
            return Err(domain("frequency", f));
        }
        let half = 0.5 * self.line_width_hz;
        let lines: f64 = self
            .lines
            .iter()
            .filter(|l| (f - l.frequency_hz).abs() <= half)
            .map(|l| l.power_hz2 / self.line_width_hz)
            .sum();
        if self.above_cutoff(f) {
            return Ok(0.0);
        }
        Ok(self.continuum_psd(f) + lines)
    }

    /// Total variance on `[f_lo, f_hi]`, power-law part in closed form.
    pub fn band_variance(&self, f_lo: f64, f_hi: f64) -> f64 {
        let hi = self.cutoff_hz.map_or(f_hi, |c| c.min(f_hi));
        if !(hi > f_lo) {
            return 0.0;
        }
        let a = self.amplitude_at_1hz;
        let cont = if (self.exponent_alpha - 1.0).abs() < 1e-12 {
            a * (hi / f_lo).ln()
        } else {
            let p = 1.0 - self.exponent_alpha;
            a * (hi.powf(p) - f_lo.powf(p)) / p
        };
        let lines: f64 = self
            .lines
            .iter()
            .filter(|l| l.frequency_hz >= f_lo && l.frequency_hz <= hi)
            .map(|l| l.power_hz2)
            .sum();
        cont + lines
    }
}

/// Free-function form of [`NoiseModel::psd`].
pub fn model_psd(model: &NoiseModel, f: f64) -> Result<f64> {
    model.psd(f)
}

/// Uniformly sampled real signal (frequency offsets in Hz).
///
/// Sample `i` holds the value on `[i·dt, (i+1)·dt)`; window averages treat
/// the trace as piecewise constant.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTrace {
    sample_period: f64,
    values: Vec<f64>,
}

impl TimeTrace {
    pub fn new(sample_period: f64, values: Vec<f64>) -> Result<Self> {
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(domain("sample period", sample_period));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite sample {bad}")));
        }
        Ok(TimeTrace { sample_period, values })
    }

    pub fn zeros(sample_period: f64, n: usize) -> Result<Self> {
        TimeTrace::new(sample_period, vec![0.0; n])
    }

    pub fn sample_period(&self) -> f64 {
        self.sample_period
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.values.len() as f64 * self.sample_period
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let m = self.mean();
        self.values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.values.len() as f64
    }

    /// Mean of the piecewise-constant signal over `[t0, t1]`.
    pub fn window_mean(&self, t0: f64, t1: f64) -> Result<f64> {
        let duration = self.duration();
        // Tolerate float round-off at the trace end.
        let slack = 1e-9 * self.sample_period;
        if !(t0 >= 0.0 && t1 >= t0 && t1 <= duration + slack) {
            return Err(Error::Bounds { start: t0, end: t1, duration });
        }
        let dt = self.sample_period;
        let last = self.values.len() - 1;
        let i0 = ((t0 / dt).floor() as usize).min(last);
        if t1 - t0 <= 0.0 {
            return Ok(self.values[i0]);
        }
        let i1 = (((t1 / dt).ceil() as usize).max(i0 + 1) - 1).min(last);
        if i0 == i1 {
            return Ok(self.values[i0]);
        }
        let mut acc = 0.0;
        for i in i0..=i1 {
            let lo = (i as f64 * dt).max(t0);
            let hi = ((i + 1) as f64 * dt).min(t1);
            if hi > lo {
                acc += self.values[i] * (hi - lo);
            }
        }
        Ok(acc / (t1 - t0))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<TimeTrace> {
        TimeTrace::new(self.sample_period, self.values.iter().map(|&v| f(v)).collect())
    }
}

/// Stationary Gaussian trace whose spectrum is `model`.
///
/// Frequency-domain synthesis: every positive-frequency bin receives a
/// complex Gaussian coefficient with variance set by the model PSD at the bin
/// centre, the spectrum is completed with Hermitian symmetry and transformed
/// back. The DC bin is zero. Lines are deposited in their nearest bin so
/// their full power survives any bin width. Identical seeds give identical
/// traces.
pub fn synthesize_trace(
    model: &NoiseModel,
    n_samples: usize,
    sample_period: f64,
    seed: u64,
) -> Result<TimeTrace> {
    model.validate()?;
    if n_samples < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {n_samples}")));
    }
    if !(sample_period > 0.0 && sample_period.is_finite()) {
        return Err(domain("sample period", sample_period));
    }
    let n = n_samples;
    let df = 1.0 / (n as f64 * sample_period);
    let half = n / 2;

    // Per-bin target PSD for k = 1..=half.
    let mut target: Vec<f64> = (1..=half).map(|k| model.continuum_psd(k as f64 * df)).collect();
    for line in &model.lines {
        let k = (line.frequency_hz / df).round() as usize;
        if (1..=half).contains(&k) && !model.above_cutoff(line.frequency_hz) {
            target[k - 1] += line.power_hz2 / df;
        }
    }

    let mut rng = rng_from_seed(seed);
    let mut spectrum = vec![Complex64::new(0.0, 0.0); n];
    let nf = n as f64;
    for k in 1..=half {
        let s = target[k - 1];
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        if n % 2 == 0 && k == half {
            // Real Nyquist bin: E|X|² = S·Δf·n².
            spectrum[k] = Complex64::new(nf * (s * df).sqrt() * re, 0.0);
        } else {
            // E|X|² = S·Δf·n²/2 for paired bins.
            let c = 0.5 * nf * (s * df).sqrt();
            spectrum[k] = Complex64::new(c * re, c * im);
            spectrum[n - k] = spectrum[k].conj();
        }
    }

    let mut planner = FftPlanner::new();
    planner.plan_fft_inverse(n).process(&mut spectrum);
    let values = spectrum.into_iter().map(|c| c.re / nf).collect();
    TimeTrace::new(sample_period, values)
}

/// Symmetric-junction transmon, `f(Φ) = f_max·sqrt(|cos(πΦ/Φ0)|)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransmonSpec {
    pub f_max_hz: f64,
}

impl TransmonSpec {
    pub fn new(f_max_hz: f64) -> Result<Self> {
        if !(f_max_hz > 0.0 && f_max_hz.is_finite()) {
            return Err(domain("sweet-spot frequency", f_max_hz));
        }
        Ok(TransmonSpec { f_max_hz })
    }

    pub fn reference() -> Self {
        TransmonSpec { f_max_hz: REFERENCE_F_MAX_HZ }
    }

    fn check_flux(phi: f64) -> Result<()> {
        if !(phi.abs() < 0.5) {
            return Err(domain("flux bias (Φ0)", phi));
        }
        Ok(())
    }

    pub fn frequency_at_flux(&self, phi: f64) -> Result<f64> {
        Self::check_flux(phi)?;
        Ok(self.f_max_hz * (PI * phi).cos().abs().sqrt())
    }

    /// `|∂f/∂Φ|` in Hz per Φ0.
    pub fn flux_sensitivity(&self, phi: f64) -> Result<f64> {
        Self::check_flux(phi)?;
        let x = PI * phi;
        Ok(self.f_max_hz * PI * x.sin().abs() / (2.0 * x.cos().sqrt()))
    }

    /// Non-negative flux bias at which the qubit sits at `frequency_hz`.
    pub fn flux_for_frequency(&self, frequency_hz: f64) -> Result<f64> {
        if !(frequency_hz > 0.0 && frequency_hz <= self.f_max_hz) {
            return Err(domain("qubit frequency", frequency_hz));
        }
        let r = frequency_hz / self.f_max_hz;
        Ok((r * r).acos() / PI)
    }

    /// First-order transduction `S_ff = (∂f/∂Φ)²·S_ΦΦ`.
    pub fn flux_noise_to_frequency_noise(&self, phi: f64, s_flux: f64) -> Result<f64> {
        let d = self.flux_sensitivity(phi)?;
        Ok(d * d * s_flux)
    }

    /// Frequency-noise model produced by 1/f flux noise of amplitude
    /// `sqrt_a_phi` (Φ0) at bias `phi`.
    ///
    /// The flux amplitude follows the `S_ΦΦ(ω) = A_Φ/|ω|` convention, whose
    /// unilateral per-Hz form is `2·A_Φ/f`.
    pub fn frequency_noise_from_flux(&self, phi: f64, sqrt_a_phi: f64) -> Result<NoiseModel> {
        let a_phi = sqrt_a_phi * sqrt_a_phi;
        NoiseModel::new(self.flux_noise_to_frequency_noise(phi, 2.0 * a_phi)?, 1.0)
    }

    /// Ratio of squared sensitivities, used to carry a noise model measured
    /// at `from_phi` to `to_phi`.
    pub fn sensitivity_ratio_sq(&self, from_phi: f64, to_phi: f64) -> Result<f64> {
        let a = self.flux_sensitivity(from_phi)?;
        let b = self.flux_sensitivity(to_phi)?;
        if a == 0.0 {
            return Err(domain("reference flux sensitivity", a));
        }
        Ok((b / a).powi(2))
    }
}

pub fn frequency_at_flux(spec: &TransmonSpec, phi: f64) -> Result<f64> {
    spec.frequency_at_flux(phi)
}

pub fn flux_sensitivity(spec: &TransmonSpec, phi: f64) -> Result<f64> {
    spec.flux_sensitivity(phi)
}

pub fn flux_noise_to_frequency_noise(spec: &TransmonSpec, phi: f64, s_flux: f64) -> Result<f64> {
    spec.flux_noise_to_frequency_noise(phi, s_flux)
}
