//! The probing phase: shot-level Ramsey experiments, restless virtual reset,
//! and frequency estimation by inverting the fringe.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::physics::TimeTrace;

/// Timing and readout parameters of one frequency estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RamseyConfig {
    /// Free-evolution time τ between the two π/2 pulses, s.
    pub tau_s: f64,
    /// Full shot duration T (evolution + readout + reset), s.
    pub cycle_time_s: f64,
    /// Shots N averaged into one estimate.
    pub shots_per_estimate: usize,
    /// φ_m: 0 for an X measurement, π/2 for Y.
    pub measurement_phase: f64,
    /// Symmetric contrast factor applied to the fringe.
    pub init_fidelity: f64,
}

impl RamseyConfig {
    /// τ = 1.25 µs, T = 3.5 µs, N = 20, Y measurement, ideal contrast.
    pub fn reference() -> Self {
        RamseyConfig {
            tau_s: 1.25e-6,
            cycle_time_s: 3.5e-6,
            shots_per_estimate: 20,
            measurement_phase: FRAC_PI_2,
            init_fidelity: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_s > 0.0) {
            return Err(domain("tau", self.tau_s));
        }
        if !(self.cycle_time_s > self.tau_s && self.cycle_time_s.is_finite()) {
            return Err(Error::Input(format!(
                "cycle time {} s must exceed tau {} s",
                self.cycle_time_s, self.tau_s
            )));
        }
        if self.shots_per_estimate == 0 {
            return Err(Error::Input("shots_per_estimate must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.init_fidelity) {
            return Err(domain("init fidelity", self.init_fidelity));
        }
        if !self.measurement_phase.is_finite() {
            return Err(domain("measurement phase", self.measurement_phase));
        }
        Ok(())
    }

    /// T_N = N·T.
    pub fn estimate_period(&self) -> f64 {
        self.shots_per_estimate as f64 * self.cycle_time_s
    }

    /// 1/(2·N·T), the bandwidth of the estimate stream.
    pub fn bandwidth_hz(&self) -> f64 {
        0.5 / self.estimate_period()
    }

    /// Detuning interval on which [`invert_p1`] is the inverse of [`ramsey_p1`].
    pub fn unambiguous_range(&self) -> (f64, f64) {
        let scale = 2.0 * PI * self.tau_s;
        ((self.measurement_phase - PI) / scale, self.measurement_phase / scale)
    }
}

/// Excited-state probability for a quasi-static detuning `delta` (Hz).
pub fn ramsey_p1(delta: f64, cfg: &RamseyConfig) -> f64 {
    let ideal = 0.5 * (2.0 * PI * delta * cfg.tau_s - cfg.measurement_phase).cos();
    0.5 + cfg.init_fidelity * ideal
}

/// Negative-branch, k = 0 inverse of the Ramsey fringe.
pub fn invert_p1(p1: f64, cfg: &RamseyConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&p1) {
        return Err(domain("excited-state probability", p1));
    }
    let x = (2.0 * p1 - 1.0).clamp(-1.0, 1.0);
    Ok((cfg.measurement_phase - x.acos()) / (2.0 * PI * cfg.tau_s))
}

/// One projective readout: 1 with probability `ramsey_p1(true_delta)`.
pub fn simulate_shot<R: Rng + ?Sized>(true_delta: f64, cfg: &RamseyConfig, rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    u8::from(u < ramsey_p1(true_delta, cfg))
}

/// Discriminated readout bits `q_i` of one estimate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShotRecord {
    pub bits: Vec<u8>,
}

impl ShotRecord {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Input("shot bits must be 0 or 1".into()));
        }
        Ok(ShotRecord { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn mean(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.ones() as f64 / self.bits.len() as f64
    }
}

/// Undo the missing qubit reset: `q'_i = q_i XOR q_{i-1}`, with the bit
/// before the record taken as 0 (ground state).
pub fn virtual_reset(record: &ShotRecord) -> ShotRecord {
    virtual_reset_from(record, 0)
}

/// [`virtual_reset`] continuing from a known previous raw bit.
pub fn virtual_reset_from(record: &ShotRecord, prev_raw: u8) -> ShotRecord {
    let mut prev = prev_raw;
    let bits = record
        .bits
        .iter()
        .map(|&q| {
            let out = q ^ prev;
            prev = q;
            out
        })
        .collect();
    ShotRecord { bits }
}

/// Raw discriminator output of a restless sequence.
///
/// Without a reset, a shot starts in the state the previous readout left
/// behind, so the recorded bit is the ideal outcome XOR the previous raw bit.
/// `deltas` holds the quasi-static detuning of each shot. Returns the record
/// and the final raw bit.
pub fn simulate_raw_record<R: Rng + ?Sized>(
    deltas: &[f64],
    cfg: &RamseyConfig,
    prev_raw: u8,
    rng: &mut R,
) -> (ShotRecord, u8) {
    let mut prev = prev_raw;
    let bits = deltas
        .iter()
        .map(|&d| {
            prev ^= simulate_shot(d, cfg, rng);
            prev
        })
        .collect();
    (ShotRecord { bits }, prev)
}

/// `invert_p1` of the fraction of ones in `record`.
pub fn estimate_frequency(record: &ShotRecord, cfg: &RamseyConfig) -> Result<f64> {
    if record.is_empty() {
        return Err(Error::Input("empty shot record".into()));
    }
    invert_p1(record.mean(), cfg)
}

/// Average of `trace` over the N free-evolution windows of estimate `n`,
/// i.e. over `[n·T_N + i·T, n·T_N + i·T + τ)` for `i < N`.
pub fn sampled_frequency(trace: &TimeTrace, n: usize, cfg: &RamseyConfig) -> Result<f64> {
    let start = n as f64 * cfg.estimate_period();
    let mut acc = 0.0;
    for i in 0..cfg.shots_per_estimate {
        let t0 = start + i as f64 * cfg.cycle_time_s;
        acc += trace.window_mean(t0, t0 + cfg.tau_s)?;
    }
    Ok(acc / cfg.shots_per_estimate as f64)
}

/// First-order estimator standard deviation `1/(2πτ√N)`.
pub fn sampling_sigma(cfg: &RamseyConfig) -> f64 {
    1.0 / (2.0 * PI * cfg.tau_s * (cfg.shots_per_estimate as f64).sqrt())
}

/// Band-limited white spectrum of the estimator noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingNoisePsd {
    /// T/(2π²τ²), Hz²/Hz.
    pub plateau: f64,
    /// 1/(2NT), Hz.
    pub cutoff_hz: f64,
}

impl SamplingNoisePsd {
    pub fn at(&self, f: f64) -> f64 {
        if (0.0..=self.cutoff_hz).contains(&f) {
            self.plateau
        } else {
            0.0
        }
    }
}

pub fn sampling_noise_psd(cfg: &RamseyConfig) -> SamplingNoisePsd {
    SamplingNoisePsd {
        plateau: cfg.cycle_time_s / (2.0 * PI * PI * cfg.tau_s * cfg.tau_s),
        cutoff_hz: cfg.bandwidth_hz(),
    }
}
