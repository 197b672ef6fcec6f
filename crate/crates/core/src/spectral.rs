//! Power spectral density estimation, cross-spectral suppression of
//! uncorrelated noise, and power-law fitting.
//!
//! Estimates are unilateral: bin `k` sits at `k·Δf` for `k = 0..=n/2` and
//! the interior bins carry twice the two-sided density.

use std::io::{self, Write};

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::fit::weighted_line;
use crate::physics::TimeTrace;
use crate::ramsey::{invert_p1, RamseyConfig, ShotRecord};
use crate::special::{digamma, trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Rectangular,
    Hann,
}

impl Window {
    /// Periodic taper of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| {
                    let s = (std::f64::consts::PI * i as f64 / n as f64).sin();
                    s * s
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumEstimate {
    pub frequencies: Vec<f64>,
    pub psd: Vec<f64>,
    /// Bin spacing Δf, Hz.
    pub resolution: f64,
    /// Number of independent periodograms averaged into each bin.
    pub n_averages: usize,
}

impl SpectrumEstimate {
    pub fn len(&self) -> usize {
        self.psd.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psd.is_empty()
    }

    /// `Σ psd·Δf`.
    pub fn total_power(&self) -> f64 {
        self.psd.iter().sum::<f64>() * self.resolution
    }

    /// Mean PSD over bins with `lo <= f < hi`.
    pub fn band_mean(&self, lo: f64, hi: f64) -> Option<f64> {
        let (sum, n) = self
            .frequencies
            .iter()
            .zip(&self.psd)
            .filter(|(f, _)| **f >= lo && **f < hi)
            .fold((0.0, 0usize), |(s, n), (_, p)| (s + p, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Mean of `g(f)` over the same bins [`band_mean`](Self::band_mean)
    /// would use.
    pub fn band_mean_of(&self, lo: f64, hi: f64, g: impl Fn(f64) -> f64) -> Option<f64> {
        let v: Vec<f64> = self.frequencies.iter().copied().filter(|f| *f >= lo && *f < hi).map(g).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "f_hz,psd_hz2_per_hz")?;
        for (f, p) in self.frequencies.iter().zip(&self.psd) {
            writeln!(w, "{f},{p}")?;
        }
        Ok(())
    }
}

fn check_len(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 samples, got {n}")));
    }
    Ok(())
}

fn spectrum_of(segment: &[f64], taper: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> =
        segment.iter().zip(taper).map(|(x, w)| Complex64::new(x * w, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Unilateral scaling of `X·conj(Y)` for one segment.
fn one_sided(xa: &[Complex64], xb: &[Complex64], dt: f64, wpow: f64, out: &mut [f64]) {
    let n = xa.len();
    for (k, o) in out.iter_mut().enumerate() {
        let c = (xa[k] * xb[k].conj()).re * dt / wpow;
        let edge = k == 0 || (n % 2 == 0 && k == n / 2);
        *o += if edge { c } else { 2.0 * c };
    }
}

fn segment_starts(n: usize, n_segments: usize, overlap: f64) -> Result<(usize, Vec<usize>)> {
    if n_segments == 0 {
        return Err(Error::Input("n_segments must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Input(format!("overlap fraction {overlap} outside [0, 1)")));
    }
    let len = (n as f64 / (1.0 + (n_segments - 1) as f64 * (1.0 - overlap))).floor() as usize;
    if len < 2 {
        return Err(Error::Input(format!("{n} samples cannot hold {n_segments} segments")));
    }
    let step = if n_segments == 1 { 0 } else { ((len as f64) * (1.0 - overlap)).floor().max(1.0) as usize };
    let starts: Vec<usize> = (0..n_segments).map(|i| i * step).collect();
    if starts.last().copied().unwrap_or(0) + len > n {
        return Err(Error::Input(format!("{n} samples cannot hold {n_segments} segments")));
    }
    Ok((len, starts))
}

/// Averaged, window-corrected cross periodogram (real part).
pub fn cross_welch(
    a: &TimeTrace,
    b: &TimeTrace,
    n_segments: usize,
    overlap_fraction: f64,
    window: Window,
) -> Result<SpectrumEstimate> {
    if a.len() != b.len() || a.sample_period() != b.sample_period() {
        return Err(Error::Input(format!(
            "traces differ: {} vs {} samples, {} vs {} s",
            a.len(),
            b.len(),
            a.sample_period(),
            b.sample_period()
        )));
    }
    check_len(a.len())?;
    let (len, starts) = segment_starts(a.len(), n_segments, overlap_fraction)?;
    let taper = window.coefficients(len);
    let wpow: f64 = taper.iter().map(|w| w * w).sum();
    let dt = a.sample_period();
    let mut acc = vec![0.0; len / 2 + 1];
    let same = std::ptr::eq(a, b) || a.values() == b.values();
    for &s in &starts {
        let xa = spectrum_of(&a.values()[s..s + len], &taper);
        if same {
            one_sided(&xa, &xa, dt, wpow, &mut acc);
        } else {
            let xb = spectrum_of(&b.values()[s..s + len], &taper);
            one_sided(&xa, &xb, dt, wpow, &mut acc);
        }
    }
    let k = starts.len() as f64;
    let df = 1.0 / (len as f64 * dt);
    Ok(SpectrumEstimate {
        frequencies: (0..acc.len()).map(|i| i as f64 * df).collect(),
        psd: acc.into_iter().map(|p| p / k).collect(),
        resolution: df,
        n_averages: starts.len(),
    })
}

/// Rectangular-window periodogram of the whole trace.
pub fn periodogram(trace: &TimeTrace) -> Result<SpectrumEstimate> {
    cross_welch(trace, trace, 1, 0.0, Window::Rectangular)
}

/// Single-segment periodogram with a taper.
pub fn periodogram_windowed(trace: &TimeTrace, window: Window) -> Result<SpectrumEstimate> {
    cross_welch(trace, trace, 1, 0.0, window)
}

/// Welch estimate with a Hann taper.
pub fn welch(trace: &TimeTrace, n_segments: usize, overlap_fraction: f64) -> Result<SpectrumEstimate> {
    cross_welch(trace, trace, n_segments, overlap_fraction, Window::Hann)
}

pub fn welch_with_window(
    trace: &TimeTrace,
    n_segments: usize,
    overlap_fraction: f64,
    window: Window,
) -> Result<SpectrumEstimate> {
    cross_welch(trace, trace, n_segments, overlap_fraction, window)
}

/// Real part of the cross periodogram of two equally sampled traces.
/// Components common to both survive, independent ones average to zero.
pub fn cross_psd_suppression(a: &TimeTrace, b: &TimeTrace) -> Result<SpectrumEstimate> {
    cross_welch(a, b, 1, 0.0, Window::Rectangular)
}

/// Bin-wise mean of estimates on a common grid.
pub fn average_spectra(estimates: &[SpectrumEstimate]) -> Result<SpectrumEstimate> {
    let first = estimates.first().ok_or_else(|| Error::Input("no spectra to average".into()))?;
    let mut psd = vec![0.0; first.len()];
    let mut n_avg = 0;
    for e in estimates {
        if e.len() != first.len() || e.resolution != first.resolution {
            return Err(Error::Input("spectra on different grids".into()));
        }
        for (a, p) in psd.iter_mut().zip(&e.psd) {
            *a += p;
        }
        n_avg += e.n_averages;
    }
    let k = estimates.len() as f64;
    Ok(SpectrumEstimate {
        frequencies: first.frequencies.clone(),
        psd: psd.into_iter().map(|p| p / k).collect(),
        resolution: first.resolution,
        n_averages: n_avg,
    })
}

/// Two estimate streams built from the even- and odd-indexed shots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTraces {
    pub even: TimeTrace,
    pub odd: TimeTrace,
    /// Set when N was odd and the last shot of every record was dropped.
    pub dropped_last_shot: bool,
}

/// Even/odd shot split with the estimate period taken from `cfg`.
pub fn split_shots_for_cross(records: &[ShotRecord], cfg: &RamseyConfig) -> Result<SplitTraces> {
    split_shots_for_cross_with_period(records, cfg, cfg.estimate_period())
}

pub fn split_shots_for_cross_with_period(
    records: &[ShotRecord],
    cfg: &RamseyConfig,
    sample_period: f64,
) -> Result<SplitTraces> {
    let mut even = Vec::with_capacity(records.len());
    let mut odd = Vec::with_capacity(records.len());
    let mut dropped = false;
    for r in records {
        if r.len() < 2 {
            return Err(Error::Input("records need at least 2 shots to split".into()));
        }
        let usable = r.len() - r.len() % 2;
        dropped |= usable != r.len();
        let half = (usable / 2) as f64;
        let ones = |parity: usize| {
            r.bits[..usable].iter().skip(parity).step_by(2).map(|&b| b as usize).sum::<usize>() as f64
        };
        even.push(invert_p1(ones(0) / half, cfg)?);
        odd.push(invert_p1(ones(1) / half, cfg)?);
    }
    Ok(SplitTraces {
        even: TimeTrace::new(sample_period, even)?,
        odd: TimeTrace::new(sample_period, odd)?,
        dropped_last_shot: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerLawFit {
    pub amplitude_at_1hz: f64,
    pub exponent: f64,
    pub fit_band: (f64, f64),
    /// Weighted RMS of the log residuals in units of their expected spread.
    pub residual: f64,
    /// Log bins used.
    pub n_bins: usize,
    /// Non-positive ordinates skipped.
    pub excluded: usize,
}

impl PowerLawFit {
    pub fn psd(&self, f: f64) -> f64 {
        self.amplitude_at_1hz * f.powf(-self.exponent)
    }
}

/// Log bins per decade used by [`fit_power_law`].
pub const FIT_BINS_PER_DECADE: f64 = 10.0;

/// Fit `A·f^-α` on `band`.
///
/// Ordinates are averaged into bins of equal logarithmic width. The log of
/// each bin mean is corrected for the chi-square bias `ψ(ν) - ln ν`
/// (ν = ordinates × averages) and weighted by `1/ψ'(ν)`. Each bin is placed
/// at the frequency where the current power law equals its mean, which
/// makes the fit unbiased for an exact power law.
pub fn fit_power_law(est: &SpectrumEstimate, band: (f64, f64)) -> Result<PowerLawFit> {
    let (lo, hi) = band;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Input(format!("bad fit band [{lo}, {hi}]")));
    }
    let f_max = est.frequencies.last().copied().unwrap_or(0.0);
    if lo < est.resolution * 0.999 || hi > f_max * 1.001 {
        return Err(Error::Input(format!(
            "fit band [{lo}, {hi}] outside estimate band [{}, {f_max}]",
            est.resolution
        )));
    }
    let mut excluded = 0;
    let points: Vec<(f64, f64)> = est
        .frequencies
        .iter()
        .zip(&est.psd)
        .filter(|(f, _)| **f >= lo && **f <= hi)
        .filter_map(|(&f, &p)| {
            if p > 0.0 && p.is_finite() {
                Some((f, p))
            } else {
                excluded += 1;
                None
            }
        })
        .collect();
    if points.len() < 8 {
        return Err(Error::Fit(format!("only {} usable bins in band", points.len())));
    }
    let width = std::f64::consts::LN_10 / FIT_BINS_PER_DECADE;
    let mut bins: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut current = usize::MAX;
    for &(f, p) in &points {
        let idx = ((f / lo).ln() / width).floor().max(0.0) as usize;
        if idx != current {
            bins.push(Vec::new());
            current = idx;
        }
        bins.last_mut().expect("bin pushed").push((f, p));
    }
    if bins.len() < 3 {
        return Err(Error::Fit(format!("band spans only {} log bins", bins.len())));
    }
    let k = est.n_averages.max(1) as f64;
    let mut y = Vec::with_capacity(bins.len());
    let mut w = Vec::with_capacity(bins.len());
    for b in &bins {
        let nu = b.len() as f64 * k;
        let mean = b.iter().map(|(_, p)| p).sum::<f64>() / b.len() as f64;
        y.push(mean.ln() - (digamma(nu) - nu.ln()));
        w.push(1.0 / trigamma(nu));
    }
    let place = |alpha: f64| -> Vec<f64> {
        bins.iter()
            .map(|b| {
                if alpha.abs() < 1e-9 {
                    b.iter().map(|(f, _)| f.ln()).sum::<f64>() / b.len() as f64
                } else {
                    let m = b.iter().map(|(f, _)| f.powf(-alpha)).sum::<f64>() / b.len() as f64;
                    -m.ln() / alpha
                }
            })
            .collect()
    };
    let mut x = place(0.0);
    let (mut a, mut slope) = weighted_line(&x, &y, &w)?;
    for _ in 0..5 {
        x = place(-slope);
        let (a2, s2) = weighted_line(&x, &y, &w)?;
        let done = (s2 - slope).abs() < 1e-12;
        a = a2;
        slope = s2;
        if done {
            break;
        }
    }
    let chi2: f64 = x.iter().zip(&y).zip(&w).map(|((x, y), w)| w * (y - a - slope * x).powi(2)).sum();
    Ok(PowerLawFit {
        amplitude_at_1hz: a.exp(),
        exponent: -slope,
        fit_band: band,
        residual: (chi2 / bins.len() as f64).sqrt(),
        n_bins: bins.len(),
        excluded,
    })
}

/// Fit `A·f^-α` to a cross spectrum, whose ordinates may be negative.
///
/// Every ordinate in `band` enters its log bin mean; bins with a
/// non-positive mean are dropped and the rest are weighted by their size.
/// There is no chi-square correction, so this is only unbiased once the
/// bin means are well above their scatter.
pub fn fit_power_law_signed(est: &SpectrumEstimate, band: (f64, f64)) -> Result<PowerLawFit> {
    let (lo, hi) = band;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Input(format!("bad fit band [{lo}, {hi}]")));
    }
    let width = std::f64::consts::LN_10 / FIT_BINS_PER_DECADE;
    let mut bins: Vec<(usize, f64, f64, f64)> = Vec::new();
    for (&f, &p) in est.frequencies.iter().zip(&est.psd).filter(|(f, _)| **f >= lo && **f <= hi) {
        let idx = ((f / lo).ln() / width).floor().max(0.0) as usize;
        match bins.last_mut() {
            Some(b) if b.0 == idx => {
                b.1 += f.ln();
                b.2 += p;
                b.3 += 1.0;
            }
            _ => bins.push((idx, f.ln(), p, 1.0)),
        }
    }
    let total = bins.len();
    let (mut x, mut y, mut w) = (Vec::new(), Vec::new(), Vec::new());
    for &(_, lnf, p, n) in &bins {
        if p > 0.0 {
            x.push(lnf / n);
            y.push((p / n).ln());
            w.push(n);
        }
    }
    if x.len() < 3 {
        return Err(Error::Fit(format!("only {} positive log bins in band", x.len())));
    }
    let (a, slope) = weighted_line(&x, &y, &w)?;
    let ss: f64 = x.iter().zip(&y).zip(&w).map(|((x, y), w)| w * (y - a - slope * x).powi(2)).sum();
    Ok(PowerLawFit {
        amplitude_at_1hz: a.exp(),
        exponent: -slope,
        fit_band: band,
        residual: (ss / w.iter().sum::<f64>()).sqrt(),
        n_bins: x.len(),
        excluded: total - x.len(),
    })
}

/// `n` log-spaced band edges from `lo` to `hi`.
pub fn log_edges(lo: f64, hi: f64, n_bands: usize) -> Vec<f64> {
    let r = (hi / lo).ln() / n_bands as f64;
    (0..=n_bands).map(|i| lo * (r * i as f64).exp()).collect()
}

pub fn to_db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}
