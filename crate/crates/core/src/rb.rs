//! Single-qubit randomized benchmarking with quasi-static detuning noise,
//! relaxation and optional interleaved feedback, plus the decoherence
//! limit on the error per gate.

use std::f64::consts::PI;
use std::io::{self, Write};
use std::sync::OnceLock;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{domain, Error, Result};
use crate::feedback::{shot_frequency, Controller, LoopConfig};
use crate::fit::{levenberg_marquardt, LmOptions};
use crate::physics::{synthesize_trace, NoiseModel};
use crate::ramsey::{ramsey_p1, virtual_reset_from, RamseyConfig, ShotRecord};
use crate::seed::{derive_seed, rng_from_seed};

pub const REFERENCE_GATE_TIME_S: f64 = 40e-9;

/// 2×2 complex matrix, row major.
pub type Mat2 = [[Complex64; 2]; 2];

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut c = [[Complex64::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

pub fn dagger(a: &Mat2) -> Mat2 {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

/// `|tr(A†B)|/2`: 1 exactly when `A` and `B` agree up to a global phase.
pub fn phase_overlap(a: &Mat2, b: &Mat2) -> f64 {
    let m = mat_mul(&dagger(a), b);
    (m[0][0] + m[1][1]).norm() / 2.0
}

fn pauli() -> [Mat2; 3] {
    let z = Complex64::new(0.0, 0.0);
    let o = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    [[[z, o], [o, z]], [[z, -i], [i, z]], [[o, z], [z, -o]]]
}

/// Bloch-sphere rotation `R_ij = tr(σ_i U σ_j U†)/2` of a unitary.
pub fn bloch_rotation(u: &Mat2) -> [[f64; 3]; 3] {
    let s = pauli();
    let ud = dagger(u);
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let m = mat_mul(&s[i], &mat_mul(u, &mat_mul(&s[j], &ud)));
            r[i][j] = 0.5 * (m[0][0] + m[1][1]).re;
        }
    }
    r
}

/// The single-qubit Clifford group with its multiplication table.
#[derive(Debug, Clone)]
pub struct CliffordGroup {
    pub elements: Vec<Mat2>,
    /// Bloch rotations of `elements`.
    pub rotations: Vec<[[f64; 3]; 3]>,
    /// `product[a][b]` is the index of `elements[a]·elements[b]`.
    pub product: Vec<Vec<usize>>,
    pub inverse: Vec<usize>,
}

impl CliffordGroup {
    fn generate() -> Self {
        let h = 1.0 / 2f64.sqrt();
        let c = |x: f64| Complex64::new(x, 0.0);
        let hadamard: Mat2 = [[c(h), c(h)], [c(h), c(-h)]];
        let phase: Mat2 = [[c(1.0), c(0.0)], [c(0.0), Complex64::new(0.0, 1.0)]];
        let identity: Mat2 = [[c(1.0), c(0.0)], [c(0.0), c(1.0)]];

        let find = |set: &[Mat2], m: &Mat2| set.iter().position(|e| (phase_overlap(e, m) - 1.0).abs() < 1e-9);
        let mut elements = vec![identity];
        let mut frontier = 0;
        while frontier < elements.len() {
            let e = elements[frontier];
            for g in [&hadamard, &phase] {
                let m = mat_mul(g, &e);
                if find(&elements, &m).is_none() {
                    elements.push(m);
                }
            }
            frontier += 1;
        }
        let n = elements.len();
        let product: Vec<Vec<usize>> = (0..n)
            .map(|a| {
                (0..n)
                    .map(|b| find(&elements, &mat_mul(&elements[a], &elements[b])).expect("group is closed"))
                    .collect()
            })
            .collect();
        let inverse = (0..n).map(|a| (0..n).find(|&b| product[a][b] == 0).expect("inverse exists")).collect();
        let rotations = elements.iter().map(bloch_rotation).collect();
        CliffordGroup { elements, rotations, product, inverse }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Index of the element that undoes `sequence` (applied first to last).
    pub fn recovery(&self, sequence: &[usize]) -> usize {
        let total = sequence.iter().fold(0, |acc, &g| self.product[g][acc]);
        self.inverse[total]
    }
}

/// The shared 24-element group, built on first use. Element 0 is the
/// identity.
pub fn clifford_group() -> &'static CliffordGroup {
    static GROUP: OnceLock<CliffordGroup> = OnceLock::new();
    GROUP.get_or_init(CliffordGroup::generate)
}

/// Qubit state as a Bloch vector; `z = +1` is the ground state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlochState(pub [f64; 3]);

impl BlochState {
    pub fn ground() -> Self {
        BlochState([0.0, 0.0, 1.0])
    }

    pub fn ground_population(&self) -> f64 {
        0.5 * (1.0 + self.0[2])
    }

    pub fn density_matrix(&self) -> Mat2 {
        let [x, y, z] = self.0;
        [
            [Complex64::new(0.5 * (1.0 + z), 0.0), Complex64::new(0.5 * x, -0.5 * y)],
            [Complex64::new(0.5 * x, 0.5 * y), Complex64::new(0.5 * (1.0 - z), 0.0)],
        ]
    }
}

/// Per-gate noise channel applied after each ideal Clifford.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateChannel {
    /// Rotation about z per gate, rad.
    pub phase: f64,
    /// Amplitude-damping probability.
    pub gamma: f64,
    /// Extra coherence factor from pure dephasing.
    pub coherence: f64,
    pub depolarizing: f64,
}

impl GateChannel {
    pub fn new(cfg: &RBConfig, detuning_hz: f64) -> Self {
        let t = cfg.gate_time_s;
        GateChannel {
            phase: 2.0 * PI * detuning_hz * t,
            gamma: 1.0 - (-t / cfg.t1_s).exp(),
            coherence: (-t / cfg.t_phi1_s - (t / cfg.t_phi2_s).powi(2)).exp(),
            depolarizing: cfg.depolarizing_p,
        }
    }

    pub fn apply(&self, clifford: &[[f64; 3]; 3], s: BlochState) -> BlochState {
        let v = s.0;
        let mut w = [0.0; 3];
        for (i, row) in clifford.iter().enumerate() {
            w[i] = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
        let (sn, cs) = self.phase.sin_cos();
        let (x, y) = (cs * w[0] - sn * w[1], sn * w[0] + cs * w[1]);
        let t = (1.0 - self.gamma).sqrt() * self.coherence;
        let keep = 1.0 - self.depolarizing;
        BlochState([
            keep * t * x,
            keep * t * y,
            keep * (self.gamma + (1.0 - self.gamma) * w[2]),
        ])
    }
}

/// Ground-state survival after `sequence` plus its recovery gate.
pub fn sequence_survival(sequence: &[usize], channel: &GateChannel) -> f64 {
    let g = clifford_group();
    let mut s = BlochState::ground();
    for &c in sequence.iter().chain(std::iter::once(&g.recovery(sequence))) {
        s = channel.apply(&g.rotations[c], s);
    }
    s.ground_population()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RBConfig {
    /// Strictly increasing numbers of random Cliffords.
    pub sequence_lengths: Vec<usize>,
    pub n_randomizations: usize,
    pub gate_time_s: f64,
    /// `f64::INFINITY` disables the channel.
    pub t1_s: f64,
    /// Exponential pure dephasing.
    pub t_phi1_s: f64,
    /// Gaussian pure dephasing.
    pub t_phi2_s: f64,
    /// Depolarizing probability per gate.
    pub depolarizing_p: f64,
    pub feedback_on: bool,
    /// Executions of each (length, randomization) point per repetition,
    /// each with its own detuning.
    pub executions_per_point: usize,
    /// Readout and reset after each execution, s.
    pub readout_overhead_s: f64,
    /// Full experiments run back to back with the same sequences.
    pub repetitions: usize,
    pub bootstrap_samples: usize,
}

impl RBConfig {
    pub fn reference(rcfg: &RamseyConfig) -> Self {
        RBConfig {
            sequence_lengths: vec![1, 25, 50, 100, 200, 400, 800],
            n_randomizations: 7,
            gate_time_s: REFERENCE_GATE_TIME_S,
            t1_s: 30e-6,
            t_phi1_s: f64::INFINITY,
            t_phi2_s: f64::INFINITY,
            depolarizing_p: 0.0,
            feedback_on: false,
            executions_per_point: 10,
            readout_overhead_s: rcfg.cycle_time_s - rcfg.tau_s,
            repetitions: 1,
            bootstrap_samples: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_lengths.len() < 3 {
            return Err(Error::Input("at least 3 sequence lengths are needed for the fit".into()));
        }
        if self.sequence_lengths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input("sequence lengths must be strictly increasing".into()));
        }
        if self.n_randomizations == 0 || self.executions_per_point == 0 || self.repetitions == 0 {
            return Err(Error::Input("randomizations, executions and repetitions must be positive".into()));
        }
        if !(self.gate_time_s > 0.0 && self.gate_time_s.is_finite()) {
            return Err(domain("gate time", self.gate_time_s));
        }
        for (what, v) in [("T1", self.t1_s), ("T_phi1", self.t_phi1_s), ("T_phi2", self.t_phi2_s)] {
            if !(v > 0.0) {
                return Err(domain(what, v));
            }
        }
        if !(0.0..=1.0).contains(&self.depolarizing_p) {
            return Err(domain("depolarizing probability", self.depolarizing_p));
        }
        if !(self.readout_overhead_s >= 0.0 && self.readout_overhead_s.is_finite()) {
            return Err(domain("readout overhead", self.readout_overhead_s));
        }
        Ok(())
    }
}

/// Fit of `A·r^m + B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbFit {
    pub a: f64,
    pub r: f64,
    pub b: f64,
    /// `(1 - r)/2`.
    pub error_per_gate: f64,
    /// 68% bootstrap interval of the error per gate.
    pub ci_low: f64,
    pub ci_high: f64,
    pub converged: bool,
}

impl RbFit {
    pub fn ci_width(&self) -> f64 {
        self.ci_high - self.ci_low
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "{{\"error\": {}, \"ci_low\": {}, \"ci_high\": {}, \"r\": {}, \"a\": {}, \"b\": {}, \"converged\": {}}}",
            self.error_per_gate, self.ci_low, self.ci_high, self.r, self.a, self.b, self.converged
        )
    }
}

fn fit_curve(lengths: &[f64], y: &[f64]) -> Result<(f64, f64, f64, bool)> {
    // Start from B = 1/2 and a log-linear estimate of r.
    let b0 = 0.5;
    let first = (y[0] - b0).max(1e-6);
    let last = (y[y.len() - 1] - b0).max(1e-6);
    let span = lengths[lengths.len() - 1] - lengths[0];
    let r0 = ((last / first).ln() / span).exp().clamp(0.5, 1.0 - 1e-9);
    let a0 = first / r0.powf(lengths[0]);
    // r = 1 - exp(q) keeps r below one.
    let res = levenberg_marquardt(
        |p| {
            let r = 1.0 - p[1].exp();
            lengths.iter().zip(y).map(|(m, y)| p[0] * r.powf(*m) + p[2] - y).collect()
        },
        &[a0, (1.0 - r0).ln(), b0],
        LmOptions::default(),
    )?;
    let p = &res.params;
    Ok((p[0], 1.0 - p[1].exp(), p[2], res.converged))
}

fn mean_curve(samples: &[&Vec<f64>]) -> Vec<f64> {
    let n = samples.len() as f64;
    (0..samples[0].len()).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect()
}

/// Fit the mean of `samples` (one survival curve per randomization or per
/// repetition) and bootstrap the 68% interval by resampling them.
pub fn fit_rb(sequence_lengths: &[usize], samples: &[Vec<f64>], bootstrap: usize, seed: u64) -> Result<RbFit> {
    if sequence_lengths.len() < 3 {
        return Err(Error::Input("at least 3 sequence lengths are needed".into()));
    }
    if samples.is_empty() || samples.iter().any(|s| s.len() != sequence_lengths.len()) {
        return Err(Error::Input("every sample needs one survival per sequence length".into()));
    }
    let m: Vec<f64> = sequence_lengths.iter().map(|&m| m as f64).collect();
    let all: Vec<&Vec<f64>> = samples.iter().collect();
    let (a, r, b, converged) = fit_curve(&m, &mean_curve(&all))?;
    if !(r.is_finite() && a.is_finite() && b.is_finite()) {
        return Err(Error::Fit("non-finite decay parameters".into()));
    }
    let error = (1.0 - r) / 2.0;
    let (mut lo, mut hi) = (error, error);
    if bootstrap > 0 && samples.len() > 1 {
        let mut rng = rng_from_seed(seed);
        let mut errs = Vec::with_capacity(bootstrap);
        for _ in 0..bootstrap {
            let pick: Vec<&Vec<f64>> = (0..samples.len()).map(|_| &samples[rng.random_range(0..samples.len())]).collect();
            if let Ok((_, rb, _, _)) = fit_curve(&m, &mean_curve(&pick)) {
                if rb.is_finite() {
                    errs.push((1.0 - rb) / 2.0);
                }
            }
        }
        if errs.is_empty() {
            return Err(Error::Fit("every bootstrap refit failed".into()));
        }
        errs.sort_by(f64::total_cmp);
        let q = |p: f64| errs[((p * (errs.len() - 1) as f64).round() as usize).min(errs.len() - 1)];
        lo = q(0.16);
        hi = q(0.84);
    }
    Ok(RbFit { a, r, b, error_per_gate: error, ci_low: lo, ci_high: hi, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RBResult {
    pub sequence_lengths: Vec<usize>,
    /// The random Cliffords of each randomization; shorter lengths use
    /// prefixes.
    pub sequences: Vec<Vec<usize>>,
    /// `survival[rep][length][randomization]`, each the mean over the
    /// executions of that point.
    pub survival: Vec<Vec<Vec<f64>>>,
    /// Fit over all data; the bootstrap resamples repetitions when there
    /// are several, randomizations otherwise.
    pub fit: RbFit,
    pub saturations: usize,
}

impl RBResult {
    /// Survival averaged over repetitions, per length and randomization.
    pub fn mean_survival(&self) -> Vec<Vec<f64>> {
        let nr = self.survival.len() as f64;
        (0..self.sequence_lengths.len())
            .map(|i| {
                (0..self.sequences.len())
                    .map(|k| self.survival.iter().map(|rep| rep[i][k]).sum::<f64>() / nr)
                    .collect()
            })
            .collect()
    }

    /// Survival curve of each repetition, averaged over randomizations.
    pub fn repetition_curves(&self) -> Vec<Vec<f64>> {
        self.survival
            .iter()
            .map(|rep| rep.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect())
            .collect()
    }

    /// Survival curve of each randomization, averaged over repetitions.
    pub fn randomization_curves(&self) -> Vec<Vec<f64>> {
        let mean = self.mean_survival();
        (0..self.sequences.len()).map(|k| mean.iter().map(|row| row[k]).collect()).collect()
    }

    /// Error per gate fitted separately to each repetition.
    pub fn repetition_errors(&self) -> Result<Vec<f64>> {
        self.survival
            .iter()
            .map(|rep| {
                let curves: Vec<Vec<f64>> =
                    (0..self.sequences.len()).map(|k| rep.iter().map(|row| row[k]).collect()).collect();
                fit_rb(&self.sequence_lengths, &curves, 0, 0).map(|f| f.error_per_gate)
            })
            .collect()
    }

    /// Columns `m, randomization_id, survival` (mean over repetitions).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "m,randomization_id,survival")?;
        for (i, row) in self.mean_survival().iter().enumerate() {
            for (k, s) in row.iter().enumerate() {
                writeln!(w, "{},{},{}", self.sequence_lengths[i], k, s)?;
            }
        }
        Ok(())
    }
}

/// Run the benchmark against one noise realization.
///
/// Every execution is preceded by one loop estimate (`N_S` shots) when
/// `feedback_on`, or by idle time of the same length otherwise, so both
/// settings share a timeline. The detuning of an execution is the mean of
/// `f̃ + p` over the sequence and is held for all of its gates.
pub fn simulate_rb(
    cfg: &RBConfig,
    model: &NoiseModel,
    rcfg: &RamseyConfig,
    lcfg: &LoopConfig,
    seed: u64,
) -> Result<RBResult> {
    cfg.validate()?;
    lcfg.validate_structure(rcfg)?;
    let group = clifford_group();
    let max_m = *cfg.sequence_lengths.last().unwrap_or(&0);
    let mut seq_rng = rng_from_seed(derive_seed(seed, 2));
    let sequences: Vec<Vec<usize>> = (0..cfg.n_randomizations)
        .map(|_| (0..max_m).map(|_| seq_rng.random_range(0..group.len())).collect())
        .collect();

    let est_len = lcfg.update_period(rcfg);
    let exec_len = |m: usize| est_len + (m + 1) as f64 * cfg.gate_time_s + cfg.readout_overhead_s;
    let per_rep: f64 = cfg.sequence_lengths.iter().map(|&m| exec_len(m)).sum::<f64>()
        * (cfg.n_randomizations * cfg.executions_per_point) as f64;
    let duration = per_rep * cfg.repetitions as f64;
    let dt = rcfg.cycle_time_s;
    let noise = model.clone().with_cutoff(model.cutoff_hz.map_or(0.5 / dt, |c| c.min(0.5 / dt)))?;
    let trace = synthesize_trace(&noise, (duration / dt).ceil() as usize + 2, dt, derive_seed(seed, 0))?;
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let mut ctl = Controller::new(lcfg, rcfg)?;
    let stride = lcfg.update_stride;
    let mut raw = Vec::with_capacity(stride);

    // Recovery gates per (randomization, length).
    let recoveries: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| cfg.sequence_lengths.iter().map(|&m| group.recovery(&s[..m])).collect())
        .collect();

    let mut t = 0.0;
    let mut survival = Vec::with_capacity(cfg.repetitions);
    for _ in 0..cfg.repetitions {
        let mut rep = vec![vec![0.0; cfg.n_randomizations]; cfg.sequence_lengths.len()];
        for (k, seq) in sequences.iter().enumerate() {
            for (i, &m) in cfg.sequence_lengths.iter().enumerate() {
                let mut acc = 0.0;
                for _ in 0..cfg.executions_per_point {
                    if cfg.feedback_on {
                        let p = ctl.control();
                        raw.clear();
                        let mut prev = 0u8;
                        for s in 0..stride {
                            let f = shot_frequency(&trace, t + s as f64 * rcfg.cycle_time_s, lcfg, rcfg)?;
                            let u: f64 = rng.random();
                            prev ^= u8::from(u < ramsey_p1(-(f + p), rcfg));
                            raw.push(prev);
                        }
                        for &q in &virtual_reset_from(&ShotRecord { bits: raw.clone() }, 0).bits {
                            ctl.push_shot(q);
                        }
                        ctl.update()?;
                    }
                    t += est_len;
                    let len = (m + 1) as f64 * cfg.gate_time_s;
                    let delta = trace.window_mean(t, t + len)? + ctl.control();
                    let ch = GateChannel::new(cfg, delta);
                    let mut s = BlochState::ground();
                    for &c in seq[..m].iter().chain(std::iter::once(&recoveries[k][i])) {
                        s = ch.apply(&group.rotations[c], s);
                    }
                    acc += s.ground_population();
                    t += len + cfg.readout_overhead_s;
                }
                rep[i][k] = acc / cfg.executions_per_point as f64;
            }
        }
        survival.push(rep);
    }

    let mut result = RBResult {
        sequence_lengths: cfg.sequence_lengths.clone(),
        sequences,
        survival,
        fit: RbFit { a: 0.0, r: 0.0, b: 0.0, error_per_gate: 0.0, ci_low: 0.0, ci_high: 0.0, converged: false },
        saturations: ctl.saturations(),
    };
    let samples = if cfg.repetitions > 1 { result.repetition_curves() } else { result.randomization_curves() };
    result.fit = fit_rb(&cfg.sequence_lengths, &samples, cfg.bootstrap_samples, derive_seed(seed, 3))?;
    Ok(result)
}

/// Decoherence-limited error per gate,
/// `t/(3T1) + t/(3T_φ1) + (t/T_φ2)²/3`. Infinite times contribute nothing.
pub fn coherence_limit(gate_time_s: f64, t1_s: f64, t_phi1_s: f64, t_phi2_s: f64) -> Result<f64> {
    if !(gate_time_s > 0.0 && gate_time_s.is_finite()) {
        return Err(domain("gate time", gate_time_s));
    }
    for (what, v) in [("T1", t1_s), ("T_phi1", t_phi1_s), ("T_phi2", t_phi2_s)] {
        if !(v > 0.0) {
            return Err(domain(what, v));
        }
    }
    let t = gate_time_s;
    Ok(t / (3.0 * t1_s) + t / (3.0 * t_phi1_s) + (t / t_phi2_s).powi(2) / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn rc() -> RamseyConfig {
        RamseyConfig::reference()
    }

    fn quiet(depol: f64, t1: f64) -> RBConfig {
        RBConfig {
            t1_s: t1,
            depolarizing_p: depol,
            executions_per_point: 1,
            ..RBConfig::reference(&rc())
        }
    }

    #[test]
    fn group_structure() {
        let g = clifford_group();
        assert_eq!(g.len(), 24);
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        assert!(phase_overlap(&g.elements[0], &[[one, zero], [zero, one]]) > 1.0 - 1e-12);
        for a in 0..24 {
            assert_eq!(g.product[a][g.inverse[a]], 0);
            assert_eq!(g.product[g.inverse[a]][a], 0);
            for b in 0..24 {
                let m = mat_mul(&g.elements[a], &g.elements[b]);
                assert!((phase_overlap(&m, &g.elements[g.product[a][b]]) - 1.0).abs() < 1e-9);
            }
        }
        // Bloch images are proper rotations.
        for r in &g.rotations {
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert_relative_eq!(det, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_survival_is_one() {
        let c = quiet(0.0, f64::INFINITY);
        let res = simulate_rb(&c, &NoiseModel::silent(), &rc(), &LoopConfig::open(&rc()), 3).unwrap();
        for rep in &res.survival {
            for row in rep {
                for s in row {
                    assert_relative_eq!(*s, 1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn depolarizing_oracle() {
        for p in [2e-4, 1e-3, 4e-3] {
            let mut c = quiet(p, f64::INFINITY);
            c.sequence_lengths = vec![1, 50, 100, 200, 400, 800];
            let res = simulate_rb(&c, &NoiseModel::silent(), &rc(), &LoopConfig::open(&rc()), 4).unwrap();
            assert_relative_eq!(res.fit.error_per_gate, p / 2.0, max_relative = 0.05);
        }
    }

    #[test]
    fn pure_decoherence_matches_limit() {
        for (t1, tphi) in [(30e-6, f64::INFINITY), (26e-6, 200e-6), (60e-6, 40e-6)] {
            let mut c = quiet(0.0, t1);
            c.t_phi1_s = tphi;
            c.n_randomizations = 30;
            c.sequence_lengths = vec![1, 100, 200, 400, 800, 1200, 1600, 2400];
            let eps = coherence_limit(c.gate_time_s, t1, tphi, f64::INFINITY).unwrap();
            assert!((3e-4..=1e-3).contains(&eps));
            let res = simulate_rb(&c, &NoiseModel::silent(), &rc(), &LoopConfig::open(&rc()), 5).unwrap();
            assert_relative_eq!(res.fit.error_per_gate, eps, max_relative = 0.10);
        }
    }

    #[test]
    fn constant_detuning_oscillates() {
        let c = quiet(0.0, f64::INFINITY);
        let ch = GateChannel::new(&c, 100e3);
        let mut rng = rng_from_seed(17);
        let seq: Vec<usize> = (0..300).map(|_| rng.random_range(0..24)).collect();
        let s: Vec<f64> = (0..=300).map(|m| sequence_survival(&seq[..m], &ch)).collect();
        let rise_after_min = (1..300)
            .any(|m| s[m] < s[m - 1] && s[m] < s[m + 1] && s[m + 1..].iter().any(|&x| x > s[m] + 1e-3));
        assert!(rise_after_min);
    }

    #[test]
    fn synthetic_fit() {
        let m = [1usize, 10, 50, 100, 300, 1000, 2000];
        let y: Vec<f64> = m.iter().map(|&m| 0.5 * 0.999f64.powi(m as i32) + 0.5).collect();
        let f = fit_rb(&m, &[y], 0, 0).unwrap();
        assert!(f.converged);
        assert!((f.r - 0.999).abs() < 1e-4);
        assert!(fit_rb(&m[..2], &[vec![1.0, 0.9]], 0, 0).is_err());
    }

    #[test]
    fn bootstrap_is_exchangeable() {
        let mut c = quiet(0.0, 30e-6);
        c.n_randomizations = 12;
        let res = simulate_rb(&c, &NoiseModel::reference(), &rc(), &LoopConfig::open(&rc()), 6).unwrap();
        let mut curves = res.randomization_curves();
        curves.reverse();
        let f = fit_rb(&res.sequence_lengths, &curves, 200, 9).unwrap();
        assert!(f.error_per_gate >= res.fit.ci_low && f.error_per_gate <= res.fit.ci_high);
        assert!(res.fit.ci_low <= res.fit.error_per_gate && res.fit.error_per_gate <= res.fit.ci_high);
    }

    #[test]
    fn coherence_limit_examples() {
        let inf = f64::INFINITY;
        assert_relative_eq!(coherence_limit(40e-9, 30e-6, inf, inf).unwrap(), 4.444_444e-4, max_relative = 1e-6);
        assert_relative_eq!(coherence_limit(40e-9, inf, inf, 4e-6).unwrap(), 3.333_333e-5, max_relative = 1e-6);
        assert_eq!(coherence_limit(40e-9, inf, inf, inf).unwrap(), 0.0);
        assert!(coherence_limit(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(coherence_limit(40e-9, -1.0, inf, inf).is_err());
    }

    #[test]
    fn csv_and_validation() {
        let c = quiet(1e-3, f64::INFINITY);
        let res = simulate_rb(&c, &NoiseModel::silent(), &rc(), &LoopConfig::open(&rc()), 2).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("m,randomization_id,survival\n"));
        assert_eq!(text.lines().count(), 1 + c.sequence_lengths.len() * c.n_randomizations);
        let mut bad = c.clone();
        bad.sequence_lengths = vec![1, 5, 5];
        assert!(bad.validate().is_err());
        bad.sequence_lengths = vec![1, 5];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn feedback_run_is_deterministic() {
        let mut c = quiet(0.0, 30e-6);
        c.feedback_on = true;
        c.sequence_lengths = vec![1, 20, 40];
        c.n_randomizations = 2;
        let a = simulate_rb(&c, &NoiseModel::reference(), &rc(), &LoopConfig::reference(&rc()), 8).unwrap();
        let b = simulate_rb(&c, &NoiseModel::reference(), &rc(), &LoopConfig::reference(&rc()), 8).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn channel_keeps_a_valid_state(
            seq in proptest::collection::vec(0usize..24, 0..60),
            detuning in -1e6f64..1e6,
            t1 in 1e-7f64..1e-3,
            tphi in 1e-7f64..1e-3,
            depol in 0.0f64..0.05,
        ) {
            let c = RBConfig { t1_s: t1, t_phi1_s: tphi, t_phi2_s: tphi, depolarizing_p: depol, ..RBConfig::reference(&rc()) };
            let ch = GateChannel::new(&c, detuning);
            let g = clifford_group();
            let mut s = BlochState::ground();
            for &k in &seq {
                s = ch.apply(&g.rotations[k], s);
                let rho = s.density_matrix();
                prop_assert!(((rho[0][0] + rho[1][1]).re - 1.0).abs() < 1e-9);
                let r = (s.0[0].powi(2) + s.0[1].powi(2) + s.0[2].powi(2)).sqrt();
                // Eigenvalues (1 ± |r|)/2 stay in [0, 1].
                prop_assert!(r <= 1.0 + 1e-9);
            }
        }
    }
}
