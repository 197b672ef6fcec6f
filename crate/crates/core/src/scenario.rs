//! Scenario runner behind the `fluxlock` binary: a flat, unit-suffixed
//! configuration, its validation, and the seven reproducible scenarios.
//!
//! Configuration files are TOML with one table per section (`[noise]`,
//! `[transmon]`, `[ramsey]`, `[loop]`, `[rb]`, `[run]`). Every key has a
//! default, so an empty file is the reference configuration.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::coherence::{
    fit_ramsey, interleaved_envelope, recover_flux_noise, simulate_flux_sweep, simulate_interleaved_ramsey,
    t2_by_section, FluxSweepConfig, InterleavedResult, ProbeConfig,
};
use crate::error::Error;
use crate::feedback::{
    closed_loop_psd, error_signal_psd, run_closed_loop, sampled_intrinsic_psd, transfer_e, transfer_p,
    ArithmeticMode, ClosedLoopRecord, LoopConfig, ShotAveraging,
};
use crate::physics::{NoiseModel, TransmonSpec};
use crate::ramsey::{sampling_noise_psd, RamseyConfig};
use crate::rb::{simulate_rb, RBConfig, RBResult};
use crate::seed::derive_seed;
use crate::spectral::{
    average_spectra, cross_psd_suppression, fit_power_law_signed, periodogram, split_shots_for_cross, SpectrumEstimate,
};

pub const SCENARIOS: [&str; 7] = ["psd", "closed-loop", "transfer", "ramsey", "coherence-sweep", "flux-sweep", "rb"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Float,
    Int,
    Text(&'static [&'static str]),
    FloatList,
    IntList,
}

struct KeySpec {
    key: &'static str,
    kind: Kind,
    default: &'static str,
}

const fn k(key: &'static str, kind: Kind, default: &'static str) -> KeySpec {
    KeySpec { key, kind, default }
}

use Kind::*;

const MODES: &[&str] = &["real", "fixed-point"];
const AVERAGING: &[&str] = &["free-evolution", "full-period"];

#[rustfmt::skip]
const KEYS: &[KeySpec] = &[
    k("noise.amplitude_hz2_per_hz", Float, "27.3e6"),
    k("noise.exponent", Float, "0.8"),
    k("noise.cutoff_khz", Float, "inf"),
    k("noise.line_hz", Float, "60.0"),
    k("noise.line_power_hz2", Float, "0.0"),
    k("noise.line_width_hz", Float, "1.0"),
    k("transmon.f_max_ghz", Float, "4.835"),
    k("transmon.bias_flux_phi0", Float, "0.11"),
    k("ramsey.tau_us", Float, "1.25"),
    k("ramsey.cycle_time_us", Float, "3.5"),
    k("ramsey.shots_per_estimate", Int, "20"),
    k("ramsey.measurement_phase_rad", Float, "1.5707963267948966"),
    k("ramsey.init_fidelity", Float, "1.0"),
    k("loop.gain", Float, "0.35"),
    k("loop.update_stride", Int, "20"),
    k("loop.idle_gap_us", Float, "0.0"),
    k("loop.mode", Text(MODES), "\"real\""),
    k("loop.dac_bits", Int, "16"),
    k("loop.acc_frac_bits", Int, "16"),
    k("loop.dac_full_scale_khz", Float, "800.0"),
    k("loop.averaging", Text(AVERAGING), "\"free-evolution\""),
    k("loop.divergence_limit_khz", Float, "800.0"),
    k("rb.sequence_lengths", IntList, "[1, 100, 200, 400, 800, 1200, 1600, 2400]"),
    k("rb.randomizations", Int, "7"),
    k("rb.gate_time_ns", Float, "40.0"),
    k("rb.t1_us", Float, "30.0"),
    k("rb.t_phi1_us", Float, "inf"),
    k("rb.t_phi2_us", Float, "inf"),
    k("rb.depolarizing_p", Float, "0.0"),
    k("rb.executions_per_point", Int, "10"),
    k("rb.readout_overhead_us", Float, "2.25"),
    k("rb.repetitions", Int, "250"),
    k("rb.bootstrap_samples", Int, "500"),
    k("rb.bias_ghz", Float, "4.44"),
    k("run.seed", Int, "1"),
    k("run.realizations", Int, "8"),
    k("run.estimates", Int, "65536"),
    k("run.transfer_points", Int, "257"),
    k("run.probe_points", Int, "61"),
    k("run.probe_t_max_us", Float, "24.0"),
    k("run.probe_detuning_khz", Float, "400.0"),
    k("run.probe_blocks", Int, "5000"),
    k("run.probe_t1_us", Float, "inf"),
    k("run.sweep_base_blocks", Int, "20"),
    k("run.sweep_doublings", Int, "4"),
    k("run.flux_phi0", FloatList, "[0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2, 0.225, 0.25, 0.275, 0.3]"),
    k("run.sqrt_a_phi_uphi0", Float, "2.8"),
    k("run.flux_points_per_scan", Int, "41"),
    k("run.flux_blocks", Int, "100"),
];

/// A configuration value after type checking.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(f64),
    Int(i64),
    Text(String),
    FloatList(Vec<f64>),
    IntList(Vec<i64>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: Vec<String>| format!("[{}]", v.join(", "));
        match self {
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Text(s) => write!(f, "{s}"),
            Value::FloatList(v) => write!(f, "{}", join(v.iter().map(|x| format!("{x:?}")).collect())),
            Value::IntList(v) => write!(f, "{}", join(v.iter().map(|x| x.to_string()).collect())),
        }
    }
}

fn coerce(kind: Kind, v: &toml::Value) -> Option<Value> {
    let float = |v: &toml::Value| v.as_float().or_else(|| v.as_integer().map(|i| i as f64));
    match kind {
        Float => float(v).map(Value::Float),
        Int => v.as_integer().map(Value::Int),
        Text(allowed) => v.as_str().filter(|s| allowed.contains(s)).map(|s| Value::Text(s.to_string())),
        FloatList => v.as_array()?.iter().map(float).collect::<Option<Vec<_>>>().map(Value::FloatList),
        IntList => v.as_array()?.iter().map(|x| x.as_integer()).collect::<Option<Vec<_>>>().map(Value::IntList),
    }
}

fn describe(kind: Kind) -> String {
    match kind {
        Float => "a number".into(),
        Int => "an integer".into(),
        Text(allowed) => format!("one of {}", allowed.join(", ")),
        FloatList => "a list of numbers".into(),
        IntList => "a list of integers".into(),
    }
}

fn parse_literal(text: &str) -> Option<toml::Value> {
    toml::from_str::<toml::Table>(&format!("v = {text}")).ok()?.remove("v")
}

/// Problems with a configuration, one message per offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Flat `section.key → value` map covering every known key.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, Value>,
}

impl Default for Config {
    fn default() -> Self {
        let values = KEYS
            .iter()
            .map(|s| {
                let v = parse_literal(s.default).and_then(|v| coerce(s.kind, &v));
                (s.key, v.unwrap_or_else(|| panic!("bad default for {}", s.key)))
            })
            .collect();
        Config { values }
    }
}

impl Config {
    /// Defaults overlaid with a TOML document. All unknown keys and type
    /// errors are reported together.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigErrors> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigErrors(vec![e.to_string()]))?;
        let mut cfg = Config::default();
        let mut errors = Vec::new();
        for (section, body) in &table {
            let Some(body) = body.as_table() else {
                errors.push(format!("{section}: expected a [{section}] table"));
                continue;
            };
            for (key, v) in body {
                if let Err(e) = cfg.set_value(&format!("{section}.{key}"), v) {
                    errors.push(e);
                }
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigErrors(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigErrors> {
        let text = fs::read_to_string(path).map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
        Config::from_toml_str(&text)
    }

    fn set_value(&mut self, key: &str, v: &toml::Value) -> Result<(), String> {
        let Some(spec) = KEYS.iter().find(|s| s.key == key) else {
            return Err(format!("{key}: unknown key"));
        };
        let value = coerce(spec.kind, v).ok_or_else(|| format!("{key}: expected {}, got {v}", describe(spec.kind)))?;
        self.values.insert(spec.key, value);
        Ok(())
    }

    /// Apply a `key=value` override. The value is a TOML literal; bare words
    /// are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), String> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| format!("{assignment}: overrides take the form section.key=value"))?;
        let (key, raw) = (key.trim(), raw.trim());
        let v = parse_literal(raw).unwrap_or_else(|| toml::Value::String(raw.to_string()));
        self.set_value(key, &v)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.values.get(key)
    }

    fn f(&self, key: &str) -> f64 {
        match &self.values[key] {
            Value::Float(x) => *x,
            other => panic!("{key} is not a float: {other:?}"),
        }
    }

    fn i(&self, key: &str) -> i64 {
        match &self.values[key] {
            Value::Int(x) => *x,
            other => panic!("{key} is not an integer: {other:?}"),
        }
    }

    fn s(&self, key: &str) -> &str {
        match &self.values[key] {
            Value::Text(x) => x,
            other => panic!("{key} is not text: {other:?}"),
        }
    }

    pub fn seed(&self) -> u64 {
        self.i("run.seed") as u64
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.values.insert("run.seed", Value::Int(seed as i64));
    }

    /// Every key with its resolved value, one `key=value` per line.
    pub fn manifest(&self, scenario: &str) -> String {
        let mut out = format!("scenario={scenario}\nversion={}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    /// Build and check every module configuration without simulating.
    /// With `allow_unstable` the gain may exceed the stability bound.
    pub fn validate(&self, allow_unstable: bool) -> Result<Params, ConfigErrors> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errors.push(msg);
            }
        };

        let count = |key: &str, min: i64| (self.i(key) >= min, format!("{key}: must be at least {min}, got {}", self.i(key)));
        for (key, min) in [
            ("ramsey.shots_per_estimate", 1),
            ("loop.update_stride", 1),
            ("loop.dac_bits", 1),
            ("loop.acc_frac_bits", 0),
            ("rb.randomizations", 1),
            ("rb.executions_per_point", 1),
            ("rb.repetitions", 1),
            ("rb.bootstrap_samples", 0),
            ("run.seed", 0),
            ("run.realizations", 1),
            ("run.estimates", 2),
            ("run.transfer_points", 2),
            ("run.probe_points", 5),
            ("run.probe_blocks", 1),
            ("run.sweep_base_blocks", 1),
            ("run.sweep_doublings", 1),
            ("run.flux_points_per_scan", 7),
            ("run.flux_blocks", 1),
        ] {
            let (ok, msg) = count(key, min);
            check(ok, msg);
        }
        for key in [
            "noise.line_width_hz",
            "noise.cutoff_khz",
            "transmon.f_max_ghz",
            "ramsey.tau_us",
            "ramsey.cycle_time_us",
            "loop.dac_full_scale_khz",
            "loop.divergence_limit_khz",
            "rb.gate_time_ns",
            "rb.t1_us",
            "rb.t_phi1_us",
            "rb.t_phi2_us",
            "rb.bias_ghz",
            "run.probe_t_max_us",
            "run.probe_t1_us",
            "run.sqrt_a_phi_uphi0",
        ] {
            let v = self.f(key);
            check(v > 0.0, format!("{key}: must be positive, got {v}"));
        }
        for key in [
            "noise.amplitude_hz2_per_hz",
            "noise.line_hz",
            "noise.line_power_hz2",
            "loop.gain",
            "loop.idle_gap_us",
            "rb.readout_overhead_us",
            "run.probe_detuning_khz",
        ] {
            let v = self.f(key);
            check(v >= 0.0 && v.is_finite(), format!("{key}: must be finite and non-negative, got {v}"));
        }
        let alpha = self.f("noise.exponent");
        check((0.0..=2.0).contains(&alpha), format!("noise.exponent: must lie in [0, 2], got {alpha}"));
        let (tau, cycle) = (self.f("ramsey.tau_us"), self.f("ramsey.cycle_time_us"));
        check(tau < cycle, format!("ramsey.tau_us ({tau}) must be shorter than ramsey.cycle_time_us ({cycle})"));
        let fid = self.f("ramsey.init_fidelity");
        check((0.0..=1.0).contains(&fid), format!("ramsey.init_fidelity: must lie in [0, 1], got {fid}"));
        let phase = self.f("ramsey.measurement_phase_rad");
        check(phase.is_finite(), format!("ramsey.measurement_phase_rad: must be finite, got {phase}"));
        let gain = self.f("loop.gain");
        if !allow_unstable {
            check(gain < 2.0, format!("loop.gain: {gain} violates the stability bound 0 <= gain < 2"));
        }
        let (n, stride) = (self.i("ramsey.shots_per_estimate"), self.i("loop.update_stride"));
        check(stride >= n, format!("loop.update_stride ({stride}) must be at least ramsey.shots_per_estimate ({n})"));
        check(self.i("loop.dac_bits") <= 40, "loop.dac_bits: at most 40".into());
        check(self.i("loop.acc_frac_bits") <= 20, "loop.acc_frac_bits: at most 20".into());
        let p = self.f("rb.depolarizing_p");
        check((0.0..=1.0).contains(&p), format!("rb.depolarizing_p: must lie in [0, 1], got {p}"));
        let Value::IntList(lengths) = &self.values["rb.sequence_lengths"] else { unreachable!() };
        check(lengths.len() >= 3, "rb.sequence_lengths: at least 3 lengths are needed for the fit".into());
        check(
            lengths.first().is_some_and(|&m| m >= 0) && lengths.windows(2).all(|w| w[1] > w[0]),
            "rb.sequence_lengths: must be non-negative and strictly increasing".into(),
        );
        let f_max = self.f("transmon.f_max_ghz");
        let bias = self.f("transmon.bias_flux_phi0");
        check(bias > 0.0 && bias < 0.5, format!("transmon.bias_flux_phi0: must lie in (0, 0.5), got {bias}"));
        let rb_bias = self.f("rb.bias_ghz");
        check(rb_bias < f_max, format!("rb.bias_ghz ({rb_bias}) must lie below transmon.f_max_ghz ({f_max})"));
        let Value::FloatList(phis) = &self.values["run.flux_phi0"] else { unreachable!() };
        check(phis.len() >= 3, "run.flux_phi0: at least 3 bias points are needed".into());
        check(
            phis.iter().all(|&p| p > 0.0 && p < 0.5),
            "run.flux_phi0: every bias must lie in (0, 0.5) so the sensitivity is non-zero".into(),
        );
        if !errors.is_empty() {
            return Err(ConfigErrors(errors));
        }
        self.build().map_err(|e| ConfigErrors(vec![e.to_string()]))
    }

    fn build(&self) -> crate::Result<Params> {
        let mut noise = NoiseModel::new(self.f("noise.amplitude_hz2_per_hz"), self.f("noise.exponent"))?;
        noise.line_width_hz = self.f("noise.line_width_hz");
        if self.f("noise.line_power_hz2") > 0.0 {
            noise = noise.with_line(self.f("noise.line_hz"), self.f("noise.line_power_hz2"))?;
        }
        let cutoff = self.f("noise.cutoff_khz");
        if cutoff.is_finite() {
            noise = noise.with_cutoff(decimal(cutoff, 3))?;
        }
        let transmon = TransmonSpec::new(decimal(self.f("transmon.f_max_ghz"), 9))?;
        let ramsey = RamseyConfig {
            tau_s: decimal(self.f("ramsey.tau_us"), -6),
            cycle_time_s: decimal(self.f("ramsey.cycle_time_us"), -6),
            shots_per_estimate: self.i("ramsey.shots_per_estimate") as usize,
            measurement_phase: self.f("ramsey.measurement_phase_rad"),
            init_fidelity: self.f("ramsey.init_fidelity"),
        };
        let feedback = LoopConfig {
            gain: self.f("loop.gain"),
            update_stride: self.i("loop.update_stride") as usize,
            mode: if self.s("loop.mode") == "real" { ArithmeticMode::Real } else { ArithmeticMode::FixedPoint },
            dac_full_scale_hz: decimal(self.f("loop.dac_full_scale_khz"), 3),
            dac_bits: self.i("loop.dac_bits") as u32,
            acc_frac_bits: self.i("loop.acc_frac_bits") as u32,
            idle_gap_s: decimal(self.f("loop.idle_gap_us"), -6),
            averaging: if self.s("loop.averaging") == "free-evolution" {
                ShotAveraging::FreeEvolution
            } else {
                ShotAveraging::FullPeriod
            },
            divergence_limit_hz: Some(decimal(self.f("loop.divergence_limit_khz"), 3)),
        };
        feedback.validate_structure(&ramsey)?;
        let Value::IntList(lengths) = &self.values["rb.sequence_lengths"] else { unreachable!() };
        let rb = RBConfig {
            sequence_lengths: lengths.iter().map(|&m| m as usize).collect(),
            n_randomizations: self.i("rb.randomizations") as usize,
            gate_time_s: decimal(self.f("rb.gate_time_ns"), -9),
            t1_s: decimal(self.f("rb.t1_us"), -6),
            t_phi1_s: decimal(self.f("rb.t_phi1_us"), -6),
            t_phi2_s: decimal(self.f("rb.t_phi2_us"), -6),
            depolarizing_p: self.f("rb.depolarizing_p"),
            feedback_on: false,
            executions_per_point: self.i("rb.executions_per_point") as usize,
            readout_overhead_s: decimal(self.f("rb.readout_overhead_us"), -6),
            repetitions: self.i("rb.repetitions") as usize,
            bootstrap_samples: self.i("rb.bootstrap_samples") as usize,
        };
        rb.validate()?;
        let bias = self.f("transmon.bias_flux_phi0");
        let rb_phi = transmon.flux_for_frequency(decimal(self.f("rb.bias_ghz"), 9))?;
        let rb_noise = noise.scaled(transmon.sensitivity_ratio_sq(bias, rb_phi)?)?;
        let Value::FloatList(phis) = &self.values["run.flux_phi0"] else { unreachable!() };
        let probe_t1 = self.f("run.probe_t1_us");
        Ok(Params {
            noise,
            rb_noise,
            transmon,
            ramsey,
            feedback,
            rb,
            seed: self.seed(),
            realizations: self.i("run.realizations") as usize,
            estimates: self.i("run.estimates") as usize,
            transfer_points: self.i("run.transfer_points") as usize,
            probe_points: self.i("run.probe_points") as usize,
            probe_t_max_s: decimal(self.f("run.probe_t_max_us"), -6),
            probe_detuning_hz: decimal(self.f("run.probe_detuning_khz"), 3),
            probe_blocks: self.i("run.probe_blocks") as usize,
            probe_t1_s: probe_t1.is_finite().then_some(decimal(probe_t1, -6)),
            sweep_base_blocks: self.i("run.sweep_base_blocks") as usize,
            sweep_doublings: self.i("run.sweep_doublings") as usize,
            flux: FluxSweepConfig {
                phis: phis.clone(),
                sqrt_a_phi: decimal(self.f("run.sqrt_a_phi_uphi0"), -6),
                points_per_scan: self.i("run.flux_points_per_scan") as usize,
                n_blocks: self.i("run.flux_blocks") as usize,
                t1_s: probe_t1.is_finite().then_some(decimal(probe_t1, -6)),
            },
        })
    }
}

/// `x·10^exp` rounded as the literal `xe{exp}` would be, so `1.25` µs
/// becomes exactly `1.25e-6` s.
fn decimal(x: f64, exp: i32) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    let text = format!("{x:e}");
    let (mantissa, e) = text.split_once('e').expect("exponent form");
    let e: i32 = e.parse().expect("integer exponent");
    format!("{mantissa}e{}", e + exp).parse().expect("valid float")
}

/// Validated module parameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Intrinsic noise at `transmon.bias_flux_phi0`.
    pub noise: NoiseModel,
    /// The same flux noise seen at the benchmarking bias.
    pub rb_noise: NoiseModel,
    pub transmon: TransmonSpec,
    pub ramsey: RamseyConfig,
    pub feedback: LoopConfig,
    pub rb: RBConfig,
    pub seed: u64,
    pub realizations: usize,
    pub estimates: usize,
    pub transfer_points: usize,
    pub probe_points: usize,
    pub probe_t_max_s: f64,
    pub probe_detuning_hz: f64,
    pub probe_blocks: usize,
    pub probe_t1_s: Option<f64>,
    pub sweep_base_blocks: usize,
    pub sweep_doublings: usize,
    pub flux: FluxSweepConfig,
}

impl Params {
    fn open_loop(&self) -> LoopConfig {
        LoopConfig { gain: 0.0, ..self.feedback }
    }

    fn probe(&self, n_blocks: usize) -> ProbeConfig {
        let mut p = ProbeConfig::linear(self.probe_t_max_s, self.probe_points, self.probe_detuning_hz, n_blocks, &self.ramsey);
        p.t1_s = self.probe_t1_s;
        p
    }
}

#[derive(Debug)]
pub enum RunError {
    Usage(String),
    Config(ConfigErrors),
    Diverged(Error),
    Sim(Error),
    Io(io::Error),
}

impl RunError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 2,
            RunError::Config(_) => 3,
            RunError::Diverged(_) => 4,
            RunError::Sim(_) | RunError::Io(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Usage(m) => write!(f, "usage error: {m}"),
            RunError::Config(e) => write!(f, "invalid configuration:\n{e}"),
            RunError::Diverged(e) => write!(f, "numerical divergence: {e}"),
            RunError::Sim(e) => write!(f, "simulation failed: {e}"),
            RunError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } => RunError::Diverged(e),
            other => RunError::Sim(other),
        }
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e)
    }
}

impl From<ConfigErrors> for RunError {
    fn from(e: ConfigErrors) -> Self {
        RunError::Config(e)
    }
}

/// One scenario invocation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub config: Config,
    pub output_dir: PathBuf,
    /// Worker threads; `0` lets rayon decide. Outputs never depend on it.
    pub workers: usize,
    pub allow_unstable: bool,
}

impl Scenario {
    /// Validate, simulate and write every output file plus `manifest.txt`.
    /// Returns the paths written, in order.
    pub fn run(&self) -> Result<Vec<PathBuf>, RunError> {
        if !SCENARIOS.contains(&self.name.as_str()) {
            return Err(RunError::Usage(format!(
                "unknown scenario '{}'; expected one of {}",
                self.name,
                SCENARIOS.join(", ")
            )));
        }
        let params = self.config.validate(self.allow_unstable)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| RunError::Usage(format!("cannot start worker pool: {e}")))?;
        let outputs = pool.install(|| compute(&self.name, &params))?;
        fs::create_dir_all(&self.output_dir)?;
        let mut written = Vec::with_capacity(outputs.len() + 1);
        for (name, body) in outputs.iter().chain(std::iter::once(&("manifest.txt".to_string(), self.config.manifest(&self.name).into_bytes()))) {
            let path = self.output_dir.join(name);
            let mut w = BufWriter::new(File::create(&path)?);
            w.write_all(body)?;
            w.flush()?;
            written.push(path);
        }
        Ok(written)
    }
}

type Outputs = Vec<(String, Vec<u8>)>;

fn render(f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn compute(name: &str, p: &Params) -> Result<Outputs, RunError> {
    match name {
        "psd" => psd(p),
        "closed-loop" => closed_loop(p),
        "transfer" => transfer(p),
        "ramsey" => ramsey(p),
        "coherence-sweep" => coherence_sweep(p),
        "flux-sweep" => flux_sweep(p),
        "rb" => rb(p),
        other => Err(RunError::Usage(format!("unknown scenario '{other}'"))),
    }
}

/// Realizations `0..R` of a loop with seeds `derive_seed(seed, i)`.
fn realizations(p: &Params, lcfg: &LoopConfig) -> Result<Vec<ClosedLoopRecord>, RunError> {
    let runs: Vec<_> = (0..p.realizations)
        .into_par_iter()
        .map(|i| run_closed_loop(&p.noise, &p.ramsey, lcfg, p.estimates, derive_seed(p.seed, i as u64)))
        .collect();
    runs.into_iter().map(|r| r.map_err(RunError::from)).collect()
}

fn averaged(traces: impl Iterator<Item = crate::Result<SpectrumEstimate>>) -> Result<SpectrumEstimate, RunError> {
    let specs = traces.collect::<crate::Result<Vec<_>>>()?;
    Ok(average_spectra(&specs)?)
}

fn psd(p: &Params) -> Result<Outputs, RunError> {
    let runs = realizations(p, &p.open_loop())?;
    let open = averaged(runs.iter().map(|r| periodogram(&r.error_signal)))?;
    let cross = averaged(runs.iter().map(|r| {
        let split = split_shots_for_cross(&r.shots, &p.ramsey)?;
        cross_psd_suppression(&split.even, &split.odd)
    }))?;
    let band = (10.0 * cross.resolution, 0.5 * cross.frequencies.last().copied().unwrap_or(0.0));
    let fit = fit_power_law_signed(&cross, band)?;
    let plateau = sampling_noise_psd(&p.ramsey);
    let summary = format!(
        "amplitude_hz2_per_hz={}\nexponent={}\nfit_band_lo_hz={}\nfit_band_hi_hz={}\nplateau_hz2_per_hz={}\nplateau_cutoff_hz={}\n",
        fit.amplitude_at_1hz, fit.exponent, fit.fit_band.0, fit.fit_band.1, plateau.plateau, plateau.cutoff_hz
    );
    Ok(vec![
        ("psd_open.csv".into(), render(|w| open.write_csv(w))),
        ("psd_suppressed.csv".into(), render(|w| cross.write_csv(w))),
        ("psd_fit.txt".into(), summary.into_bytes()),
    ])
}

fn analytic_csv(freqs: &[f64], g: impl Fn(f64) -> crate::Result<f64>) -> Result<Vec<u8>, RunError> {
    let mut rows = String::from("f_hz,psd_hz2_per_hz\n");
    for &f in freqs.iter().filter(|&&f| f > 0.0) {
        rows.push_str(&format!("{},{}\n", f, g(f)?));
    }
    Ok(rows.into_bytes())
}

fn closed_loop(p: &Params) -> Result<Outputs, RunError> {
    let runs = realizations(p, &p.feedback)?;
    let truth = averaged(runs.iter().map(|r| periodogram(&r.true_frequency)))?;
    let intrinsic = averaged(runs.iter().map(|r| periodogram(&r.intrinsic_frequency)))?;
    let error = averaged(runs.iter().map(|r| periodogram(&r.error_signal)))?;
    let s_open = |f: f64| sampled_intrinsic_psd(&p.noise, &p.ramsey, &p.feedback, f).unwrap_or(0.0);
    let est = sampling_noise_psd(&p.ramsey);
    let s_est = |f: f64| est.at(f);
    let truth_model = analytic_csv(&truth.frequencies, |f| closed_loop_psd(s_open, s_est, &p.feedback, &p.ramsey, f))?;
    let error_model = analytic_csv(&error.frequencies, |f| error_signal_psd(s_open, s_est, &p.feedback, &p.ramsey, f))?;
    let saturations: usize = runs.iter().map(|r| r.saturations).sum();
    Ok(vec![
        ("closed_loop.csv".into(), render(|w| runs[0].write_csv(w))),
        ("psd_closed_mc.csv".into(), render(|w| truth.write_csv(w))),
        ("psd_closed_analytic.csv".into(), truth_model),
        ("psd_open_mc.csv".into(), render(|w| intrinsic.write_csv(w))),
        ("psd_error_mc.csv".into(), render(|w| error.write_csv(w))),
        ("psd_error_analytic.csv".into(), error_model),
        ("closed_loop_summary.txt".into(), format!("realizations={}\nsaturations={saturations}\n", runs.len()).into_bytes()),
    ])
}

fn transfer(p: &Params) -> Result<Outputs, RunError> {
    let nyq = p.feedback.nyquist_hz(&p.ramsey);
    let mut rows = String::from("f_hz,hp_mag,hp_phase_rad,he_mag,he_phase_rad\n");
    for i in 0..p.transfer_points {
        let f = nyq * i as f64 / (p.transfer_points - 1) as f64;
        let hp = transfer_p(f, &p.feedback, &p.ramsey)?;
        let he = transfer_e(f, &p.feedback, &p.ramsey)?;
        rows.push_str(&format!("{},{},{},{},{}\n", f, hp.norm(), hp.arg(), he.norm(), he.arg()));
    }
    Ok(vec![("transfer.csv".into(), rows.into_bytes())])
}

/// Open- and closed-loop interleaved runs sharing one noise realization.
fn interleaved_pair(p: &Params, blocks: usize) -> Result<(InterleavedResult, InterleavedResult), RunError> {
    let probe = p.probe(blocks);
    let open = p.open_loop();
    let (a, b) = rayon::join(
        || simulate_interleaved_ramsey(&p.noise, &p.ramsey, &open, &probe, p.seed),
        || simulate_interleaved_ramsey(&p.noise, &p.ramsey, &p.feedback, &probe, p.seed),
    );
    Ok((a?, b?))
}

fn ramsey(p: &Params) -> Result<Outputs, RunError> {
    let (open_res, closed_res) = interleaved_pair(p, p.probe_blocks)?;
    let probe = p.probe(p.probe_blocks);
    let mut out = Vec::new();
    let mut summary = String::new();
    for (label, res, lcfg) in [("open", &open_res, p.open_loop()), ("closed", &closed_res, p.feedback)] {
        let fit = fit_ramsey(&res.tau_r, &res.p1_mean, p.probe_detuning_hz)?;
        let model = interleaved_envelope(&p.noise, &p.ramsey, &lcfg, &probe, 1.0 / res.duration_s)?;
        let mut env = String::from("t_s,chi,chi_model\n");
        for j in 0..res.tau_r.len() {
            env.push_str(&format!("{},{},{}\n", res.tau_r[j], res.envelope[j], model[j]));
        }
        summary.push_str(&format!("t2_{label}_s={}\n", fit.t2));
        out.push((format!("ramsey_{label}.csv"), render(|w| res.write_csv(w))));
        out.push((format!("envelope_{label}.csv"), env.into_bytes()));
    }
    summary.push_str(&format!("duration_s={}\nlower_cutoff_hz={}\n", open_res.duration_s, 1.0 / open_res.duration_s));
    out.push(("ramsey_summary.txt".into(), summary.into_bytes()));
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn coherence_sweep(p: &Params) -> Result<Outputs, RunError> {
    let longest = p.sweep_base_blocks << p.sweep_doublings;
    let blocks = p.probe_blocks.max(longest);
    let (open, closed) = interleaved_pair(p, blocks)?;
    let mut rows = String::from("blocks_per_section,section_duration_s,sections,t2_open_s,t2_closed_s\n");
    for d in 0..=p.sweep_doublings {
        let k = p.sweep_base_blocks << d;
        let t_open = t2_by_section(&open, k, p.probe_detuning_hz)?;
        let t_closed = t2_by_section(&closed, k, p.probe_detuning_hz)?;
        rows.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            k as f64 * open.block_duration_s,
            t_open.len(),
            mean(&t_open),
            mean(&t_closed)
        ));
    }
    Ok(vec![("coherence_sweep.csv".into(), rows.into_bytes())])
}

fn flux_sweep(p: &Params) -> Result<Outputs, RunError> {
    let points = simulate_flux_sweep(&p.transmon, &p.flux, &p.ramsey, p.seed)?;
    let mut rows = String::from("phi_phi0,sensitivity_hz_per_phi0,t2_s,gamma_phi_per_s,duration_s\n");
    for pt in &points {
        rows.push_str(&format!("{},{},{},{},{}\n", pt.phi, pt.sensitivity, pt.t2, pt.gamma_phi, pt.duration_s));
    }
    let (fit, amp) = recover_flux_noise(&points)?;
    let summary = format!(
        "k_phi0={}\nr_squared={}\neta={}\nsqrt_a_phi_recovered_phi0={}\nsqrt_a_phi_injected_phi0={}\n",
        fit.k, fit.r_squared, amp.eta, amp.sqrt_a_phi, p.flux.sqrt_a_phi
    );
    Ok(vec![("flux_sweep.csv".into(), rows.into_bytes()), ("flux_fit.txt".into(), summary.into_bytes())])
}

fn rb(p: &Params) -> Result<Outputs, RunError> {
    let run = |on: bool| {
        let cfg = RBConfig { feedback_on: on, ..p.rb.clone() };
        simulate_rb(&cfg, &p.rb_noise, &p.ramsey, &p.feedback, p.seed)
    };
    let (off, on) = rayon::join(|| run(false), || run(true));
    let (off, on): (RBResult, RBResult) = (off?, on?);
    let (e_off, e_on) = rayon::join(|| off.repetition_errors(), || on.repetition_errors());
    let (e_off, e_on) = (e_off?, e_on?);
    let mut reps = String::from("repetition,error_off,error_on\n");
    for (i, (a, b)) in e_off.iter().zip(&e_on).enumerate() {
        reps.push_str(&format!("{i},{a},{b}\n"));
    }
    Ok(vec![
        ("rb_off.csv".into(), render(|w| off.write_csv(w))),
        ("rb_on.csv".into(), render(|w| on.write_csv(w))),
        ("rb_fit_off.txt".into(), render(|w| off.fit.write_summary(w))),
        ("rb_fit_on.txt".into(), render(|w| on.fit.write_summary(w))),
        ("rb_repetitions.csv".into(), reps.into_bytes()),
    ])
}
