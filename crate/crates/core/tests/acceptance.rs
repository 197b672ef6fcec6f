//! Acceptance run: one line per criterion, non-zero exit if any fails.
//!
//! `cargo test -p fluxlock --test acceptance` (add `--release` for speed).

use std::f64::consts::PI;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use fluxlock::coherence::{
    fit_ramsey, flux_noise_amplitude, interleaved_envelope, recover_flux_noise, simulate_flux_sweep,
    simulate_interleaved_ramsey, t2_by_section, FluxSweepConfig, InterleavedResult, ProbeConfig,
};
use fluxlock::feedback::{
    closed_loop_psd, error_signal_psd, run_closed_loop, sampled_intrinsic_psd, transfer_e, transfer_p, LoopConfig,
};
use fluxlock::physics::{synthesize_trace, NoiseModel, TransmonSpec, REFERENCE_BIAS_FLUX};
use fluxlock::ramsey::{sampling_noise_psd, RamseyConfig};
use fluxlock::rb::{coherence_limit, simulate_rb, RBConfig};
use fluxlock::seed::derive_seed;
use fluxlock::spectral::{
    average_spectra, cross_psd_suppression, fit_power_law, log_edges, periodogram, split_shots_for_cross, to_db,
    SpectrumEstimate,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Worst band deviation in dB of `est` against `model` over log bands.
fn worst_band_db(est: &SpectrumEstimate, model: impl Fn(f64) -> f64, edges: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, w) in edges.windows(2).enumerate() {
        let hi = if i + 2 == edges.len() { w[1] * 1.0001 } else { w[1] };
        if let (Some(a), Some(b)) = (est.band_mean(w[0], hi), est.band_mean_of(w[0], hi, &model)) {
            let d = to_db(a / b);
            if d.abs() > worst.abs() {
                worst = d;
            }
        }
    }
    worst
}

fn average<T>(items: &[T], f: impl Fn(&T) -> fluxlock::Result<SpectrumEstimate>) -> SpectrumEstimate {
    let specs: Vec<_> = items.iter().map(|x| f(x).unwrap()).collect();
    average_spectra(&specs).unwrap()
}

fn criterion_1() -> Outcome {
    let r = RamseyConfig::reference();
    let l = LoopConfig::reference(&r);
    let nyq = l.nyquist_hz(&r);
    let hp0 = transfer_p(0.0, &l, &r).unwrap().norm();
    let he0 = transfer_e(0.0, &l, &r).unwrap().norm();
    let hpn = transfer_p(nyq, &l, &r).unwrap().norm();
    let exact = hp0 == 1.0 && he0 == 0.0 && (hpn - 0.35 / 1.65).abs() < 1e-9;

    let model = NoiseModel::reference();
    let runs: Vec<_> = (0..100).map(|i| run_closed_loop(&model, &r, &l, 4096, derive_seed(100, i)).unwrap()).collect();
    let mc = average(&runs, |rec| periodogram(&rec.error_signal));
    let est = sampling_noise_psd(&r);
    let theory = |f: f64| {
        error_signal_psd(|f| sampled_intrinsic_psd(&model, &r, &l, f).unwrap(), |f| est.at(f), &l, &r, f).unwrap()
    };
    let worst = worst_band_db(&mc, theory, &log_edges(10.0 * mc.resolution, nyq, 10));
    check(
        exact && worst.abs() <= 1.5,
        format!("|Hp(0)|={hp0} |He(0)|={he0} |Hp(fN)|={hpn:.12}; error PSD worst band {worst:+.2} dB over 100 runs"),
    )
}

fn criterion_2() -> Outcome {
    let r = RamseyConfig::reference();
    let l = LoopConfig::open(&r);
    let runs: Vec<_> =
        (0..8).map(|i| run_closed_loop(&NoiseModel::silent(), &r, &l, 65536, derive_seed(200, i)).unwrap()).collect();
    let mc = average(&runs, |rec| periodogram(&rec.error_signal));
    let plateau = r.cycle_time_s / (2.0 * PI * PI * r.tau_s * r.tau_s);
    let f_n = *mc.frequencies.last().unwrap();
    let level = mc.band_mean(1e3, f_n * 1.0001).unwrap();
    let dev = level / plateau - 1.0;
    let cutoff = sampling_noise_psd(&r).cutoff_hz;
    check(
        dev.abs() <= 0.10 && (cutoff - 7142.857).abs() < 1.0 && (f_n - cutoff).abs() < 1e-6 * cutoff,
        format!("plateau {level:.4e} vs {plateau:.4e} Hz²/Hz ({:+.1}%), cutoff {cutoff:.1} Hz", 100.0 * dev),
    )
}

fn criterion_3() -> Outcome {
    let r = RamseyConfig::reference();
    let l = LoopConfig::open(&r);
    let model = NoiseModel::reference();
    let runs: Vec<_> = (0..8).map(|i| run_closed_loop(&model, &r, &l, 65536, derive_seed(300, i)).unwrap()).collect();
    let plain = average(&runs, |rec| periodogram(&rec.error_signal));
    let cross = average(&runs, |rec| {
        let s = split_shots_for_cross(&rec.shots, &r)?;
        cross_psd_suppression(&s.even, &s.odd)
    });
    let f_n = *cross.frequencies.last().unwrap();
    let law = |f: f64| model.continuum_psd(f);
    let worst = worst_band_db(&cross, law, &log_edges(1.0, f_n, 12));
    let excess = to_db(plain.band_mean(500.0, f_n * 1.0001).unwrap() / plain.band_mean_of(500.0, f_n * 1.0001, law).unwrap());
    check(
        worst.abs() <= 1.5 && excess > 3.0,
        format!("cross-PSD worst band {worst:+.2} dB (1 Hz..{f_n:.0} Hz); periodogram above 500 Hz {excess:+.2} dB"),
    )
}

fn criterion_4() -> Outcome {
    let model = NoiseModel::reference();
    let dt = 70e-6;
    let n = 1 << 20;
    let (mut worst_a, mut worst_alpha) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let trace = synthesize_trace(&model, n, dt, derive_seed(400, seed)).unwrap();
        let est = periodogram(&trace).unwrap();
        let fit = fit_power_law(&est, (10.0 * est.resolution, 0.5 / dt)).unwrap();
        worst_a = worst_a.max((fit.amplitude_at_1hz / 27.3e6 - 1.0).abs());
        worst_alpha = worst_alpha.max((fit.exponent - 0.8).abs());
    }
    check(
        worst_a <= 0.05 && worst_alpha <= 0.03,
        format!("20 seeds, 2^20 samples: worst |ΔA|/A {:.2}%, worst |Δα| {worst_alpha:.4}", 100.0 * worst_a),
    )
}

fn criterion_5() -> Outcome {
    let r = RamseyConfig::reference();
    let l = LoopConfig::reference(&r);
    let model = NoiseModel::reference();
    let runs: Vec<_> = (0..8).map(|i| run_closed_loop(&model, &r, &l, 65536, derive_seed(500, i)).unwrap()).collect();
    let closed = average(&runs, |rec| periodogram(&rec.true_frequency));
    let open = average(&runs, |rec| periodogram(&rec.intrinsic_frequency));
    let lo = 0.5 * closed.resolution;
    let suppression = to_db(open.band_mean(lo, 10.0).unwrap() / closed.band_mean(lo, 10.0).unwrap());
    let est = sampling_noise_psd(&r);
    let theory = |f: f64| {
        closed_loop_psd(|f| sampled_intrinsic_psd(&model, &r, &l, f).unwrap(), |f| est.at(f), &l, &r, f).unwrap()
    };
    let f_n = *closed.frequencies.last().unwrap();
    // Bands start at ten bins so each average has enough degrees of freedom.
    let worst = worst_band_db(&closed, theory, &log_edges(10.0 * closed.resolution, f_n, 10));
    check(
        suppression >= 15.0 && worst.abs() <= 2.0,
        format!("suppression below 10 Hz {suppression:.1} dB; analytic vs MC worst band {worst:+.2} dB"),
    )
}

/// Open and closed interleaved runs for seeds 1..=4 at 5000 blocks.
fn interleaved_runs() -> (ProbeConfig, Vec<(InterleavedResult, InterleavedResult)>) {
    let r = RamseyConfig::reference();
    let probe = ProbeConfig::linear(24e-6, 61, 400e3, 5000, &r);
    let model = NoiseModel::reference();
    let runs = (1..=4)
        .map(|seed| {
            let a = simulate_interleaved_ramsey(&model, &r, &LoopConfig::open(&r), &probe, seed).unwrap();
            let b = simulate_interleaved_ramsey(&model, &r, &LoopConfig::reference(&r), &probe, seed).unwrap();
            (a, b)
        })
        .collect();
    (probe, runs)
}

fn criterion_6(probe: &ProbeConfig, runs: &[(InterleavedResult, InterleavedResult)]) -> Outcome {
    let r = RamseyConfig::reference();
    let model = NoiseModel::reference();
    let t2 = |res: &InterleavedResult| fit_ramsey(&res.tau_r, &res.p1_mean, probe.set_detuning_hz).unwrap().t2;
    let ratios: Vec<f64> = runs.iter().map(|(a, b)| t2(b) / t2(a)).collect();
    let ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let t2_open = runs.iter().map(|(a, _)| t2(a)).sum::<f64>() / runs.len() as f64;
    let t2_closed = runs.iter().map(|(_, b)| t2(b)).sum::<f64>() / runs.len() as f64;

    let f0 = 1.0 / runs[0].0.duration_s;
    let mut worst: f64 = 0.0;
    for (k, lcfg) in [LoopConfig::open(&r), LoopConfig::reference(&r)].iter().enumerate() {
        let predicted = interleaved_envelope(&model, &r, lcfg, probe, f0).unwrap();
        for j in 0..predicted.len() {
            let sim = runs.iter().map(|p| if k == 0 { p.0.envelope[j] } else { p.1.envelope[j] }).sum::<f64>()
                / runs.len() as f64;
            if predicted[j] > 0.2 {
                let d = sim / predicted[j] - 1.0;
                if d.abs() > worst.abs() {
                    worst = d;
                }
            }
        }
    }
    check(
        ratio >= 1.15 && worst.abs() <= 0.10,
        format!(
            "T2 {:.2} -> {:.2} us, mean ratio {ratio:.3} over 4 seeds; envelope vs prediction worst {:+.1}% (chi > 0.2)",
            1e6 * t2_open,
            1e6 * t2_closed,
            100.0 * worst
        ),
    )
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

fn criterion_7(probe: &ProbeConfig, runs: &[(InterleavedResult, InterleavedResult)]) -> Outcome {
    let sizes: Vec<usize> = (0..5).map(|k| 20 << k).collect();
    let mean_t2 = |pick: fn(&(InterleavedResult, InterleavedResult)) -> &InterleavedResult, k: usize| {
        let per_seed: Vec<f64> = runs
            .iter()
            .map(|p| {
                let t = t2_by_section(pick(p), k, probe.set_detuning_hz).unwrap();
                t.iter().sum::<f64>() / t.len() as f64
            })
            .collect();
        per_seed.iter().sum::<f64>() / per_seed.len() as f64
    };
    let open: Vec<f64> = sizes.iter().map(|&k| mean_t2(|p| &p.0, k)).collect();
    let closed: Vec<f64> = sizes.iter().map(|&k| mean_t2(|p| &p.1, k)).collect();
    let durations: Vec<f64> = sizes.iter().map(|&k| k as f64).collect();
    let rho = spearman(&durations, &open);
    let cmax = closed.iter().cloned().fold(f64::MIN, f64::max);
    let cmin = closed.iter().cloned().fold(f64::MAX, f64::min);
    let spread = (cmax - cmin) / (closed.iter().sum::<f64>() / closed.len() as f64);
    let fmt = |v: &[f64]| v.iter().map(|t| format!("{:.2}", 1e6 * t)).collect::<Vec<_>>().join(" ");
    check(
        rho < -0.8 && spread < 0.10,
        format!("open T2 [{}] us rho {rho:.2}; closed [{}] us spread {:.1}%", fmt(&open), fmt(&closed), 100.0 * spread),
    )
}

fn criterion_8() -> Outcome {
    let r = RamseyConfig::reference();
    let cfg = FluxSweepConfig {
        phis: (0..11).map(|i| 0.05 + 0.025 * i as f64).collect(),
        sqrt_a_phi: 2.8e-6,
        points_per_scan: 41,
        n_blocks: 100,
        t1_s: None,
    };
    let points = simulate_flux_sweep(&TransmonSpec::reference(), &cfg, &r, 1).unwrap();
    let (fit, amp) = recover_flux_noise(&points).unwrap();
    let rel = amp.sqrt_a_phi / cfg.sqrt_a_phi - 1.0;
    let echo_amp = flux_noise_amplitude(17e-6, std::f64::consts::LN_2).unwrap().sqrt_a_phi;
    check(
        fit.r_squared > 0.95 && fit.k > 0.0 && rel.abs() <= 0.15 && (echo_amp - 3.25e-6).abs() < 0.005e-6,
        format!(
            "R² {:.4}, k {:.3e}, recovered sqrt(A_phi) {:.3} uPhi0 ({:+.1}%); 17 uPhi0 echo slope -> {:.3} uPhi0",
            fit.r_squared,
            fit.k,
            1e6 * amp.sqrt_a_phi,
            100.0 * rel,
            1e6 * echo_amp
        ),
    )
}

fn criterion_9() -> Outcome {
    let r = RamseyConfig::reference();
    let l = LoopConfig::reference(&r);
    let mut worst_depol: f64 = 0.0;
    for p in [2e-4, 1e-3, 4e-3] {
        let mut c = RBConfig::reference(&r);
        c.sequence_lengths = vec![1, 50, 100, 200, 400, 800];
        c.t1_s = f64::INFINITY;
        c.depolarizing_p = p;
        c.bootstrap_samples = 0;
        let res = simulate_rb(&c, &NoiseModel::silent(), &r, &LoopConfig::open(&r), 4).unwrap();
        worst_depol = worst_depol.max((res.fit.error_per_gate / (p / 2.0) - 1.0).abs());
    }
    let limit = coherence_limit(40e-9, 30e-6, f64::INFINITY, f64::INFINITY).unwrap();

    let spec = TransmonSpec::reference();
    let phi = spec.flux_for_frequency(4.44e9).unwrap();
    let noise = NoiseModel::reference().scaled(spec.sensitivity_ratio_sq(REFERENCE_BIAS_FLUX, phi).unwrap()).unwrap();
    let mut c = RBConfig::reference(&r);
    c.sequence_lengths = vec![1, 100, 200, 400, 800, 1200, 1600, 2400];
    c.repetitions = 250;
    let off = simulate_rb(&c, &noise, &r, &l, 1).unwrap().fit;
    c.feedback_on = true;
    let on = simulate_rb(&c, &noise, &r, &l, 1).unwrap().fit;
    let shrink = off.ci_width() / on.ci_width();
    check(
        worst_depol <= 0.05
            && (limit - 4.444e-4).abs() < 1e-7
            && (3e-4..=5e-4).contains(&limit)
            && on.error_per_gate < off.error_per_gate
            && on.ci_high < off.ci_low
            && shrink >= 2.0,
        format!(
            "depolarizing worst {:.2}%; limit {limit:.4e}; off {:.4e} [{:.4e}, {:.4e}] on {:.4e} [{:.4e}, {:.4e}], width /{shrink:.2}",
            100.0 * worst_depol,
            off.error_per_gate,
            off.ci_low,
            off.ci_high,
            on.error_per_gate,
            on.ci_low,
            on.ci_high
        ),
    )
}

const SMALL: &[&str] = &[
    "run.realizations=3",
    "run.estimates=4096",
    "run.probe_blocks=40",
    "run.probe_points=21",
    "run.sweep_base_blocks=2",
    "run.flux_blocks=10",
    "rb.repetitions=4",
    "rb.bootstrap_samples=50",
];

fn run_cli(scenario: &str, out: &Path, workers: usize) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fluxlock"));
    cmd.arg(scenario).arg("--seed").arg("7").arg("--out").arg(out).arg("--workers").arg(workers.to_string());
    for s in SMALL {
        cmd.arg("--set").arg(s);
    }
    let status = cmd.output().map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{scenario}: {}", String::from_utf8_lossy(&status.stderr)))
    }
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Outcome {
    let root = std::env::temp_dir().join(format!("fluxlock-acceptance-{}", std::process::id()));
    let mut files = 0;
    let mut mismatched = Vec::new();
    for scenario in fluxlock::scenario::SCENARIOS {
        let dirs: Vec<_> = ["a8", "b8", "c1"].iter().map(|d| root.join(scenario).join(d)).collect();
        for (d, w) in dirs.iter().zip([8, 8, 1]) {
            run_cli(scenario, d, w)?;
        }
        let a = read_dir_sorted(&dirs[0]);
        files += a.len();
        if a != read_dir_sorted(&dirs[1]) || a != read_dir_sorted(&dirs[2]) {
            mismatched.push(scenario);
        }
    }
    let _ = std::fs::remove_dir_all(&root);
    check(mismatched.is_empty(), format!("7 scenarios, {files} files; repeated and 1 vs 8 workers differ in {mismatched:?}"))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, start: Instant, outcome: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {id:>2} {name}: {detail} ({secs:.1} s)");
    };

    let t = Instant::now();
    report(1, "transfer-function oracle", t, criterion_1());
    let t = Instant::now();
    report(2, "sampling-noise plateau", t, criterion_2());
    let t = Instant::now();
    report(3, "cross-correlation suppression", t, criterion_3());
    let t = Instant::now();
    report(4, "power-law round trip", t, criterion_4());
    let t = Instant::now();
    report(5, "low-frequency suppression", t, criterion_5());
    let t = Instant::now();
    let (probe, runs) = interleaved_runs();
    report(6, "coherence improvement", t, criterion_6(&probe, &runs));
    let t = Instant::now();
    report(7, "f0 dependence", t, criterion_7(&probe, &runs));
    let t = Instant::now();
    report(8, "flux-sweep linearity", t, criterion_8());
    let t = Instant::now();
    report(9, "randomized benchmarking", t, criterion_9());
    let t = Instant::now();
    report(10, "determinism", t, criterion_10());

    if failures == 0 {
        println!("acceptance: 10/10 passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of 10 failed");
        ExitCode::FAILURE
    }
}
