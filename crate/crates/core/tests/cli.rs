use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fluxlock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fluxlock")).args(args).output().expect("binary runs")
}

fn config_path() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml").display().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn transfer_table_has_exact_dc_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = fluxlock(&["transfer", "--config", &config_path(), "--out", out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = read(dir.path(), "transfer.csv");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("f_hz,hp_mag,hp_phase_rad,he_mag,he_phase_rad"));
    assert_eq!(lines.next(), Some("0,1,0,0,0"));
    let last: Vec<f64> = csv.lines().last().unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((last[0] - 1.0 / (2.0 * 70e-6)).abs() < 1e-6);
    assert!((last[1] - 0.35 / 1.65).abs() < 1e-12);
    assert_eq!(csv.lines().count(), 258);
    assert!(csv.ends_with('\n'));
}

#[test]
fn manifest_records_overrides_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = fluxlock(&["transfer", "--seed", "42", "--set", "loop.gain=0.5", "--set", "run.transfer_points=3", "--out", out]);
    assert!(res.status.success());
    let m = read(dir.path(), "manifest.txt");
    assert!(m.starts_with("scenario=transfer\n"));
    for line in ["run.seed=42", "loop.gain=0.5", "run.transfer_points=3", "ramsey.tau_us=1.25", "noise.cutoff_khz=inf"] {
        assert!(m.lines().any(|l| l == line), "missing {line}");
    }
    assert!(m.lines().all(|l| l.contains('=')));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(fluxlock(&["nonsense", "--out", out]).status.code(), Some(2));
    assert_eq!(fluxlock(&["psd", "--bogus-flag"]).status.code(), Some(2));

    let res = fluxlock(&["psd", "--set", "loop.gain=2.5", "--set", "ramsey.tau_us=5", "--out", out]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("loop.gain") && err.contains("stability"), "{err}");
    assert!(err.contains("ramsey.tau_us"), "{err}");

    assert_eq!(fluxlock(&["psd", "--set", "nope.key=1", "--out", out]).status.code(), Some(3));

    let res = fluxlock(&[
        "closed-loop",
        "--set",
        "loop.gain=2.5",
        "--set",
        "run.estimates=2000",
        "--set",
        "run.realizations=1",
        "--allow-unstable",
        "--out",
        out,
    ]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn bad_config_file_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[ramsey]\ntau = 1\n[loop]\ngain = \"high\"\n").unwrap();
    let res = fluxlock(&["psd", "--config", cfg.to_str().unwrap(), "--check"]);
    assert_eq!(res.status.code(), Some(3));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("ramsey.tau: unknown key"), "{err}");
    assert!(err.contains("loop.gain: expected a number"), "{err}");
    let ok = fluxlock(&["psd", "--config", &config_path(), "--check"]);
    assert!(ok.status.success());
}

#[test]
fn psd_scenario_is_deterministic_across_workers() {
    let small = ["--set", "run.realizations=3", "--set", "run.estimates=2048", "--seed", "9"];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, w: &str| {
        let mut args = vec!["psd", "--out", dir.to_str().unwrap(), "--workers", w];
        args.extend_from_slice(&small);
        assert!(fluxlock(&args).status.success());
    };
    run(a.path(), "1");
    run(b.path(), "8");
    for f in ["psd_open.csv", "psd_suppressed.csv", "psd_fit.txt", "manifest.txt"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    let header = read(a.path(), "psd_open.csv");
    assert!(header.starts_with("f_hz,psd_hz2_per_hz\n"));
}

#[test]
fn flux_sweep_slope_is_positive() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = fluxlock(&["flux-sweep", "--set", "run.flux_blocks=20", "--out", out]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(read(dir.path(), "flux_sweep.csv").lines().count(), 12);
    let fit = read(dir.path(), "flux_fit.txt");
    let k: f64 = fit.lines().find_map(|l| l.strip_prefix("k_phi0=")).unwrap().parse().unwrap();
    assert!(k > 0.0);
}
