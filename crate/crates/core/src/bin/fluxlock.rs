use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use fluxlock::scenario::{Config, RunError, Scenario, SCENARIOS};

/// Closed-loop qubit frequency stabilization scenarios.
#[derive(Parser, Debug)]
#[command(name = "fluxlock", version)]
struct Cli {
    /// One of: psd, closed-loop, transfer, ramsey, coherence-sweep, flux-sweep, rb.
    scenario: String,
    /// TOML configuration; omitted keys take their reference defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides run.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Override one key, e.g. `--set loop.gain=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Accept gains at or above the stability bound and report the divergence.
    #[arg(long)]
    allow_unstable: bool,
    /// Only validate the configuration.
    #[arg(long)]
    check: bool,
}

fn run(cli: Cli) -> Result<(), RunError> {
    if !SCENARIOS.contains(&cli.scenario.as_str()) {
        return Err(RunError::Usage(format!(
            "unknown scenario '{}'; expected one of {}",
            cli.scenario,
            SCENARIOS.join(", ")
        )));
    }
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let mut bad = Vec::new();
    for o in &cli.overrides {
        if let Err(e) = config.apply_override(o) {
            bad.push(e);
        }
    }
    if !bad.is_empty() {
        return Err(RunError::Config(fluxlock::scenario::ConfigErrors(bad)));
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if cli.check {
        config.validate(cli.allow_unstable)?;
        println!("configuration ok");
        return Ok(());
    }
    let scenario = Scenario {
        name: cli.scenario,
        config,
        output_dir: cli.out,
        workers: cli.workers,
        allow_unstable: cli.allow_unstable,
    };
    for path in scenario.run()? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fluxlock: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
