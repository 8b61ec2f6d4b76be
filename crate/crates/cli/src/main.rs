use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use s2cp_cli::{commands, CliError, RunConfig};

/// Cross-domain infrared small target detection experiments.
///
/// Every command reads an optional flat `key = value` config file, then
/// applies `--set key=value` overrides and flags (flags win). Set
/// S2CP_THREADS to cap worker threads; RUST_LOG controls verbosity.
#[derive(Parser)]
#[command(name = "s2cp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic domain datasets with manifests.
    GenData(Common),
    /// Train on the source-domain manifests.
    Train(Common),
    /// Evaluate a checkpoint on a held-out domain.
    Eval(Common),
    /// Radial magnitude and phase-congruency profiles of datasets.
    Spectra(Common),
    /// Print every config key with its default and description.
    Keys,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (same as `--set out=...`).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    no_prm: bool,
    #[arg(long)]
    no_oam: bool,
    #[arg(long)]
    no_ssr: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            cfg.apply_override(kv)?;
        }
        if let Some(out) = &self.out {
            cfg.set("out", out)?;
        }
        for (flag, key) in [(self.no_prm, "model.prm"), (self.no_oam, "model.oam"), (self.no_ssr, "model.ssr")] {
            if flag {
                cfg.set(key, "false")?;
            }
        }
        Ok(cfg)
    }
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("S2CP_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("S2CP_THREADS: expected a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("S2CP_THREADS: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenData(c) => {
            for m in commands::gen_data(&c.resolve()?)? {
                println!("{}", m.display());
            }
        }
        Command::Train(c) => {
            let out = commands::train(&c.resolve()?)?;
            println!("best validation IoU {:.6}; checkpoint {}", out.best_iou, out.files.best.display());
        }
        Command::Eval(c) => {
            let r = commands::eval(&c.resolve()?)?;
            println!("{}\n{}", s2cp_core::metrics::EvalReport::CSV_HEADER, r.csv_row());
        }
        Command::Spectra(c) => {
            for d in commands::spectra(&c.resolve()?)? {
                println!(
                    "{} vs {}: magnitude {:.6}, congruency {:.6}",
                    d.a, d.b, d.magnitude, d.congruency
                );
            }
        }
        Command::Keys => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
