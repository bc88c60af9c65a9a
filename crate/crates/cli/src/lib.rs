//! Command-line harness around the `scorefpe` library.
//!
//! Every subcommand reads a flat `key=value` config (file plus `--set`
//! overrides), writes `manifest.json` and `resolved.cfg` into its output
//! directory before starting, and rewrites the manifest when it finishes.
//! Replaying `resolved.cfg` reproduces the CSV artifacts byte for byte.

pub mod commands;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use scorefpe::Config;

pub use commands::{CommandKind, Failure, Plan};
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "scorefpe",
    version,
    about = "Score Fokker-Planck residuals, regularized score training and likelihoods on synthetic data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory for this run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,

    /// Config override, applied after the file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// r_FP and r_DSM-like over a time grid (`residual.csv`).
    ResidualSweep,
    /// Train a score network (`checkpoint.json`, `loss.csv`).
    Train,
    /// Reverse-SDE samples (`samples.csv`).
    Sample,
    /// Probability-flow log-density on a 2-D grid (`density.csv`).
    Density,
    /// Integrated-residual bound for a perturbed analytic score (`bound.csv`).
    BoundCheck,
}

impl From<Command> for CommandKind {
    fn from(c: Command) -> Self {
        match c {
            Command::ResidualSweep => CommandKind::ResidualSweep,
            Command::Train => CommandKind::Train,
            Command::Sample => CommandKind::Sample,
            Command::Density => CommandKind::Density,
            Command::BoundCheck => CommandKind::BoundCheck,
        }
    }
}

/// Env var naming the root under which runs without `--out` are placed.
pub const OUT_ENV: &str = "SCOREFPE_OUT";

/// Config file, then `--set` overrides, then `--seed`.
pub fn build_config(args: &CommonArgs) -> Result<Config, Failure> {
    let mut cfg = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::new(),
    };
    for kv in &args.overrides {
        let one = Config::parse(kv)?;
        if one.iter().count() != 1 {
            return Err(Failure::Input(format!(
                "--set expects one KEY=VALUE, got {kv:?}"
            )));
        }
        cfg.merge(&one);
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", seed);
    }
    Ok(cfg)
}

/// `--out`, else `$SCOREFPE_OUT/<command>-<seed>`, else `runs/<command>-<seed>`.
pub fn output_dir(
    args: &CommonArgs,
    kind: CommandKind,
    seed: u64,
    env_root: Option<PathBuf>,
) -> PathBuf {
    if let Some(out) = &args.out {
        return out.clone();
    }
    let root = env_root.unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-{seed}", kind.name()))
}

/// Resolves, records and executes one run; the manifest is written before
/// and after the work.
pub fn run_in(
    kind: CommandKind,
    cfg: &Config,
    out: &Path,
    threads: Option<usize>,
) -> Result<RunManifest, Failure> {
    let plan = Plan::resolve(kind, cfg)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::start(kind.name(), plan.resolved.clone(), plan.seed, threads);
    manifest.write(out)?;
    let result = plan.execute(out, &mut manifest);
    manifest.finish(result.as_ref().err().map(ToString::to_string));
    manifest.write(out)?;
    result.map(|()| manifest)
}

pub fn run(cli: &Cli) -> Result<RunManifest, Failure> {
    let kind = CommandKind::from(cli.command);
    let cfg = build_config(&cli.common)?;
    let seed: u64 = cfg.get_or("seed", 0)?;
    let out = output_dir(
        &cli.common,
        kind,
        seed,
        std::env::var_os(OUT_ENV).map(PathBuf::from),
    );
    match cli.common.threads {
        Some(0) => Err(Failure::Input("--threads must be at least 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Input(e.to_string()))?;
            pool.install(|| run_in(kind, &cfg, &out, Some(n)))
        }
        None => run_in(kind, &cfg, &out, None),
    }
}
