//! Subcommand bodies: resolve a flat config into a typed plan, then run it.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use scorefpe::config::join_list;
use scorefpe::csv;
use scorefpe::flow::{self, GridSpec, OdeConfig, Prior};
use scorefpe::residual::{self, NuSource, SinePerturbation};
use scorefpe::train::{self, TrainFailure};
use scorefpe::{
    rng, AnalyticScoreField, Config, Error, FlatConfig, GmmSpec, ResidualConfig, ResidualMode,
    ScoreField, ScoreNet, SdeSpec, TrainConfig,
};

use crate::manifest::RunManifest;

/// Why a run stopped. Maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad config, missing file, unusable input: exit 2.
    Input(String),
    /// A non-finite value during the computation: exit 3.
    Numerical(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    ResidualSweep,
    Train,
    Sample,
    Density,
    BoundCheck,
}

impl CommandKind {
    pub fn name(self) -> &'static str {
        match self {
            CommandKind::ResidualSweep => "residual-sweep",
            CommandKind::Train => "train",
            CommandKind::Sample => "sample",
            CommandKind::Density => "density",
            CommandKind::BoundCheck => "bound-check",
        }
    }
}

pub const RESIDUAL_CSV: &str = "residual.csv";
pub const LOSS_CSV: &str = "loss.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const DENSITY_CSV: &str = "density.csv";
pub const BOUND_CSV: &str = "bound.csv";

/// Which score field a command evaluates.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldSource {
    Analytic,
    Checkpoint(PathBuf),
}

impl FieldSource {
    /// `field=analytic` or `checkpoint=PATH`; exactly one is required.
    fn from_config(cfg: &Config) -> Result<Self, Failure> {
        match (cfg.get_str("field"), cfg.get_str("checkpoint")) {
            (Some("analytic"), None) => Ok(FieldSource::Analytic),
            (Some(other), None) => Err(Failure::Input(format!(
                "field: expected \"analytic\", got {other:?}"
            ))),
            (None, Some(p)) => Ok(FieldSource::Checkpoint(PathBuf::from(p))),
            (Some(_), Some(_)) => Err(Failure::Input(
                "set either field=analytic or checkpoint=PATH, not both".into(),
            )),
            (None, None) => Err(Failure::Input(
                "no score field: set field=analytic or checkpoint=PATH".into(),
            )),
        }
    }

    fn load(&self, gmm: &GmmSpec, sde: &SdeSpec) -> Result<Box<dyn ScoreField>, Failure> {
        let field: Box<dyn ScoreField> = match self {
            FieldSource::Analytic => Box::new(AnalyticScoreField::new(gmm.clone(), sde.clone())),
            FieldSource::Checkpoint(p) => {
                if !p.exists() {
                    return Err(Failure::Input(format!(
                        "checkpoint {} does not exist",
                        p.display()
                    )));
                }
                Box::new(ScoreNet::load(p)?)
            }
        };
        if field.dim() != gmm.dim() {
            return Err(Failure::Input(format!(
                "score field has dimension {} but the data has {}",
                field.dim(),
                gmm.dim()
            )));
        }
        Ok(field)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub field: FieldSource,
    pub residual: ResidualConfig,
    pub t_grid: Vec<f64>,
    pub mode: ResidualMode,
}

#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub field: FieldSource,
    pub n: usize,
    pub n_steps: usize,
    pub t_min: f64,
}

#[derive(Debug, Clone)]
pub struct DensityPlan {
    pub field: FieldSource,
    pub grid: GridSpec,
    pub ode: OdeConfig,
}

#[derive(Debug, Clone)]
pub struct BoundPlan {
    pub delta: f64,
    pub t_grid: Vec<f64>,
    pub n_points: usize,
    pub radius: f64,
    pub n_nodes: usize,
    pub residual: ResidualConfig,
}

#[derive(Debug, Clone)]
pub enum Task {
    ResidualSweep(SweepPlan),
    Train(Box<TrainConfig>),
    Sample(SamplePlan),
    Density(DensityPlan),
    BoundCheck(BoundPlan),
}

/// A command with every setting resolved.
#[derive(Debug, Clone)]
pub struct Plan {
    pub seed: u64,
    pub sde: SdeSpec,
    pub gmm: GmmSpec,
    pub task: Task,
    /// The user config with every default written out; replaying it
    /// reproduces the run.
    pub resolved: Config,
}

impl Plan {
    pub fn resolve(kind: CommandKind, cfg: &Config) -> Result<Plan, Failure> {
        let seed: u64 = cfg.get_or("seed", 0)?;
        let sde = SdeSpec::from_config(cfg)?;
        let gmm = GmmSpec::from_config(cfg)?;
        let mut resolved = cfg.clone();
        resolved.set("seed", seed);
        sde.write_config(&mut resolved);
        gmm.write_config(&mut resolved);

        let task = match kind {
            CommandKind::ResidualSweep => {
                let field = FieldSource::from_config(cfg)?;
                let residual = ResidualConfig::from_config(cfg)?;
                let t_grid = cfg
                    .get_list::<f64>("sweep.t_grid")?
                    .unwrap_or_else(|| linspace(0.05, 0.95, 20));
                if t_grid.is_empty() {
                    return Err(Failure::Input("sweep.t_grid is empty".into()));
                }
                let mode: ResidualMode = cfg.get_or("sweep.mode", ResidualMode::Exact)?;
                residual.write_config(&mut resolved);
                resolved.set("sweep.t_grid", join_list(&t_grid));
                resolved.set("sweep.mode", mode);
                Task::ResidualSweep(SweepPlan {
                    field,
                    residual,
                    t_grid,
                    mode,
                })
            }
            CommandKind::Train => {
                let tc = TrainConfig::from_config(cfg)?;
                if tc.net.input_dim != gmm.dim() {
                    return Err(Failure::Input(
                        "net.input_dim must equal the data dimension".into(),
                    ));
                }
                tc.write_config(&mut resolved);
                Task::Train(Box::new(tc))
            }
            CommandKind::Sample => {
                let field = FieldSource::from_config(cfg)?;
                let n: usize = cfg.get_or("sample.n", 10_000)?;
                let n_steps: usize = cfg.get_or("sample.n_steps", 1000)?;
                let t_min: f64 = cfg.get_or("sample.t_min", 1e-3)?;
                resolved.set("sample.n", n);
                resolved.set("sample.n_steps", n_steps);
                resolved.set("sample.t_min", format!("{t_min:?}"));
                Task::Sample(SamplePlan {
                    field,
                    n,
                    n_steps,
                    t_min,
                })
            }
            CommandKind::Density => {
                let field = FieldSource::from_config(cfg)?;
                let grid = GridSpec::from_config(cfg)?;
                if gmm.dim() != 2 {
                    return Err(Failure::Input(
                        "density grids need two-dimensional data".into(),
                    ));
                }
                let mut ode = OdeConfig::from_config(cfg)?;
                let prior = cfg.get_str("density.prior").unwrap_or("sde").to_string();
                ode.prior = match prior.as_str() {
                    "sde" => Prior::Sde,
                    "data" => Prior::Mixture(gmm.perturb(&sde, sde.t_max)?),
                    other => {
                        return Err(Failure::Input(format!(
                            "density.prior: expected \"sde\" or \"data\", got {other:?}"
                        )))
                    }
                };
                grid.write_config(&mut resolved);
                ode.write_config(&mut resolved);
                resolved.set("density.prior", prior);
                Task::Density(DensityPlan { field, grid, ode })
            }
            CommandKind::BoundCheck => {
                let delta: f64 = cfg.get_or("bound.delta", 0.01)?;
                if !(delta > 0.0 && delta.is_finite()) {
                    return Err(Failure::Input("bound.delta must be positive".into()));
                }
                let t_grid = cfg
                    .get_list::<f64>("bound.t_grid")?
                    .unwrap_or_else(|| linspace(0.1, 0.9, 9));
                let n_points: usize = cfg.get_or("bound.n_points", 64)?;
                let radius: f64 = cfg.get_or("bound.radius", 8.0)?;
                let n_nodes: usize = cfg.get_or("bound.n_nodes", 50)?;
                if !(radius > 0.0) {
                    return Err(Failure::Input("bound.radius must be positive".into()));
                }
                let residual = ResidualConfig::from_config(cfg)?;
                resolved.set("bound.delta", format!("{delta:?}"));
                resolved.set("bound.t_grid", join_list(&t_grid));
                resolved.set("bound.n_points", n_points);
                resolved.set("bound.radius", format!("{radius:?}"));
                resolved.set("bound.n_nodes", n_nodes);
                residual.write_config(&mut resolved);
                Task::BoundCheck(BoundPlan {
                    delta,
                    t_grid,
                    n_points,
                    radius,
                    n_nodes,
                    residual,
                })
            }
        };
        Ok(Plan {
            seed,
            sde,
            gmm,
            task,
            resolved,
        })
    }

    /// Runs the plan, writing artifacts into `out` and recording them in `manifest`.
    pub fn execute(&self, out: &Path, manifest: &mut RunManifest) -> Result<(), Failure> {
        match &self.task {
            Task::ResidualSweep(p) => self.residual_sweep(p, out, manifest),
            Task::Train(tc) => self.train(tc, out, manifest),
            Task::Sample(p) => self.sample(p, out, manifest),
            Task::Density(p) => self.density(p, out, manifest),
            Task::BoundCheck(p) => self.bound_check(p, out, manifest),
        }
    }

    fn residual_sweep(
        &self,
        p: &SweepPlan,
        out: &Path,
        manifest: &mut RunManifest,
    ) -> Result<(), Failure> {
        let field = p.field.load(&self.gmm, &self.sde)?;
        let mut uniform_cfg = p.residual.clone();
        uniform_cfg.nu_source = NuSource::UnitUniform;
        let mut perturbed_cfg = p.residual.clone();
        perturbed_cfg.nu_source = NuSource::PerturbedData;

        let mut rows = Vec::with_capacity(p.t_grid.len());
        for &t in &p.t_grid {
            if !(t > 0.0 && t <= self.sde.t_max) {
                return Err(Failure::Input(format!(
                    "sweep times must lie in (0, {}], got {t}",
                    self.sde.t_max
                )));
            }
            let uni = residual::r_fp(
                &*field,
                &self.gmm,
                &self.sde,
                t,
                &uniform_cfg,
                p.mode,
                self.seed,
            )?;
            let per = residual::r_fp(
                &*field,
                &self.gmm,
                &self.sde,
                t,
                &perturbed_cfg,
                p.mode,
                self.seed,
            )?;
            let dsm = residual::r_dsm_like(
                &*field,
                &self.gmm,
                &self.sde,
                t,
                p.residual.n_points,
                self.seed,
            )?;
            eprintln!(
                "t={t:.4} r_fp_uniform={uni:.4e} r_fp_perturbed={per:.4e} r_dsm_like={dsm:.4e}"
            );
            rows.push(vec![
                csv::num(t),
                csv::num(uni),
                csv::num(per),
                csv::num(dsm),
                p.residual.n_points.to_string(),
                p.mode.to_string(),
            ]);
        }
        let text = csv::table(
            &[
                "t",
                "r_fp_uniform",
                "r_fp_perturbed",
                "r_dsm_like",
                "n_points",
                "mode",
            ],
            rows,
        );
        write_artifact(out, RESIDUAL_CSV, &text, manifest)
    }

    fn train(
        &self,
        tc: &TrainConfig,
        out: &Path,
        manifest: &mut RunManifest,
    ) -> Result<(), Failure> {
        let epochs = tc.epochs;
        let every = (epochs / 20).max(1);
        let result = train::train_with(tc, &self.gmm, &self.sde, None, |e| {
            if e.epoch % every == 0 || e.epoch + 1 == epochs {
                eprintln!(
                    "epoch {:>5}  total={:.6e}  dsm={:.6e}  reg={:.6e}",
                    e.epoch, e.total, e.dsm_loss, e.fp_reg_loss
                );
            }
        });
        match result {
            Ok(report) => {
                save_checkpoint(out, &report.net, manifest)?;
                write_artifact(out, LOSS_CSV, &report.loss_csv(), manifest)?;
                eprintln!("trained in {:.1} s", report.wall_clock_secs);
                Ok(())
            }
            Err(TrainFailure {
                error,
                last_good,
                history,
            }) => {
                // Keep what was learned up to the failing step.
                save_checkpoint(out, &last_good, manifest)?;
                write_artifact(out, LOSS_CSV, &train::loss_csv(&history), manifest)?;
                Err(error.into())
            }
        }
    }

    fn sample(
        &self,
        p: &SamplePlan,
        out: &Path,
        manifest: &mut RunManifest,
    ) -> Result<(), Failure> {
        let field = p.field.load(&self.gmm, &self.sde)?;
        let set = flow::reverse_sde_sample(&*field, &self.sde, p.n_steps, p.n, p.t_min, self.seed)?;
        write_artifact(out, SAMPLES_CSV, &set.to_csv(), manifest)?;
        let failed = set.n_failed();
        if failed > 0 {
            eprintln!(
                "warning: {failed} of {} trajectories diverged (written as NaN)",
                p.n
            );
        }
        if p.n > 0 && failed == p.n {
            return Err(Failure::Numerical(
                "every sampler trajectory diverged".into(),
            ));
        }
        if failed < p.n {
            let fractions = flow::component_fractions(&set.finite(), &self.gmm);
            eprintln!("component fractions: {fractions:?}");
        }
        Ok(())
    }

    fn density(
        &self,
        p: &DensityPlan,
        out: &Path,
        manifest: &mut RunManifest,
    ) -> Result<(), Failure> {
        let field = p.field.load(&self.gmm, &self.sde)?;
        let grid = flow::density_grid(&*field, &self.sde, &p.grid, &p.ode)?;
        write_artifact(out, DENSITY_CSV, &grid.to_csv(), manifest)?;
        let truth = flow::gmm_density_grid(&self.gmm, &p.grid);
        eprintln!(
            "mass={:.6} mean_abs_error={:.6e} kl_to_truth={:.6e}",
            grid.mass(),
            grid.mean_abs_error(&truth),
            grid.kl_to(&truth)
        );
        Ok(())
    }

    fn bound_check(
        &self,
        p: &BoundPlan,
        out: &Path,
        manifest: &mut RunManifest,
    ) -> Result<(), Failure> {
        let field = AnalyticScoreField::new(self.gmm.clone(), self.sde.clone());
        let d = self.gmm.dim();
        let points = ball_points(p.n_points, d, p.radius, self.seed);
        let perturbation = SinePerturbation::with_bound(p.delta, d);
        let report = residual::integrated_residual_bound_check(
            &field,
            [p.delta; 3],
            perturbation,
            &p.t_grid,
            &points,
            &p.residual,
            p.n_nodes,
        )?;
        write_artifact(out, BOUND_CSV, &report.to_csv(), manifest)?;
        if !report.all_hold() {
            eprintln!("warning: the bound is violated at some grid time");
        }
        Ok(())
    }
}

/// Points uniform in the ball of the given radius, from the `bound/points` substream.
pub fn ball_points(n: usize, d: usize, radius: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::substream(seed, "bound/points");
    (0..n)
        .map(|_| {
            let dir = rng::normal_vec(&mut r, d);
            let norm = dir
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            let rho = radius * rng::uniform(&mut r, 0.0, 1.0).powf(1.0 / d as f64);
            dir.iter().map(|v| v * rho / norm).collect()
        })
        .collect()
}

fn write_artifact(
    out: &Path,
    name: &str,
    text: &str,
    manifest: &mut RunManifest,
) -> Result<(), Failure> {
    let path = out.join(name);
    fs::write(&path, text)?;
    manifest.artifacts.push(path);
    Ok(())
}

fn save_checkpoint(out: &Path, net: &ScoreNet, manifest: &mut RunManifest) -> Result<(), Failure> {
    let path = out.join(CHECKPOINT_FILE);
    net.save(&path)?;
    manifest.artifacts.push(path);
    Ok(())
}
