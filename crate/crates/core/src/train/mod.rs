//! Training objectives and the Adam training loop.
//!
//! Losses are written against [`BatchArith`], so the same code evaluates a
//! loss for any [`ScoreField`] (through [`FieldArith`]) and records it on a
//! [`Tape`] for parameter gradients.

mod losses;

pub use losses::{distill_loss, dsm_loss, fp_reg_loss, fpe_guided_loss, DsmBatch, RegBatch};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::analytic::{AnalyticScoreField, GmmSpec};
use crate::arith::BatchArith;
use crate::config::{Config, FlatConfig};
use crate::csv;
use crate::error::{Error, Result};
use crate::residual::ResidualConfig;
use crate::rng;
use crate::scorenet::{Adam, NetConfig, ScoreNet, Tape};
use crate::sde::SdeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Denoising score matching alone.
    Dsm,
    /// DSM plus `γ` times the Fokker–Planck residual regularizer.
    FpReg,
    /// Residual plus initial-condition mismatch against the analytic score at `t = 0`.
    FpeGuided,
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "DSM" => Ok(Objective::Dsm),
            "FP_REG" => Ok(Objective::FpReg),
            "FPE_GUIDED" => Ok(Objective::FpeGuided),
            _ => Err(Error::config(format!("unknown objective {s:?}"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Dsm => "DSM",
            Objective::FpReg => "FP_REG",
            Objective::FpeGuided => "FPE_GUIDED",
        })
    }
}

/// DSM weighting `λ(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `λ(t) = std(t)²`.
    SigmaSquared,
    /// `λ(t) = g(t)²`.
    GSquared,
}

impl Weighting {
    pub fn lambda(self, sde: &SdeSpec, t: f64) -> Result<f64> {
        Ok(match self {
            Weighting::SigmaSquared => sde.kernel_stats(t)?.var(),
            Weighting::GSquared => sde.diffusion(t)?.powi(2),
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmasquared" | "sigma2" => Ok(Weighting::SigmaSquared),
            "gsquared" | "g2" => Ok(Weighting::GSquared),
            _ => Err(Error::config(format!("unknown weighting {s:?}"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::SigmaSquared => "SigmaSquared",
            Weighting::GSquared => "GSquared",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub gamma: f64,
    pub weighting: Weighting,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// `None` means `ceil(dataset_size / batch)`.
    pub steps_per_epoch: Option<usize>,
    pub dataset_size: usize,
    /// Points per step for the residual terms.
    pub reg_batch: usize,
    /// Squared residual norm in the regularizer instead of the norm.
    pub squared_residual: bool,
    pub t_min: f64,
    pub seed: u64,
    pub residual: ResidualConfig,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Dsm,
            gamma: 0.0,
            weighting: Weighting::SigmaSquared,
            lr: 1e-3,
            batch: 500,
            epochs: 2000,
            steps_per_epoch: None,
            dataset_size: 10_000,
            reg_batch: 100,
            squared_residual: false,
            t_min: 1e-3,
            seed: 0,
            residual: ResidualConfig::default(),
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("train.gamma must be non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min <= 0.1) {
            return Err(Error::config("train.t_min must lie in (0, 0.1]"));
        }
        if self.batch == 0 || self.dataset_size == 0 || self.reg_batch == 0 {
            return Err(Error::config(
                "train.batch, train.dataset_size and train.reg_batch must be positive",
            ));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("train.steps_per_epoch must be positive"));
        }
        self.residual.validate()?;
        self.net.validate()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
            .unwrap_or(self.dataset_size.div_ceil(self.batch))
    }
}

impl FlatConfig for TrainConfig {
    fn from_config(cfg: &Config) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            objective: cfg.get_or("train.objective", d.objective)?,
            gamma: cfg.get_or("train.gamma", d.gamma)?,
            weighting: cfg.get_or("train.weighting", d.weighting)?,
            lr: cfg.get_or("train.lr", d.lr)?,
            batch: cfg.get_or("train.batch", d.batch)?,
            epochs: cfg.get_or("train.epochs", d.epochs)?,
            steps_per_epoch: cfg.get("train.steps_per_epoch")?,
            dataset_size: cfg.get_or("train.dataset_size", d.dataset_size)?,
            reg_batch: cfg.get_or("train.reg_batch", d.reg_batch)?,
            squared_residual: cfg.get_bool_or("train.squared_residual", d.squared_residual)?,
            t_min: cfg.get_or("train.t_min", d.t_min)?,
            seed: cfg.get_or("seed", d.seed)?,
            residual: ResidualConfig::from_config(cfg)?,
            net: NetConfig::from_config(cfg)?,
        };
        c.validate()?;
        Ok(c)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("train.objective", self.objective);
        cfg.set("train.gamma", format!("{:?}", self.gamma));
        cfg.set("train.weighting", self.weighting);
        cfg.set("train.lr", format!("{:?}", self.lr));
        cfg.set("train.batch", self.batch);
        cfg.set("train.epochs", self.epochs);
        // Absent means derived from dataset_size and batch.
        if let Some(n) = self.steps_per_epoch {
            cfg.set("train.steps_per_epoch", n);
        }
        cfg.set("train.dataset_size", self.dataset_size);
        cfg.set("train.reg_batch", self.reg_batch);
        cfg.set("train.squared_residual", self.squared_residual);
        cfg.set("train.t_min", format!("{:?}", self.t_min));
        cfg.set("seed", self.seed);
        self.residual.write_config(cfg);
        self.net.write_config(cfg);
    }
}

/// Per-epoch means of the loss components.
///
/// For the guided objective `dsm_loss` holds the initial-condition term and
/// `fp_reg_loss` the residual term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub dsm_loss: f64,
    pub fp_reg_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub history: Vec<EpochLoss>,
    pub net: ScoreNet,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn loss_csv(&self) -> String {
        loss_csv(&self.history)
    }
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    csv::table(
        &["epoch", "dsm_loss", "fp_reg_loss", "total"],
        history.iter().map(|e| {
            vec![
                e.epoch.to_string(),
                csv::num(e.dsm_loss),
                csv::num(e.fp_reg_loss),
                csv::num(e.total),
            ]
        }),
    )
}

/// Training stopped on a non-finite value; `last_good` holds the parameters
/// before the failing step.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub last_good: Box<ScoreNet>,
    pub history: Vec<EpochLoss>,
}

impl fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "training aborted after {} epochs: {}",
            self.history.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        // Only reachable before a network exists.
        TrainFailure {
            error,
            last_good: Box::new(
                ScoreNet::zeros(NetConfig::default()).expect("default config is valid"),
            ),
            history: Vec::new(),
        }
    }
}

fn sample_batch<R: Rng + ?Sized>(gmm: &GmmSpec, n: usize, rng: &mut R) -> Array2<f64> {
    let d = gmm.dim();
    let flat: Vec<f64> = (0..n).flat_map(|_| gmm.sample(rng)).collect();
    Array2::from_shape_vec((n, d), flat).unwrap()
}

/// Fixed training set of `cfg.dataset_size` draws, determined by the seed.
pub fn training_data(cfg: &TrainConfig, gmm: &GmmSpec) -> Array2<f64> {
    let mut r = rng::substream(cfg.seed, "train/data");
    sample_batch(gmm, cfg.dataset_size, &mut r)
}

pub fn train(cfg: &TrainConfig, gmm: &GmmSpec, sde: &SdeSpec) -> Result<TrainReport, TrainFailure> {
    train_with(cfg, gmm, sde, None, |_| {})
}

/// Trains from `init` (or a fresh network seeded by `cfg.seed`), calling
/// `on_epoch` after every epoch.
pub fn train_with(
    cfg: &TrainConfig,
    gmm: &GmmSpec,
    sde: &SdeSpec,
    init: Option<ScoreNet>,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainReport, TrainFailure> {
    let start = Instant::now();
    cfg.validate()?;
    sde.validate()?;
    gmm.validate()?;
    if gmm.dim() != cfg.net.input_dim {
        return Err(Error::config("net.input_dim must equal the data dimension").into());
    }
    let mut net = match init {
        Some(n) => n,
        None => ScoreNet::init(cfg.net.clone(), cfg.seed)?,
    };
    let data = training_data(cfg, gmm);
    let initial_field = AnalyticScoreField::new(gmm.clone(), sde.clone());
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let mut shuffle = rng::substream(cfg.seed, "train/shuffle");
    let mut noise = rng::substream(cfg.seed, "train/noise");
    let mut reg = rng::substream(cfg.seed, "train/reg");
    let mut opt = Adam::new(net.param_count(), cfg.lr);
    let steps = cfg.steps_per_epoch();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut sums = [0.0; 2];
        let mut cursor = data.nrows();
        for _ in 0..steps {
            if cursor >= data.nrows() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            let end = (cursor + cfg.batch).min(data.nrows());
            let x0 = data.select(ndarray::Axis(0), &order[cursor..end]);
            cursor = end;

            let step = (|| -> Result<([f64; 2], Vec<f64>)> {
                let mut tape = Tape::new(&net);
                let (main, side, loss) = match cfg.objective {
                    Objective::Dsm | Objective::FpReg => {
                        let batch = DsmBatch::draw(sde, &x0, cfg.t_min, &mut noise)?;
                        let dsm = dsm_loss(&mut tape, sde, cfg.weighting, &batch)?;
                        let dsm_value = tape.scalar(dsm)?;
                        if cfg.objective == Objective::FpReg && cfg.gamma > 0.0 {
                            let rb = RegBatch::draw(
                                gmm,
                                sde,
                                &cfg.residual,
                                cfg.reg_batch,
                                cfg.t_min,
                                &mut reg,
                            )?;
                            let r = fp_reg_loss(
                                &mut tape,
                                sde,
                                &cfg.residual,
                                &rb,
                                cfg.squared_residual,
                            )?;
                            let r_value = tape.scalar(r)?;
                            let scaled = tape.scale(&r, cfg.gamma);
                            let total = tape.add(&dsm, &scaled);
                            (dsm_value, r_value, total)
                        } else {
                            (dsm_value, 0.0, dsm)
                        }
                    }
                    Objective::FpeGuided => {
                        let rb = RegBatch::draw(
                            gmm,
                            sde,
                            &cfg.residual,
                            cfg.reg_batch,
                            cfg.t_min,
                            &mut reg,
                        )?;
                        let (init_term, res_term) =
                            fpe_guided_loss(&mut tape, &initial_field, &cfg.residual, &rb, &x0)?;
                        let a = tape.scalar(init_term)?;
                        let b = tape.scalar(res_term)?;
                        let total = tape.add(&init_term, &res_term);
                        (a, b, total)
                    }
                };
                if !(main.is_finite() && side.is_finite()) {
                    return Err(Error::non_finite(format!("loss at epoch {epoch}")));
                }
                Ok(([main, side], tape.backward(loss)?))
            })();
            let (values, grad) = step.map_err(|error| TrainFailure {
                error,
                last_good: Box::new(net.clone()),
                history: history.clone(),
            })?;
            opt.step(net.params_mut(), &grad)
                .map_err(|error| TrainFailure {
                    error,
                    last_good: Box::new(net.clone()),
                    history: history.clone(),
                })?;
            sums[0] += values[0];
            sums[1] += values[1];
        }
        let dsm = sums[0] / steps as f64;
        let side = sums[1] / steps as f64;
        let total = match cfg.objective {
            Objective::FpeGuided => dsm + side,
            _ => dsm + cfg.gamma * side,
        };
        let e = EpochLoss {
            epoch,
            dsm_loss: dsm,
            fp_reg_loss: side,
            total,
        };
        on_epoch(&e);
        history.push(e);
    }
    Ok(TrainReport {
        config: cfg.clone(),
        history,
        net,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Regresses `net` onto `field` at random `(x, t)` with `x` from the
/// perturbed data, weighting each point by `weighting.lambda(t)`; a test and
/// warm-start utility.
#[allow(clippy::too_many_arguments)]
pub fn distill<F: crate::field::ScoreField>(
    net: &mut ScoreNet,
    field: &F,
    gmm: &GmmSpec,
    sde: &SdeSpec,
    weighting: Weighting,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let mut r = rng::substream(seed, "distill");
    let mut opt = Adam::new(net.param_count(), lr);
    let mut last = f64::NAN;
    for _ in 0..steps {
        let x0 = sample_batch(gmm, batch, &mut r);
        let b = DsmBatch::draw(sde, &x0, 1e-3, &mut r)?;
        let mut tape = Tape::new(net);
        let weights =
            b.ts.iter()
                .map(|&t| weighting.lambda(sde, t))
                .collect::<Result<Vec<_>>>()?;
        let l = distill_loss(&mut tape, field, &b.xs, &b.ts, &weights)?;
        last = tape.scalar(l)?;
        let g = tape.backward(l)?;
        opt.step(net.params_mut(), &g)?;
    }
    Ok(last)
}
