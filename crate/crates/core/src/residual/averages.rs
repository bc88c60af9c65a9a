use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use super::{draw_probes, estimated_residual_batch, exact_residual_batch, ResidualConfig};
use crate::analytic::GmmSpec;
use crate::arith::{self, FieldArith};
use crate::csv;
use crate::error::{Error, Result};
use crate::field::{check_finite, ScoreField};
use crate::par;
use crate::rng;
use crate::sde::SdeSpec;

/// Points per batched evaluation; fixed so results do not depend on thread count.
const CHUNK: usize = 64;

/// Distribution `ν` of the points where the residual is averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NuSource {
    /// `Uniform([0, 1]^D)`.
    UnitUniform,
    /// `x₀ ~ data`, `x ~ q_{0t}(· | x₀)`.
    PerturbedData,
}

impl FromStr for NuSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unituniform" | "uniform" => Ok(NuSource::UnitUniform),
            "perturbeddata" | "perturbed" => Ok(NuSource::PerturbedData),
            _ => Err(Error::config(format!("unknown point source {s:?}"))),
        }
    }
}

impl fmt::Display for NuSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NuSource::UnitUniform => "UnitUniform",
            NuSource::PerturbedData => "PerturbedData",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualMode {
    Exact,
    Estimated,
}

impl FromStr for ResidualMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(ResidualMode::Exact),
            "estimated" => Ok(ResidualMode::Estimated),
            _ => Err(Error::config(format!("unknown residual mode {s:?}"))),
        }
    }
}

impl fmt::Display for ResidualMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResidualMode::Exact => "exact",
            ResidualMode::Estimated => "estimated",
        })
    }
}

pub fn sample_nu<R: Rng + ?Sized>(
    gmm: &GmmSpec,
    sde: &SdeSpec,
    t: f64,
    source: NuSource,
    rng: &mut R,
) -> Result<Vec<f64>> {
    match source {
        NuSource::UnitUniform => Ok((0..gmm.dim())
            .map(|_| rng::uniform(rng, 0.0, 1.0))
            .collect()),
        NuSource::PerturbedData => {
            let x0 = gmm.sample(rng);
            sde.sample_transition(&x0, t, rng)
        }
    }
}

fn per_point<F>(n: usize, f: F) -> Result<Vec<f64>>
where
    F: Fn(std::ops::Range<usize>) -> Result<Vec<f64>> + Sync + Send,
{
    par::chunked(n, CHUNK, |_, r| f(r))
}

fn ordered_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(1/D)·E_ν ‖ε(x, t)‖₂` (or `E|⟨ε, v⟩|` with projection in estimated mode).
///
/// Point `i` draws from its own substream of `seed`, so results are
/// independent of chunking and thread count.
#[allow(clippy::too_many_arguments)]
pub fn r_fp<F: ScoreField + ?Sized>(
    field: &F,
    gmm: &GmmSpec,
    sde: &SdeSpec,
    t: f64,
    cfg: &ResidualConfig,
    mode: ResidualMode,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    sde.check_time(t)?;
    let d = field.dim();
    let norms = per_point(cfg.n_points, |range| {
        let n = range.len();
        let mut xs = Array2::zeros((n, d));
        let mut probes = vec![Array2::zeros((n, d)); cfg.hutchinson_m];
        let mut dirs = Array2::zeros((n, d));
        for (row, i) in range.enumerate() {
            let mut r = rng::indexed_substream(seed, "sweep/point", i as u64);
            let x = sample_nu(gmm, sde, t, cfg.nu_source, &mut r)?;
            xs.row_mut(row).assign(&ndarray::ArrayView1::from(&x));
            if mode == ResidualMode::Estimated {
                let (p, u) = draw_probes(cfg, &mut r, 1, d);
                for (dst, src) in probes.iter_mut().zip(&p) {
                    dst.row_mut(row).assign(&src.row(0));
                }
                if let Some(u) = u {
                    dirs.row_mut(row).assign(&u.row(0));
                }
            }
        }
        let ts = vec![t; n];
        let eps = match mode {
            ResidualMode::Exact => exact_residual_batch(field, sde, &xs, &ts, cfg)?,
            ResidualMode::Estimated => {
                let mut ar = FieldArith::new(field);
                let dir = cfg.projection.then_some(&dirs);
                estimated_residual_batch(&mut ar, sde, cfg, &xs, &ts, &probes, dir)?
            }
        };
        let norms = arith::row_norm(&eps).into_raw_vec_and_offset().0;
        check_finite(&norms, "residual norm")?;
        Ok(norms)
    })?;
    Ok(ordered_mean(&norms) / d as f64)
}

/// `(1/D)·E ‖s(x, t) − ∇ log q_{0t}(x | x₀)‖₂` over `x₀ ~ gmm`, `x ~ q_{0t}(·|x₀)`.
pub fn r_dsm_like<F: ScoreField + ?Sized>(
    field: &F,
    gmm: &GmmSpec,
    sde: &SdeSpec,
    t: f64,
    n_points: usize,
    seed: u64,
) -> Result<f64> {
    let k = sde.kernel_stats(t)?;
    if k.std == 0.0 {
        return Err(Error::SingularKernel { t });
    }
    if n_points == 0 {
        return Err(Error::config("n_points must be at least 1"));
    }
    let d = gmm.dim();
    let errs = per_point(n_points, |range| {
        let n = range.len();
        let mut xs = Array2::zeros((n, d));
        let mut targets = Array2::zeros((n, d));
        for (row, i) in range.enumerate() {
            let mut r = rng::indexed_substream(seed, "sweep/point", i as u64);
            let x0 = gmm.sample(&mut r);
            let x = sde.sample_transition(&x0, t, &mut r)?;
            let target = sde.transition_score(&x0, &x, t)?;
            xs.row_mut(row).assign(&ndarray::ArrayView1::from(&x));
            targets
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&target));
        }
        let s = field.eval_batch(xs.view(), &vec![t; n])?;
        let norms = arith::row_norm(&(&s - &targets))
            .into_raw_vec_and_offset()
            .0;
        check_finite(&norms, "score error norm")?;
        Ok(norms)
    })?;
    Ok(ordered_mean(&errs) / d as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub t_grid: Vec<f64>,
    pub r_fp: Vec<f64>,
    pub r_dsm_like: Vec<f64>,
    pub n_points: usize,
    pub mode: ResidualMode,
}

impl ResidualReport {
    pub fn to_csv(&self) -> String {
        csv::table(
            &["t", "r_fp", "r_dsm_like", "n_points", "mode"],
            (0..self.t_grid.len()).map(|i| {
                vec![
                    csv::num(self.t_grid[i]),
                    csv::num(self.r_fp[i]),
                    csv::num(self.r_dsm_like[i]),
                    self.n_points.to_string(),
                    self.mode.to_string(),
                ]
            }),
        )
    }
}

/// `r_FP` and `r_DSM-like` over a time grid.
pub fn residual_sweep<F: ScoreField + ?Sized>(
    field: &F,
    gmm: &GmmSpec,
    sde: &SdeSpec,
    t_grid: &[f64],
    cfg: &ResidualConfig,
    mode: ResidualMode,
    seed: u64,
) -> Result<ResidualReport> {
    if t_grid.is_empty() {
        return Err(Error::config("time grid is empty"));
    }
    let mut r_fp_v = Vec::with_capacity(t_grid.len());
    let mut r_dsm_v = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        if t <= 0.0 {
            return Err(Error::config(format!(
                "sweep times must be positive, got {t}"
            )));
        }
        r_fp_v.push(r_fp(field, gmm, sde, t, cfg, mode, seed)?);
        r_dsm_v.push(r_dsm_like(field, gmm, sde, t, cfg.n_points, seed)?);
    }
    Ok(ResidualReport {
        t_grid: t_grid.to_vec(),
        r_fp: r_fp_v,
        r_dsm_like: r_dsm_v,
        n_points: cfg.n_points,
        mode,
    })
}
