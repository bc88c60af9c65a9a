use ndarray::Array2;
use rand::Rng;

use crate::analytic::{AnalyticScoreField, GmmSpec};
use crate::arith::BatchArith;
use crate::error::Result;
use crate::field::ScoreField;
use crate::residual::{draw_probes, estimated_residual_batch, ResidualConfig};
use crate::rng;
use crate::sde::SdeSpec;

use super::{sample_batch, Weighting};

/// Noised data and denoising targets `−z/std(t)` for one DSM step.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub xs: Array2<f64>,
    pub ts: Vec<f64>,
    pub targets: Array2<f64>,
}

impl DsmBatch {
    /// `t ~ U[t_min, 1]`, `x = m(t)·x₀ + std(t)·z` for every row of `x0`.
    pub fn draw<R: Rng + ?Sized>(
        sde: &SdeSpec,
        x0: &Array2<f64>,
        t_min: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (n, d) = x0.dim();
        let mut xs = Array2::zeros((n, d));
        let mut targets = Array2::zeros((n, d));
        let mut ts = Vec::with_capacity(n);
        for i in 0..n {
            let t = rng::uniform(rng, t_min, sde.t_max);
            let k = sde.kernel_stats(t)?;
            for j in 0..d {
                let z = rng::normal(rng);
                xs[[i, j]] = k.mean_coef * x0[[i, j]] + k.std * z;
                targets[[i, j]] = -z / k.std;
            }
            ts.push(t);
        }
        Ok(Self { xs, ts, targets })
    }
}

/// Points, times and probes for one evaluation of the residual terms.
#[derive(Debug, Clone)]
pub struct RegBatch {
    pub xs: Array2<f64>,
    pub ts: Vec<f64>,
    pub probes: Vec<Array2<f64>>,
    pub direction: Option<Array2<f64>>,
}

impl RegBatch {
    /// Fresh `x₀ ~ gmm`, `t ~ U[t_min, 1]`, `x ~ q_{0t}(·|x₀)` and probes.
    pub fn draw<R: Rng + ?Sized>(
        gmm: &GmmSpec,
        sde: &SdeSpec,
        cfg: &ResidualConfig,
        n: usize,
        t_min: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let x0 = sample_batch(gmm, n, rng);
        let DsmBatch { xs, ts, .. } = DsmBatch::draw(sde, &x0, t_min, rng)?;
        let (probes, direction) = draw_probes(cfg, rng, n, gmm.dim());
        Ok(Self {
            xs,
            ts,
            probes,
            direction,
        })
    }
}

/// `½·mean λ(t)‖s(x, t) + z/std(t)‖²`.
pub fn dsm_loss<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    weighting: Weighting,
    batch: &DsmBatch,
) -> Result<A::V> {
    let half_lambda = batch
        .ts
        .iter()
        .map(|&t| Ok(0.5 * weighting.lambda(sde, t)?))
        .collect::<Result<Vec<f64>>>()?;
    let s = ar.eval(&batch.xs, &batch.ts)?;
    let target = ar.constant(batch.targets.clone());
    let diff = ar.sub(&s, &target);
    let sq = ar.row_dot(&diff, &diff);
    let weighted = ar.scale_rows(&sq, &half_lambda);
    Ok(ar.mean(&weighted))
}

/// Per-row residual magnitude: `‖ε‖` or `|⟨ε, v⟩|`, squared on request.
fn residual_magnitude<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    rb: &RegBatch,
    squared: bool,
) -> Result<A::V> {
    let eps = estimated_residual_batch(
        ar,
        sde,
        cfg,
        &rb.xs,
        &rb.ts,
        &rb.probes,
        rb.direction.as_ref(),
    )?;
    Ok(match (rb.direction.is_some(), squared) {
        (true, false) => ar.abs(&eps),
        (true, true) => ar.mul(&eps, &eps),
        (false, false) => ar.row_norm(&eps),
        (false, true) => ar.row_dot(&eps, &eps),
    })
}

/// `(1/D)·mean ‖ε̂(x, t)‖` over the batch, from the estimated residual.
pub fn fp_reg_loss<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    rb: &RegBatch,
    squared: bool,
) -> Result<A::V> {
    let per = residual_magnitude(ar, sde, cfg, rb, squared)?;
    let m = ar.mean(&per);
    Ok(ar.scale(&m, 1.0 / rb.xs.ncols() as f64))
}

/// Initial-condition term `mean ‖s(x₀, 0) − s₀(x₀)‖` and residual term
/// `mean ‖ε̂(x, t)‖`, where `s₀` is the analytic score of the data.
pub fn fpe_guided_loss<A: BatchArith>(
    ar: &mut A,
    field: &AnalyticScoreField,
    cfg: &ResidualConfig,
    rb: &RegBatch,
    x0: &Array2<f64>,
) -> Result<(A::V, A::V)> {
    let zeros = vec![0.0; x0.nrows()];
    let s = ar.eval(x0, &zeros)?;
    let target = ar.constant(field.eval_batch(x0.view(), &zeros)?);
    let diff = ar.sub(&s, &target);
    let norms = ar.row_norm(&diff);
    let init = ar.mean(&norms);
    let per = residual_magnitude(ar, &field.sde, cfg, rb, false)?;
    let res = ar.mean(&per);
    Ok((init, res))
}

/// `mean λᵢ ‖s(xᵢ, tᵢ) − target(xᵢ, tᵢ)‖²` with per-row weights `λᵢ`.
pub fn distill_loss<A: BatchArith, F: ScoreField + ?Sized>(
    ar: &mut A,
    target: &F,
    xs: &Array2<f64>,
    ts: &[f64],
    weights: &[f64],
) -> Result<A::V> {
    let s = ar.eval(xs, ts)?;
    let t = ar.constant(target.eval_batch(xs.view(), ts)?);
    let diff = ar.sub(&s, &t);
    let sq = ar.row_dot(&diff, &diff);
    let weighted = ar.scale_rows(&sq, weights);
    Ok(ar.mean(&weighted))
}
