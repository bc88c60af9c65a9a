use ndarray::{Array2, ArrayView2};

use super::{exact_residual_batch, ResidualConfig};
use crate::analytic::AnalyticScoreField;
use crate::csv;
use crate::error::{Error, Result};
use crate::field::ScoreField;

/// `‖J − Jᵀ‖_F` of the input Jacobian; zero iff the field is locally a gradient.
pub fn conservativity_gap<F: ScoreField + ?Sized>(field: &F, x: &[f64], t: f64) -> Result<f64> {
    let j = field.jacobian(x, t)?;
    Ok((&j - &j.t()).mapv(|v| v * v).sum().sqrt())
}

/// `p(x) = a·(sin x₁, …, sin x_D)`.
///
/// Its value, Jacobian (Frobenius) and gradient of divergence are each
/// bounded by `a·√D`, with equality attained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinePerturbation {
    pub amplitude: f64,
    pub dim: usize,
}

impl SinePerturbation {
    /// Amplitude whose three sup-norm bounds all equal `delta`.
    pub fn with_bound(delta: f64, dim: usize) -> Self {
        Self {
            amplitude: delta / (dim as f64).sqrt(),
            dim,
        }
    }

    /// Sup norms of value, Jacobian and gradient of divergence.
    pub fn bounds(&self) -> [f64; 3] {
        let b = self.amplitude.abs() * (self.dim as f64).sqrt();
        [b, b, b]
    }
}

/// Analytic score plus a sine perturbation.
struct Perturbed<'a> {
    base: &'a AnalyticScoreField,
    p: SinePerturbation,
}

impl ScoreField for Perturbed<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let a = self.p.amplitude;
        Ok(self.base.eval_batch(xs, ts)? + xs.mapv(|v| a * v.sin()))
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        let mut j = self.base.jacobian(x, t)?;
        for (i, xi) in x.iter().enumerate() {
            j[[i, i]] += self.p.amplitude * xi.cos();
        }
        Ok(j)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub t: f64,
    /// `‖∫₀ᵗ ε dτ‖` at the point where the bound is tightest.
    pub lhs: f64,
    pub rhs: f64,
    /// True when the bound holds at every checked point.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
}

impl BoundReport {
    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }

    pub fn to_csv(&self) -> String {
        csv::table(
            &["t", "lhs", "rhs", "holds"],
            self.rows.iter().map(|r| {
                vec![
                    csv::num(r.t),
                    csv::num(r.lhs),
                    csv::num(r.rhs),
                    r.holds.to_string(),
                ]
            }),
        )
    }
}

fn trapezoid(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    step * (values[1..n - 1].iter().sum::<f64>() + 0.5 * (values[0] + values[n - 1]))
}

/// Checks the integrated-residual bound for `s + p` against the analytic score `s`.
///
/// For each `t` in `t_grid` and each point, integrates the residual of the
/// perturbed field over `[0, t]` with the composite trapezoid on `n_nodes`
/// nodes and compares its norm with
///
/// ```text
/// 2δ₀ + (δ₂ + 2δ₁δ₀)·C(t) + δ₁∫(g²‖s‖ + ‖f‖) + δ₀∫(g²‖∇s‖_F + ‖∇f‖_F),   C(t) = ½∫g²
/// ```
///
/// whose integrals use the same nodes.
#[allow(clippy::too_many_arguments)]
pub fn integrated_residual_bound_check(
    field: &AnalyticScoreField,
    deltas: [f64; 3],
    perturbation: SinePerturbation,
    t_grid: &[f64],
    points: &[Vec<f64>],
    cfg: &ResidualConfig,
    n_nodes: usize,
) -> Result<BoundReport> {
    let [d0, d1, d2] = deltas;
    let actual = perturbation.bounds();
    if perturbation.dim != field.dim() {
        return Err(Error::Precondition(
            "perturbation dimension differs from the field".into(),
        ));
    }
    for (k, (&declared, &have)) in deltas.iter().zip(&actual).enumerate() {
        if have > declared * (1.0 + 1e-12) {
            return Err(Error::Precondition(format!(
                "perturbation bound {have} exceeds declared δ{k} = {declared}"
            )));
        }
    }
    if t_grid.is_empty() || points.is_empty() {
        return Err(Error::config(
            "bound check needs at least one time and one point",
        ));
    }
    if n_nodes < 2 {
        return Err(Error::config(
            "bound check needs at least two quadrature nodes",
        ));
    }
    let sde = &field.sde;
    let perturbed = Perturbed {
        base: field,
        p: perturbation,
    };
    let dim = field.dim();
    let sqrt_d = (dim as f64).sqrt();
    let mut rows = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        sde.check_time(t)?;
        let step = t / (n_nodes - 1) as f64;
        let nodes: Vec<f64> = (0..n_nodes).map(|k| k as f64 * step).collect();
        let g2: Vec<f64> = nodes.iter().map(|&tau| sde.diffusion_sq(tau)).collect();
        let c_t = 0.5 * trapezoid(&g2, step);
        let mut worst: Option<(f64, f64)> = None;
        let mut holds = true;
        for x in points {
            let xs = Array2::from_shape_fn((n_nodes, dim), |(_, j)| x[j]);
            let eps = exact_residual_batch(&perturbed, sde, &xs, &nodes, cfg)?;
            let lhs = (0..dim)
                .map(|j| trapezoid(&eps.column(j).to_vec(), step))
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            let s = field.eval_batch(xs.view(), &nodes)?;
            let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mut value_terms = Vec::with_capacity(n_nodes);
            let mut jac_terms = Vec::with_capacity(n_nodes);
            for (k, &tau) in nodes.iter().enumerate() {
                let a = sde.drift_rate(tau).abs();
                let s_norm = s.row(k).mapv(|v| v * v).sum().sqrt();
                let j_norm = field.jacobian(x, tau)?.mapv(|v| v * v).sum().sqrt();
                value_terms.push(g2[k] * s_norm + a * x_norm);
                jac_terms.push(g2[k] * j_norm + a * sqrt_d);
            }
            let rhs = 2.0 * d0
                + (d2 + 2.0 * d1 * d0) * c_t
                + d1 * trapezoid(&value_terms, step)
                + d0 * trapezoid(&jac_terms, step);
            holds &= lhs <= rhs;
            if worst.is_none_or(|(l, r)| lhs / rhs > l / r) {
                worst = Some((lhs, rhs));
            }
        }
        let (lhs, rhs) = worst.unwrap();
        rows.push(BoundRow { t, lhs, rhs, holds });
    }
    Ok(BoundReport { rows })
}
