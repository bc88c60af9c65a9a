//! The score Fokker–Planck residual
//!
//! ```text
//! ε(x, t) = ∂_t s − ∇_x M,   M = ½g²·div s + ½g²‖s‖² − ⟨f, s⟩ − div f
//! ```
//!
//! which vanishes for the true score of any forward SDE with linear drift.
//! Two evaluation paths share the time stencil and the bracket `M`:
//! an exact path using Jacobian traces, and an estimated path built from
//! forward evaluations only (Hutchinson divergence surrogate, optional
//! projection onto the probe), which runs on any [`BatchArith`] and is
//! therefore differentiable on a [`crate::Tape`].

mod averages;
mod bound;

pub use averages::{
    r_dsm_like, r_fp, residual_sweep, sample_nu, NuSource, ResidualMode, ResidualReport,
};
pub use bound::{
    conservativity_gap, integrated_residual_bound_check, BoundReport, BoundRow, SinePerturbation,
};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::arith::{column, BatchArith, FieldArith};
use crate::config::{Config, FlatConfig};
use crate::error::{Error, Result};
use crate::field::{check_finite, ScoreField};
use crate::rng;
use crate::sde::SdeSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeDist {
    Rademacher,
    Gaussian,
}

impl ProbeDist {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R, dim: usize) -> Vec<f64> {
        match self {
            ProbeDist::Rademacher => rng::rademacher_vec(rng, dim),
            ProbeDist::Gaussian => rng::normal_vec(rng, dim),
        }
    }

    pub fn draw_batch<R: Rng + ?Sized>(self, rng: &mut R, n: usize, dim: usize) -> Array2<f64> {
        let flat: Vec<f64> = (0..n).flat_map(|_| self.draw(rng, dim)).collect();
        Array2::from_shape_vec((n, dim), flat).unwrap()
    }
}

impl FromStr for ProbeDist {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" => Ok(ProbeDist::Rademacher),
            "gaussian" => Ok(ProbeDist::Gaussian),
            _ => Err(Error::config(format!("unknown probe distribution {s:?}"))),
        }
    }
}

impl fmt::Display for ProbeDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeDist::Rademacher => "Rademacher",
            ProbeDist::Gaussian => "Gaussian",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualConfig {
    /// Backward time step.
    pub h_s: f64,
    /// Forward time step.
    pub h_d: f64,
    /// Spatial step for gradients of `M` and for the divergence surrogate.
    pub h_x: f64,
    /// Probes averaged in the divergence surrogate.
    pub hutchinson_m: usize,
    pub probe_dist: ProbeDist,
    /// Return `⟨ε, v⟩` instead of `ε`.
    pub projection: bool,
    /// With projection, reuse the first divergence probe as the projection direction.
    pub shared_probe: bool,
    pub nu_source: NuSource,
    pub n_points: usize,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            h_s: 1e-3,
            h_d: 5e-4,
            h_x: 1e-3,
            hutchinson_m: 1,
            probe_dist: ProbeDist::Rademacher,
            projection: false,
            shared_probe: true,
            nu_source: NuSource::PerturbedData,
            n_points: 512,
        }
    }
}

impl ResidualConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("residual.h_s", self.h_s),
            ("residual.h_d", self.h_d),
            ("residual.h_x", self.h_x),
        ] {
            if !(v > 0.0 && v < 0.5) {
                return Err(Error::config(format!(
                    "{name} must lie in (0, 0.5), got {v}"
                )));
            }
        }
        if self.hutchinson_m == 0 {
            return Err(Error::config("residual.hutchinson_m must be at least 1"));
        }
        if self.n_points == 0 {
            return Err(Error::config("residual.n_points must be at least 1"));
        }
        Ok(())
    }
}

impl FlatConfig for ResidualConfig {
    fn from_config(cfg: &Config) -> Result<Self> {
        let d = ResidualConfig::default();
        let c = ResidualConfig {
            h_s: cfg.get_or("residual.h_s", d.h_s)?,
            h_d: cfg.get_or("residual.h_d", d.h_d)?,
            h_x: cfg.get_or("residual.h_x", d.h_x)?,
            hutchinson_m: cfg.get_or("residual.hutchinson_m", d.hutchinson_m)?,
            probe_dist: cfg.get_or("residual.probe_dist", d.probe_dist)?,
            projection: cfg.get_bool_or("residual.projection", d.projection)?,
            shared_probe: cfg.get_bool_or("residual.shared_probe", d.shared_probe)?,
            nu_source: cfg.get_or("residual.nu_source", d.nu_source)?,
            n_points: cfg.get_or("residual.n_points", d.n_points)?,
        };
        c.validate()?;
        Ok(c)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("residual.h_s", format!("{:?}", self.h_s));
        cfg.set("residual.h_d", format!("{:?}", self.h_d));
        cfg.set("residual.h_x", format!("{:?}", self.h_x));
        cfg.set("residual.hutchinson_m", self.hutchinson_m);
        cfg.set("residual.probe_dist", self.probe_dist);
        cfg.set("residual.projection", self.projection);
        cfg.set("residual.shared_probe", self.shared_probe);
        cfg.set("residual.nu_source", self.nu_source);
        cfg.set("residual.n_points", self.n_points);
    }
}

/// Three-point time stencil `∂_t α(t) ≈ c₋α(t₋) + c₀α(t) + c₊α(t₊)`.
///
/// Second order with unequal steps in the interior; first-order one-sided
/// near `0` and `t_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeStencil {
    pub t_minus: f64,
    pub t_plus: f64,
    pub c_minus: f64,
    pub c_zero: f64,
    pub c_plus: f64,
}

impl TimeStencil {
    pub fn new(t: f64, h_s: f64, h_d: f64, t_max: f64) -> Self {
        if t - h_s < 0.0 {
            TimeStencil {
                t_minus: t,
                t_plus: t + h_d,
                c_minus: 0.0,
                c_zero: -1.0 / h_d,
                c_plus: 1.0 / h_d,
            }
        } else if t + h_d > t_max {
            TimeStencil {
                t_minus: t - h_s,
                t_plus: t,
                c_minus: -1.0 / h_s,
                c_zero: 1.0 / h_s,
                c_plus: 0.0,
            }
        } else {
            let denom = h_s * h_d * (h_s + h_d);
            TimeStencil {
                t_minus: t - h_s,
                t_plus: t + h_d,
                c_minus: -h_d * h_d / denom,
                c_zero: (h_d * h_d - h_s * h_s) / denom,
                c_plus: h_s * h_s / denom,
            }
        }
    }

    pub fn apply(&self, alpha: impl Fn(f64) -> f64, t: f64) -> f64 {
        self.c_minus * alpha(self.t_minus)
            + self.c_zero * alpha(t)
            + self.c_plus * alpha(self.t_plus)
    }
}

/// Finite-difference `∂_t α(t)` with the residual's stencil.
pub fn fd_time_derivative(
    alpha: impl Fn(f64) -> f64,
    t: f64,
    h_s: f64,
    h_d: f64,
    t_max: f64,
) -> f64 {
    TimeStencil::new(t, h_s, h_d, t_max).apply(alpha, t)
}

/// The scalar `M(x, t)` given a value for `div s` (exact trace or surrogate).
pub fn fpe_bracket<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    x: &[f64],
    t: f64,
    div_s: f64,
) -> Result<f64> {
    sde.check_time(t)?;
    let s = field.eval(x, t)?;
    Ok(bracket_value(sde, x, t, &s, div_s))
}

fn bracket_value(sde: &SdeSpec, x: &[f64], t: f64, s: &[f64], div_s: f64) -> f64 {
    let g2 = sde.diffusion_sq(t);
    let a = sde.drift_rate(t);
    let sq: f64 = s.iter().map(|v| v * v).sum();
    let xs: f64 = x.iter().zip(s).map(|(a, b)| a * b).sum();
    0.5 * g2 * (div_s + sq) - a * xs - a * x.len() as f64
}

fn check_times(sde: &SdeSpec, ts: &[f64]) -> Result<()> {
    ts.iter().try_for_each(|&t| sde.check_time(t))
}

fn shifted(xs: &Array2<f64>, dir: &Array2<f64>, h: f64) -> Array2<f64> {
    xs + &(dir * h)
}

fn unit_direction(n: usize, d: usize, j: usize) -> Array2<f64> {
    let mut e = Array2::zeros((1, d));
    e[[0, j]] = 1.0;
    e.broadcast((n, d)).unwrap().to_owned()
}

/// `∂_t s` at every row by the time stencil.
fn time_derivative_term<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    xs: &Array2<f64>,
    ts: &[f64],
) -> Result<A::V> {
    let st: Vec<TimeStencil> = ts
        .iter()
        .map(|&t| TimeStencil::new(t, cfg.h_s, cfg.h_d, sde.t_max))
        .collect();
    let tm: Vec<f64> = st.iter().map(|s| s.t_minus).collect();
    let tp: Vec<f64> = st.iter().map(|s| s.t_plus).collect();
    let sm = ar.eval(xs, &tm)?;
    let s0 = ar.eval(xs, ts)?;
    let sp = ar.eval(xs, &tp)?;
    let cm: Vec<f64> = st.iter().map(|s| s.c_minus).collect();
    let c0: Vec<f64> = st.iter().map(|s| s.c_zero).collect();
    let cp: Vec<f64> = st.iter().map(|s| s.c_plus).collect();
    let a = ar.scale_rows(&sm, &cm);
    let b = ar.scale_rows(&s0, &c0);
    let c = ar.scale_rows(&sp, &cp);
    let ab = ar.add(&a, &b);
    Ok(ar.add(&ab, &c))
}

/// `M` at every row, with `div s` from the averaged single-probe surrogate.
fn bracket_estimated<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    xs: &Array2<f64>,
    ts: &[f64],
    probes: &[Array2<f64>],
) -> Result<A::V> {
    let h = cfg.h_x;
    let mut div: Option<A::V> = None;
    for v in probes {
        let plus = ar.eval(&shifted(xs, v, h), ts)?;
        let minus = ar.eval(&shifted(xs, v, -h), ts)?;
        let diff = ar.sub(&plus, &minus);
        let vc = ar.constant(v.clone());
        let dv = ar.row_dot(&vc, &diff);
        let dv = ar.scale(&dv, 1.0 / (2.0 * h * probes.len() as f64));
        div = Some(match div {
            None => dv,
            Some(acc) => ar.add(&acc, &dv),
        });
    }
    let div =
        div.ok_or_else(|| Error::Contract("at least one divergence probe is required".into()))?;
    let s = ar.eval(xs, ts)?;
    Ok(assemble_bracket(ar, sde, xs, ts, &s, &div))
}

fn assemble_bracket<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    ts: &[f64],
    s: &A::V,
    div: &A::V,
) -> A::V {
    let d = xs.ncols() as f64;
    let half_g2: Vec<f64> = ts.iter().map(|&t| 0.5 * sde.diffusion_sq(t)).collect();
    let sq = ar.row_dot(s, s);
    let inner = ar.add(div, &sq);
    let m = ar.scale_rows(&inner, &half_g2);
    let rates: Vec<f64> = ts.iter().map(|&t| sde.drift_rate(t)).collect();
    if rates.iter().all(|&a| a == 0.0) {
        return m;
    }
    let neg_a: Vec<f64> = rates.iter().map(|a| -a).collect();
    let xc = ar.constant(xs.clone());
    let xdot = ar.row_dot(&xc, s);
    let drift_term = ar.scale_rows(&xdot, &neg_a);
    let div_f = ar.constant(column(&rates.iter().map(|a| -a * d).collect::<Vec<_>>()));
    let m = ar.add(&m, &drift_term);
    ar.add(&m, &div_f)
}

/// Estimated residual at every row of `xs`, from forward evaluations only.
///
/// `probes` are the divergence probes (each `n × D`). With `direction`
/// given, returns `⟨ε, u⟩` as an `n × 1` value using a directional
/// difference of `M` along `u`; otherwise the full `n × D` residual with a
/// central difference per coordinate.
pub fn estimated_residual_batch<A: BatchArith>(
    ar: &mut A,
    sde: &SdeSpec,
    cfg: &ResidualConfig,
    xs: &Array2<f64>,
    ts: &[f64],
    probes: &[Array2<f64>],
    direction: Option<&Array2<f64>>,
) -> Result<A::V> {
    check_times(sde, ts)?;
    let h = cfg.h_x;
    let dt = time_derivative_term(ar, sde, cfg, xs, ts)?;
    match direction {
        Some(u) => {
            let mp = bracket_estimated(ar, sde, cfg, &shifted(xs, u, h), ts, probes)?;
            let mm = bracket_estimated(ar, sde, cfg, &shifted(xs, u, -h), ts, probes)?;
            let diff = ar.sub(&mp, &mm);
            let grad_u = ar.scale(&diff, 1.0 / (2.0 * h));
            let uc = ar.constant(u.clone());
            let dt_u = ar.row_dot(&uc, &dt);
            Ok(ar.sub(&dt_u, &grad_u))
        }
        None => {
            let (n, d) = xs.dim();
            let mut grad: Option<A::V> = None;
            for j in 0..d {
                let e = unit_direction(n, d, j);
                let mp = bracket_estimated(ar, sde, cfg, &shifted(xs, &e, h), ts, probes)?;
                let mm = bracket_estimated(ar, sde, cfg, &shifted(xs, &e, -h), ts, probes)?;
                let diff = ar.sub(&mp, &mm);
                let ec = ar.constant(e.clone());
                let comp = ar.mul(&diff, &ec);
                let comp = ar.scale(&comp, 1.0 / (2.0 * h));
                grad = Some(match grad {
                    None => comp,
                    Some(g) => ar.add(&g, &comp),
                });
            }
            let grad = grad.unwrap();
            Ok(ar.sub(&dt, &grad))
        }
    }
}

/// One draw of the estimated residual.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualEstimate {
    Full(Vec<f64>),
    Projected { value: f64, direction: Vec<f64> },
}

/// Estimated residual at one point of any field, drawing probes from `rng`.
pub fn estimated_residual<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    x: &[f64],
    t: f64,
    cfg: &ResidualConfig,
    rng: &mut R,
) -> Result<ResidualEstimate> {
    let d = x.len();
    let xs = Array2::from_shape_vec((1, d), x.to_vec()).unwrap();
    let (probes, direction) = draw_probes(cfg, rng, 1, d);
    let mut ar = FieldArith::new(field);
    let out = estimated_residual_batch(&mut ar, sde, cfg, &xs, &[t], &probes, direction.as_ref())?;
    check_finite(out.as_slice().unwrap(), "estimated residual")?;
    Ok(match direction {
        Some(u) => ResidualEstimate::Projected {
            value: out[[0, 0]],
            direction: u.row(0).to_vec(),
        },
        None => ResidualEstimate::Full(out.row(0).to_vec()),
    })
}

/// Divergence probes and, when projecting, the projection direction.
pub fn draw_probes<R: Rng + ?Sized>(
    cfg: &ResidualConfig,
    rng: &mut R,
    n: usize,
    d: usize,
) -> (Vec<Array2<f64>>, Option<Array2<f64>>) {
    let probes: Vec<Array2<f64>> = (0..cfg.hutchinson_m)
        .map(|_| cfg.probe_dist.draw_batch(rng, n, d))
        .collect();
    let direction = match (cfg.projection, cfg.shared_probe) {
        (false, _) => None,
        (true, true) => Some(probes[0].clone()),
        (true, false) => Some(cfg.probe_dist.draw_batch(rng, n, d)),
    };
    (probes, direction)
}

/// Single-probe divergence surrogate `v·(s(x+hv) − s(x−hv))/(2h)` at every row.
pub fn hutchinson_divergence<F: ScoreField + ?Sized>(
    field: &F,
    xs: &Array2<f64>,
    ts: &[f64],
    probes: &Array2<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    let plus = field.eval_batch(shifted(xs, probes, h).view(), ts)?;
    let minus = field.eval_batch(shifted(xs, probes, -h).view(), ts)?;
    Ok(((&plus - &minus) * probes)
        .sum_axis(Axis(1))
        .mapv(|v| v / (2.0 * h))
        .to_vec())
}

/// Exact-path `M` at every row, using the field's Jacobian trace.
fn bracket_exact<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    ts: &[f64],
) -> Result<Vec<f64>> {
    let s = field.eval_batch(xs.view(), ts)?;
    let div = field.divergence_batch(xs.view(), ts)?;
    Ok((0..xs.nrows())
        .map(|i| {
            bracket_value(
                sde,
                xs.row(i).as_slice().unwrap(),
                ts[i],
                s.row(i).as_slice().unwrap(),
                div[i],
            )
        })
        .collect())
}

/// Residual at every row with exact divergences inside `M`; `∂_t s` and
/// `∇_x M` by finite differences.
pub fn exact_residual_batch<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    ts: &[f64],
    cfg: &ResidualConfig,
) -> Result<Array2<f64>> {
    check_times(sde, ts)?;
    let xs = xs.as_standard_layout().to_owned();
    let (n, d) = xs.dim();
    let mut ar = FieldArith::new(field);
    let mut eps = time_derivative_term(&mut ar, sde, cfg, &xs, ts)?;
    let h = cfg.h_x;
    for j in 0..d {
        let e = unit_direction(n, d, j);
        let mp = bracket_exact(field, sde, &shifted(&xs, &e, h), ts)?;
        let mm = bracket_exact(field, sde, &shifted(&xs, &e, -h), ts)?;
        for i in 0..n {
            eps[[i, j]] -= (mp[i] - mm[i]) / (2.0 * h);
        }
    }
    check_finite(eps.as_slice().unwrap(), "exact residual")?;
    Ok(eps)
}

pub fn exact_residual<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    x: &[f64],
    t: f64,
    cfg: &ResidualConfig,
) -> Result<Vec<f64>> {
    let xs = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
    Ok(exact_residual_batch(field, sde, &xs, &[t], cfg)?
        .row(0)
        .to_vec())
}

#[cfg(test)]
mod tests;
