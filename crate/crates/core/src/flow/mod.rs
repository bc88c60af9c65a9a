//! Sampling and density evaluation: the reverse-time SDE and the
//! probability-flow ODE `dx/dt = f(x, t) − ½g(t)²·s(x, t)` with
//! log-likelihoods by the instantaneous change of variables.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};

use crate::analytic::GmmSpec;
use crate::config::{Config, FlatConfig};
use crate::csv;
use crate::error::{Error, Result};
use crate::field::{check_finite, ScoreField};
use crate::par;
use crate::residual::{hutchinson_divergence, ProbeDist};
use crate::rng;
use crate::sde::SdeSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Trajectories integrated together in one batched evaluation.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// From `t_min` to `t_max`.
    Forward,
    /// From `t_max` to `t_min`.
    Reverse,
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "forward" => Ok(Direction::Forward),
            "reverse" => Ok(Direction::Reverse),
            _ => Err(Error::config(format!("unknown direction {s:?}"))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Reverse => "reverse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivergenceMode {
    Exact,
    /// Central-difference Hutchinson surrogate with one Rademacher probe per
    /// trajectory, held fixed along it.
    Hutchinson,
}

impl FromStr for DivergenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(DivergenceMode::Exact),
            "hutchinson" => Ok(DivergenceMode::Hutchinson),
            _ => Err(Error::config(format!("unknown divergence mode {s:?}"))),
        }
    }
}

impl fmt::Display for DivergenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceMode::Exact => "exact",
            DivergenceMode::Hutchinson => "hutchinson",
        })
    }
}

/// Density assigned to the state at `t_max`.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    /// `N(0, std²·I)` with the SDE's terminal standard deviation.
    Sde,
    /// An explicit mixture, e.g. the exact terminal marginal of known data.
    Mixture(GmmSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdeConfig {
    pub n_steps: usize,
    pub direction: Direction,
    pub divergence_mode: DivergenceMode,
    pub t_min: f64,
    /// Step of the divergence surrogate in Hutchinson mode.
    pub h_x: f64,
    /// Root seed of the Hutchinson probes.
    pub probe_seed: u64,
    pub prior: Prior,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            n_steps: 500,
            direction: Direction::Forward,
            divergence_mode: DivergenceMode::Exact,
            t_min: 1e-3,
            h_x: 1e-3,
            probe_seed: 0,
            prior: Prior::Sde,
        }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps < 10 {
            return Err(Error::config("ode.n_steps must be at least 10"));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::config("ode.t_min must lie in (0, 1)"));
        }
        if !(self.h_x > 0.0) {
            return Err(Error::config("ode.h_x must be positive"));
        }
        Ok(())
    }
}

impl FlatConfig for OdeConfig {
    fn from_config(cfg: &Config) -> Result<Self> {
        let d = OdeConfig::default();
        let c = OdeConfig {
            n_steps: cfg.get_or("ode.n_steps", d.n_steps)?,
            direction: cfg.get_or("ode.direction", d.direction)?,
            divergence_mode: cfg.get_or("ode.divergence_mode", d.divergence_mode)?,
            t_min: cfg.get_or("ode.t_min", d.t_min)?,
            h_x: cfg.get_or("ode.h_x", d.h_x)?,
            probe_seed: cfg.get_or("ode.probe_seed", d.probe_seed)?,
            prior: Prior::Sde,
        };
        c.validate()?;
        Ok(c)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("ode.n_steps", self.n_steps);
        cfg.set("ode.direction", self.direction);
        cfg.set("ode.divergence_mode", self.divergence_mode);
        cfg.set("ode.t_min", format!("{:?}", self.t_min));
        cfg.set("ode.h_x", format!("{:?}", self.h_x));
        cfg.set("ode.probe_seed", self.probe_seed);
    }
}

/// `dx/dt` of the probability-flow ODE at every row.
fn velocity<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    t: f64,
) -> Result<Array2<f64>> {
    let n = xs.nrows();
    let s = field.eval_batch(xs.view(), &vec![t; n])?;
    Ok(xs * sde.drift_rate(t) - s * (0.5 * sde.diffusion_sq(t)))
}

/// Velocity and its divergence at every row.
fn velocity_and_divergence<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    t: f64,
    probes: Option<&Array2<f64>>,
    h_x: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, d) = xs.dim();
    let ts = vec![t; n];
    let a = sde.drift_rate(t);
    let half_g2 = 0.5 * sde.diffusion_sq(t);
    let v = velocity(field, sde, xs, t)?;
    let div_s = match probes {
        None => field.divergence_batch(xs.view(), &ts)?,
        Some(p) => hutchinson_divergence(field, xs, &ts, p, h_x)?,
    };
    let div = Array1::from_iter(div_s.into_iter().map(|ds| a * d as f64 - half_g2 * ds));
    Ok((v, div))
}

/// Time of step boundary `k`; exact at both endpoints.
fn node(cfg: &OdeConfig, sde: &SdeSpec, k: usize) -> f64 {
    let (a, b) = match cfg.direction {
        Direction::Forward => (cfg.t_min, sde.t_max),
        Direction::Reverse => (sde.t_max, cfg.t_min),
    };
    if k == cfg.n_steps {
        b
    } else {
        a + (b - a) * k as f64 / cfg.n_steps as f64
    }
}

/// Fixed-step RK4 integration of a batch of states.
pub fn prob_flow_ode<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    x_start: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let d = x_start.ncols();
    let rows = par::chunked(x_start.nrows(), CHUNK, |_, range| {
        let mut x = x_start.slice(ndarray::s![range, ..]).to_owned();
        for k in 0..cfg.n_steps {
            let (t, t_next) = (node(cfg, sde, k), node(cfg, sde, k + 1));
            let (dt, mid) = (t_next - t, 0.5 * (t + t_next));
            let k1 = velocity(field, sde, &x, t)?;
            let k2 = velocity(field, sde, &(&x + &(&k1 * (0.5 * dt))), mid)?;
            let k3 = velocity(field, sde, &(&x + &(&k2 * (0.5 * dt))), mid)?;
            let k4 = velocity(field, sde, &(&x + &(&k3 * dt)), t_next)?;
            x = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            check_finite(x.as_slice().unwrap(), "probability-flow state")?;
        }
        Ok(x.outer_iter().map(|r| r.to_vec()).collect())
    })?;
    Ok(stack(rows, d))
}

fn stack(rows: Vec<Vec<f64>>, d: usize) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodResult {
    /// `log p(x)` in nats.
    pub log_density: f64,
    /// `∫ div(f − ½g²s) dt` along the trajectory.
    pub delta_log: f64,
    pub terminal_log_prior: f64,
}

impl LikelihoodResult {
    pub fn bits_per_dim(&self, dim: usize) -> f64 {
        bits_per_dim(self.log_density, dim)
    }
}

/// `−log₂ p / D`.
pub fn bits_per_dim(log_density: f64, dim: usize) -> f64 {
    -log_density / (dim as f64 * std::f64::consts::LN_2)
}

fn log_prior(prior: &Prior, sde: &SdeSpec, x: &[f64]) -> f64 {
    match prior {
        Prior::Sde => {
            let var = sde.prior_std().powi(2);
            let sq: f64 = x.iter().map(|v| v * v).sum();
            -0.5 * x.len() as f64 * (LN_2PI + var.ln()) - 0.5 * sq / var
        }
        Prior::Mixture(g) => g.log_density(x),
    }
}

/// Log-density of the model at each row by integrating the ODE forward
/// from `t_min` together with the divergence of its velocity.
pub fn log_likelihood<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    xs: &Array2<f64>,
    cfg: &OdeConfig,
) -> Result<Vec<LikelihoodResult>> {
    cfg.validate()?;
    if let Prior::Mixture(g) = &cfg.prior {
        if g.dim() != xs.ncols() {
            return Err(Error::config("prior dimension differs from the data"));
        }
    }
    let fwd = OdeConfig {
        direction: Direction::Forward,
        ..cfg.clone()
    };
    par::chunked(xs.nrows(), CHUNK, |_, range| {
        let (n, d) = (range.len(), xs.ncols());
        let probes = match cfg.divergence_mode {
            DivergenceMode::Exact => None,
            DivergenceMode::Hutchinson => {
                let flat: Vec<f64> = range
                    .clone()
                    .flat_map(|i| {
                        let mut r = rng::indexed_substream(cfg.probe_seed, "ode/probe", i as u64);
                        ProbeDist::Rademacher.draw(&mut r, d)
                    })
                    .collect();
                Some(Array2::from_shape_vec((n, d), flat).unwrap())
            }
        };
        let mut x = xs.slice(ndarray::s![range, ..]).to_owned();
        let mut acc = Array1::<f64>::zeros(n);
        let p = probes.as_ref();
        for k in 0..fwd.n_steps {
            let (t, t_next) = (node(&fwd, sde, k), node(&fwd, sde, k + 1));
            let (dt, mid) = (t_next - t, 0.5 * (t + t_next));
            let (k1, l1) = velocity_and_divergence(field, sde, &x, t, p, cfg.h_x)?;
            let (k2, l2) =
                velocity_and_divergence(field, sde, &(&x + &(&k1 * (0.5 * dt))), mid, p, cfg.h_x)?;
            let (k3, l3) =
                velocity_and_divergence(field, sde, &(&x + &(&k2 * (0.5 * dt))), mid, p, cfg.h_x)?;
            let (k4, l4) =
                velocity_and_divergence(field, sde, &(&x + &(&k3 * dt)), t_next, p, cfg.h_x)?;
            x = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            acc = acc + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0);
            check_finite(x.as_slice().unwrap(), "likelihood state")?;
        }
        Ok(x.outer_iter()
            .zip(acc.iter())
            .map(|(x1, &delta)| {
                let lp = log_prior(&cfg.prior, sde, x1.as_slice().unwrap());
                LikelihoodResult {
                    log_density: lp + delta,
                    delta_log: delta,
                    terminal_log_prior: lp,
                }
            })
            .collect())
    })
}

/// Rectangular grid of `nx × ny` nodes including the corners.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn square(lo: f64, hi: f64, n: usize) -> Self {
        Self {
            x_min: lo,
            x_max: hi,
            y_min: lo,
            y_max: hi,
            nx: n,
            ny: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 2 || self.ny < 2 || !(self.x_min < self.x_max) || !(self.y_min < self.y_max) {
            return Err(Error::config(
                "grid needs at least 2×2 nodes and increasing bounds",
            ));
        }
        Ok(())
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn xs(&self) -> Vec<f64> {
        Self::axis(self.x_min, self.x_max, self.nx)
    }

    pub fn ys(&self) -> Vec<f64> {
        Self::axis(self.y_min, self.y_max, self.ny)
    }

    /// All nodes, `x1` varying fastest.
    pub fn points(&self) -> Array2<f64> {
        let (xs, ys) = (self.xs(), self.ys());
        Array2::from_shape_fn((self.nx * self.ny, 2), |(i, j)| {
            if j == 0 {
                xs[i % self.nx]
            } else {
                ys[i / self.nx]
            }
        })
    }

    pub fn cell_area(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64 * (self.y_max - self.y_min)
            / (self.ny - 1) as f64
    }
}

impl FlatConfig for GridSpec {
    fn from_config(cfg: &Config) -> Result<Self> {
        let g = GridSpec {
            x_min: cfg.get_or("grid.x_min", -8.0)?,
            x_max: cfg.get_or("grid.x_max", 8.0)?,
            y_min: cfg.get_or("grid.y_min", -8.0)?,
            y_max: cfg.get_or("grid.y_max", 8.0)?,
            nx: cfg.get_or("grid.nx", 50)?,
            ny: cfg.get_or("grid.ny", 50)?,
        };
        g.validate()?;
        Ok(g)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("grid.x_min", format!("{:?}", self.x_min));
        cfg.set("grid.x_max", format!("{:?}", self.x_max));
        cfg.set("grid.y_min", format!("{:?}", self.y_min));
        cfg.set("grid.y_max", format!("{:?}", self.y_max));
        cfg.set("grid.nx", self.nx);
        cfg.set("grid.ny", self.ny);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub grid: GridSpec,
    /// One value per node, in the order of [`GridSpec::points`].
    pub log_density: Vec<f64>,
}

impl DensityGrid {
    pub fn to_csv(&self) -> String {
        let pts = self.grid.points();
        csv::table(
            &["x1", "x2", "log_density"],
            self.log_density
                .iter()
                .enumerate()
                .map(|(i, lp)| vec![csv::num(pts[[i, 0]]), csv::num(pts[[i, 1]]), csv::num(*lp)]),
        )
    }

    /// Trapezoid integral of `exp(log_density)` over the grid.
    pub fn mass(&self) -> f64 {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let mut total = 0.0;
        for j in 0..ny {
            for i in 0..nx {
                let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                total += wx * wy * self.log_density[j * nx + i].exp();
            }
        }
        total * self.grid.cell_area()
    }

    /// Mean `|log p − log q|` over the nodes.
    pub fn mean_abs_error(&self, other: &DensityGrid) -> f64 {
        let n = self.log_density.len() as f64;
        self.log_density
            .iter()
            .zip(&other.log_density)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// `KL(self ‖ other)` between the two grids renormalized as discrete distributions.
    pub fn kl_to(&self, other: &DensityGrid) -> f64 {
        let p = normalized_log(&self.log_density);
        let q = normalized_log(&other.log_density);
        p.iter().zip(&q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
    }
}

fn normalized_log(log_values: &[f64]) -> Vec<f64> {
    let m = log_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = m + log_values.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    log_values.iter().map(|v| v - z).collect()
}

/// Model log-density at every node of a 2-D grid.
pub fn density_grid<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    grid: &GridSpec,
    cfg: &OdeConfig,
) -> Result<DensityGrid> {
    grid.validate()?;
    if field.dim() != 2 {
        return Err(Error::config("density grids are two-dimensional"));
    }
    let res = log_likelihood(field, sde, &grid.points(), cfg)?;
    Ok(DensityGrid {
        grid: grid.clone(),
        log_density: res.into_iter().map(|r| r.log_density).collect(),
    })
}

/// Ground-truth log-density of a mixture on the same grid.
pub fn gmm_density_grid(gmm: &GmmSpec, grid: &GridSpec) -> DensityGrid {
    let pts = grid.points();
    DensityGrid {
        grid: grid.clone(),
        log_density: pts
            .outer_iter()
            .map(|x| gmm.log_density(x.as_slice().unwrap()))
            .collect(),
    }
}

/// Final states of the reverse-time SDE, with a flag for each sample whose
/// state became non-finite.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub samples: Array2<f64>,
    pub failed: Vec<bool>,
}

impl SampleSet {
    pub fn n_failed(&self) -> usize {
        self.failed.iter().filter(|&&f| f).count()
    }

    /// Rows that finished with finite states.
    pub fn finite(&self) -> Array2<f64> {
        let keep: Vec<usize> = (0..self.failed.len())
            .filter(|&i| !self.failed[i])
            .collect();
        self.samples.select(Axis(0), &keep)
    }

    pub fn to_csv(&self) -> String {
        let d = self.samples.ncols();
        let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        csv::table(
            &header,
            self.samples
                .outer_iter()
                .map(|r| r.iter().map(|v| csv::num(*v)).collect()),
        )
    }
}

/// Samples per random stream in the reverse sampler.
const SAMPLE_CHUNK: usize = 256;

/// Euler–Maruyama for `dx = [f − g²s] dt + g dw̄` from `t_max` down to
/// `t_min`, started from the SDE's Gaussian prior.
pub fn reverse_sde_sample<F: ScoreField + ?Sized>(
    field: &F,
    sde: &SdeSpec,
    n_steps: usize,
    n_samples: usize,
    t_min: f64,
    seed: u64,
) -> Result<SampleSet> {
    if n_steps == 0 {
        return Err(Error::config("sampler needs at least one step"));
    }
    if !(t_min > 0.0 && t_min < sde.t_max) {
        return Err(Error::config("sampler t_min must lie in (0, t_max)"));
    }
    let d = field.dim();
    let dt = (sde.t_max - t_min) / n_steps as f64;
    let prior_std = sde.prior_std();
    let rows = par::chunked(n_samples, SAMPLE_CHUNK, |chunk, range| {
        let n = range.len();
        let mut r = rng::indexed_substream(seed, "sample/chunk", chunk as u64);
        let mut x = Array2::from_shape_fn((n, d), |_| prior_std * rng::normal(&mut r));
        let mut failed = vec![false; n];
        for k in 0..n_steps {
            let t = (sde.t_max - k as f64 * dt).min(sde.t_max);
            let s = field.eval_batch(x.view(), &vec![t; n])?;
            let a = sde.drift_rate(t);
            let g2 = sde.diffusion_sq(t);
            let g = g2.sqrt();
            for i in 0..n {
                for j in 0..d {
                    let z = rng::normal(&mut r);
                    if failed[i] {
                        continue;
                    }
                    let xi = x[[i, j]];
                    x[[i, j]] = xi - (a * xi - g2 * s[[i, j]]) * dt + g * dt.sqrt() * z;
                }
                if !failed[i] && x.row(i).iter().any(|v| !v.is_finite()) {
                    failed[i] = true;
                }
            }
            // Failed rows are parked at the origin so the batch stays evaluable.
            for i in 0..n {
                if failed[i] {
                    x.row_mut(i).fill(0.0);
                }
            }
        }
        Ok((0..n)
            .map(|i| {
                let row = if failed[i] {
                    vec![f64::NAN; d]
                } else {
                    x.row(i).to_vec()
                };
                (row, failed[i])
            })
            .collect())
    })?;
    let failed = rows.iter().map(|r| r.1).collect();
    Ok(SampleSet {
        samples: stack(rows.into_iter().map(|r| r.0).collect(), d),
        failed,
    })
}

/// Fraction of samples nearest to each component mean.
pub fn component_fractions(samples: &Array2<f64>, gmm: &GmmSpec) -> Vec<f64> {
    let mut counts = vec![0usize; gmm.n_components()];
    for x in samples.outer_iter() {
        let nearest = gmm
            .means
            .iter()
            .map(|m| {
                m.iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            })
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        counts[nearest] += 1;
    }
    let n = samples.nrows().max(1) as f64;
    counts.into_iter().map(|c| c as f64 / n).collect()
}
