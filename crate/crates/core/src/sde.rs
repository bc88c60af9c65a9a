//! Linear-drift forward diffusions: variance exploding (VE), variance
//! preserving (VP) and reciprocal variance exploding (RVE).
//!
//! All three have a drift of the form `a(t)·x` and an isotropic diffusion
//! `g(t)`, so the transition kernel is Gaussian with mean `m(t)·x₀` and
//! per-coordinate variance `std(t)²`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, FlatConfig};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdeKind {
    VE,
    VP,
    RVE,
}

impl fmt::Display for SdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SdeKind::VE => "VE",
            SdeKind::VP => "VP",
            SdeKind::RVE => "RVE",
        })
    }
}

impl FromStr for SdeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VE" => Ok(SdeKind::VE),
            "VP" => Ok(SdeKind::VP),
            "RVE" => Ok(SdeKind::RVE),
            _ => Err(Error::config(format!("unknown SDE kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub kind: SdeKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eps_rve: f64,
    pub t_max: f64,
}

/// Mean scaling and standard deviation of the transition kernel `q_{0t}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelStats {
    pub mean_coef: f64,
    pub std: f64,
}

impl KernelStats {
    pub fn var(&self) -> f64 {
        self.std * self.std
    }
}

impl SdeSpec {
    pub fn new(kind: SdeKind) -> Self {
        Self {
            kind,
            sigma_min: 0.01,
            sigma_max: 50.0,
            beta_min: 0.1,
            beta_max: 20.0,
            eps_rve: 0.01,
            t_max: 1.0,
        }
    }

    pub fn ve() -> Self {
        Self::new(SdeKind::VE)
    }

    pub fn vp() -> Self {
        Self::new(SdeKind::VP)
    }

    pub fn rve() -> Self {
        Self::new(SdeKind::RVE)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sde.sigma_min", self.sigma_min),
            ("sde.sigma_max", self.sigma_max),
            ("sde.beta_min", self.beta_min),
            ("sde.beta_max", self.beta_max),
            ("sde.eps_rve", self.eps_rve),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.sigma_min >= self.sigma_max {
            return Err(Error::config("sde.sigma_min must be below sde.sigma_max"));
        }
        if self.beta_min >= self.beta_max {
            return Err(Error::config("sde.beta_min must be below sde.beta_max"));
        }
        if self.t_max != 1.0 {
            return Err(Error::config("t_max is fixed to 1"));
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.t_max).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                t_max: self.t_max,
            })
        }
    }

    fn log_ratio(&self) -> f64 {
        (self.sigma_max / self.sigma_min).ln()
    }

    /// VP noise rate `β(t)`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// Noise level `σ(t)` of the VE/RVE parametrizations.
    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::VE => self.sigma_min * (t * self.log_ratio()).exp(),
            SdeKind::RVE if t > 0.0 => {
                self.sigma_max * (-self.eps_rve * self.log_ratio() / t).exp()
            }
            SdeKind::RVE => 0.0,
            SdeKind::VP => panic!("sigma(t) is defined for VE and RVE only"),
        }
    }

    /// Scalar `a(t)` with `f(x, t) = a(t)·x`.
    pub fn drift_rate(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::VE | SdeKind::RVE => 0.0,
            SdeKind::VP => -0.5 * self.beta(t),
        }
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        let a = self.drift_rate(t);
        Ok(x.iter().map(|xi| a * xi).collect())
    }

    /// `g(t)²`, without the domain check.
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        match self.kind {
            SdeKind::VE => {
                let s = self.sigma(t);
                2.0 * self.log_ratio() * s * s
            }
            SdeKind::VP => self.beta(t),
            SdeKind::RVE => {
                if t <= 0.0 {
                    0.0
                } else {
                    let s = self.sigma(t);
                    s * s * 2.0 * self.eps_rve * self.log_ratio() / (t * t)
                }
            }
        }
    }

    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.diffusion_sq(t).sqrt())
    }

    pub fn kernel_stats(&self, t: f64) -> Result<KernelStats> {
        self.check_time(t)?;
        Ok(self.kernel_stats_unchecked(t))
    }

    pub(crate) fn kernel_stats_unchecked(&self, t: f64) -> KernelStats {
        match self.kind {
            SdeKind::VE => {
                // σ²(t) − σ²(0), exactly zero at t = 0.
                let var = self.sigma_min.powi(2) * (2.0 * t * self.log_ratio()).exp_m1();
                KernelStats {
                    mean_coef: 1.0,
                    std: var.max(0.0).sqrt(),
                }
            }
            SdeKind::RVE => KernelStats {
                mean_coef: 1.0,
                std: self.sigma(t),
            },
            SdeKind::VP => {
                let log_m =
                    -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min;
                let var = -(2.0 * log_m).exp_m1();
                KernelStats {
                    mean_coef: log_m.exp(),
                    std: var.max(0.0).sqrt(),
                }
            }
        }
    }

    /// Time derivatives `(dm/dt, d std²/dt)` of the kernel statistics.
    pub fn kernel_rates(&self, t: f64) -> (f64, f64) {
        match self.kind {
            SdeKind::VE | SdeKind::RVE => (0.0, self.diffusion_sq(t)),
            SdeKind::VP => {
                let m = self.kernel_stats_unchecked(t).mean_coef;
                let b = self.beta(t);
                (-0.5 * b * m, b * m * m)
            }
        }
    }

    /// Standard deviation of the Gaussian prior used at `t = t_max`.
    pub fn prior_std(&self) -> f64 {
        match self.kind {
            SdeKind::VP => 1.0,
            _ => self.kernel_stats_unchecked(self.t_max).std,
        }
    }

    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let k = self.kernel_stats(t)?;
        Ok(x0
            .iter()
            .map(|&x| k.mean_coef * x + k.std * rng::normal(rng))
            .collect())
    }

    /// Score of the transition kernel, `∇_{x_t} log q_{0t}(x_t | x₀)`.
    pub fn transition_score(&self, x0: &[f64], xt: &[f64], t: f64) -> Result<Vec<f64>> {
        let k = self.kernel_stats(t)?;
        if k.std == 0.0 {
            return Err(Error::SingularKernel { t });
        }
        let inv_var = 1.0 / k.var();
        Ok(x0
            .iter()
            .zip(xt)
            .map(|(&a, &b)| -(b - k.mean_coef * a) * inv_var)
            .collect())
    }

    /// Simulates the forward SDE from 0 to `t_max` with uniform steps.
    pub fn euler_maruyama_forward<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.euler_maruyama_until(x0, self.t_max, n_steps, rng)
    }

    pub fn euler_maruyama_until<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        t_end: f64,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.check_time(t_end)?;
        euler_maruyama(
            |x, t| x * self.drift_rate(t),
            |t| self.diffusion_sq(t).sqrt(),
            x0,
            0.0,
            t_end,
            n_steps,
            rng,
        )
    }
}

/// Euler–Maruyama for `dx = f(x, t) dt + g(t) dw` with a coordinate-wise drift.
pub fn euler_maruyama<R, F, G>(
    drift: F,
    diffusion: G,
    x0: &[f64],
    t0: f64,
    t1: f64,
    n_steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: Fn(f64, f64) -> f64,
    G: Fn(f64) -> f64,
{
    if n_steps == 0 {
        return Err(Error::config("n_steps must be at least 1"));
    }
    let dt = (t1 - t0) / n_steps as f64;
    let sqrt_dt = dt.abs().sqrt();
    let mut x = x0.to_vec();
    for i in 0..n_steps {
        let t = t0 + i as f64 * dt;
        let g = diffusion(t);
        for xi in x.iter_mut() {
            *xi += drift(*xi, t) * dt + g * sqrt_dt * rng::normal(rng);
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("euler_maruyama"));
    }
    Ok(x)
}

impl FlatConfig for SdeSpec {
    fn from_config(cfg: &Config) -> Result<Self> {
        let kind: SdeKind = cfg.get_or("sde.kind", SdeKind::VE)?;
        let d = SdeSpec::new(kind);
        let spec = SdeSpec {
            kind,
            sigma_min: cfg.get_or("sde.sigma_min", d.sigma_min)?,
            sigma_max: cfg.get_or("sde.sigma_max", d.sigma_max)?,
            beta_min: cfg.get_or("sde.beta_min", d.beta_min)?,
            beta_max: cfg.get_or("sde.beta_max", d.beta_max)?,
            eps_rve: cfg.get_or("sde.eps_rve", d.eps_rve)?,
            t_max: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("sde.kind", self.kind);
        cfg.set("sde.sigma_min", format!("{:?}", self.sigma_min));
        cfg.set("sde.sigma_max", format!("{:?}", self.sigma_max));
        cfg.set("sde.beta_min", format!("{:?}", self.beta_min));
        cfg.set("sde.beta_max", format!("{:?}", self.beta_max));
        cfg.set("sde.eps_rve", format!("{:?}", self.eps_rve));
    }
}
