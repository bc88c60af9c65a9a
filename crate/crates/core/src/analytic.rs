//! Isotropic Gaussian mixtures: exact density, score and sampling, and the
//! closed-form marginals they evolve into under any [`SdeSpec`].

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{join_list, Config, FlatConfig};
use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::rng;
use crate::sde::SdeSpec;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component isotropic variances `σ_k²`.
    pub variances: Vec<f64>,
}

impl Default for GmmSpec {
    /// `0.2·N((−5,−5), I) + 0.8·N((5,5), I)`.
    fn default() -> Self {
        Self {
            weights: vec![0.2, 0.8],
            means: vec![vec![-5.0, -5.0], vec![5.0, 5.0]],
            variances: vec![1.0, 1.0],
        }
    }
}

impl GmmSpec {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let g = Self {
            weights,
            means,
            variances,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            variances: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.variances.len() != k {
            return Err(Error::config(
                "gmm: weights, means and variances must have equal non-zero length",
            ));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::config(
                "gmm: all means must share a non-zero dimension",
            ));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::config("gmm: weights must be positive"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("gmm: weights must sum to 1"));
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config("gmm: variances must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    fn component_log_terms(&self, x: &[f64], out: &mut Vec<f64>) {
        let d = x.len() as f64;
        out.clear();
        for ((w, mu), &v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            out.push(w.ln() - 0.5 * d * (LN_2PI + v.ln()) - 0.5 * sq / v);
        }
    }

    /// Turns log terms into normalized responsibilities in place; returns log-sum-exp.
    fn normalize(log_terms: &mut [f64]) -> f64 {
        let max = log_terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in log_terms.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        for l in log_terms.iter_mut() {
            *l /= total;
        }
        max + total.ln()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.n_components());
        self.component_log_terms(x, &mut terms);
        Self::normalize(&mut terms)
    }

    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut terms = Vec::with_capacity(self.n_components());
        self.component_log_terms(x, &mut terms);
        Self::normalize(&mut terms);
        terms
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut s = vec![0.0; x.len()];
        for ((rk, mu), &v) in r.iter().zip(&self.means).zip(&self.variances) {
            for (si, (m, xi)) in s.iter_mut().zip(mu.iter().zip(x)) {
                *si += rk * (m - xi) / v;
            }
        }
        s
    }

    /// Hessian of the log density, `Σ r_k(u_k u_kᵀ − I/σ_k²) − s sᵀ` with `u_k = (μ_k − x)/σ_k²`.
    pub fn score_jacobian(&self, x: &[f64]) -> Array2<f64> {
        let d = x.len();
        let r = self.responsibilities(x);
        let mut jac = Array2::<f64>::zeros((d, d));
        let mut s = vec![0.0; d];
        let mut u = vec![0.0; d];
        for ((rk, mu), &v) in r.iter().zip(&self.means).zip(&self.variances) {
            for i in 0..d {
                u[i] = (mu[i] - x[i]) / v;
                s[i] += rk * u[i];
            }
            for i in 0..d {
                jac[[i, i]] -= rk / v;
                for j in 0..d {
                    jac[[i, j]] += rk * u[i] * u[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                jac[[i, j]] -= s[i] * s[j];
            }
        }
        jac
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.sample_component(rng);
        let sd = self.variances[k].sqrt();
        self.means[k]
            .iter()
            .map(|m| m + sd * rng::normal(rng))
            .collect()
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        self.weights.len() - 1
    }

    /// Exact marginal at time `t` of the SDE started from this mixture.
    pub fn perturb(&self, sde: &SdeSpec, t: f64) -> Result<GmmSpec> {
        let k = sde.kernel_stats(t)?;
        Ok(GmmSpec {
            weights: self.weights.clone(),
            means: self
                .means
                .iter()
                .map(|mu| mu.iter().map(|m| k.mean_coef * m).collect())
                .collect(),
            variances: self
                .variances
                .iter()
                .map(|v| k.mean_coef * k.mean_coef * v + k.var())
                .collect(),
        })
    }

    /// Convolution with `N(0, extra_var·I)`.
    pub fn convolve(&self, extra_var: f64) -> GmmSpec {
        let mut g = self.clone();
        for v in &mut g.variances {
            *v += extra_var;
        }
        g
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, mu) in self.weights.iter().zip(&self.means) {
            for (mi, x) in m.iter_mut().zip(mu) {
                *mi += w * x;
            }
        }
        m
    }
}

impl FlatConfig for GmmSpec {
    fn from_config(cfg: &Config) -> Result<Self> {
        let d = GmmSpec::default();
        let weights = cfg.get_list::<f64>("gmm.weights")?.unwrap_or(d.weights);
        let variances = cfg.get_list::<f64>("gmm.variances")?.unwrap_or(d.variances);
        let means = match cfg.get_list::<f64>("gmm.means")? {
            None => d.means,
            Some(flat) => {
                let k = weights.len();
                if k == 0 || flat.len() % k != 0 {
                    return Err(Error::config(
                        "gmm.means length must be a multiple of the component count",
                    ));
                }
                flat.chunks(flat.len() / k).map(<[f64]>::to_vec).collect()
            }
        };
        GmmSpec::new(weights, means, variances)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("gmm.weights", join_list(&self.weights));
        let flat: Vec<f64> = self.means.iter().flatten().copied().collect();
        cfg.set("gmm.means", join_list(&flat));
        cfg.set("gmm.variances", join_list(&self.variances));
    }
}

/// Ground-truth score `∇_x log q_t(x)` of a mixture diffused by an SDE.
#[derive(Debug, Clone)]
pub struct AnalyticScoreField {
    pub base: GmmSpec,
    pub sde: SdeSpec,
}

impl AnalyticScoreField {
    pub fn new(base: GmmSpec, sde: SdeSpec) -> Self {
        Self { base, sde }
    }

    pub fn marginal(&self, t: f64) -> Result<GmmSpec> {
        self.base.perturb(&self.sde, t)
    }

    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.marginal(t)?.score(x))
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.marginal(t)?.log_density(x))
    }

    /// Exact `∂_t s(x, t)`, by differentiating the marginal's closed form in `t`.
    pub fn time_derivative(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let k = self.sde.kernel_stats(t)?;
        let (dm, dvar) = self.sde.kernel_rates(t);
        let d = x.len();
        let m = k.mean_coef;
        let n = self.base.n_components();

        let mut log_terms = Vec::with_capacity(n);
        let mut dlog = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        let mut dus = Vec::with_capacity(n);
        for ((w, mu), &sig2) in self
            .base
            .weights
            .iter()
            .zip(&self.base.means)
            .zip(&self.base.variances)
        {
            let v = m * m * sig2 + k.var();
            let dv = 2.0 * m * dm * sig2 + dvar;
            let diff: Vec<f64> = x.iter().zip(mu).map(|(xi, mi)| xi - m * mi).collect();
            let sq: f64 = diff.iter().map(|a| a * a).sum();
            let cross: f64 = diff.iter().zip(mu).map(|(a, mi)| a * dm * mi).sum();
            log_terms.push(w.ln() - 0.5 * d as f64 * (LN_2PI + v.ln()) - 0.5 * sq / v);
            dlog.push(-0.5 * d as f64 * dv / v + cross / v + 0.5 * sq * dv / (v * v));
            us.push(diff.iter().map(|a| -a / v).collect::<Vec<_>>());
            dus.push(
                diff.iter()
                    .zip(mu)
                    .map(|(a, mi)| dm * mi / v + a * dv / (v * v))
                    .collect::<Vec<_>>(),
            );
        }
        GmmSpec::normalize(&mut log_terms);
        let r = log_terms;
        let mean_dlog: f64 = r.iter().zip(&dlog).map(|(a, b)| a * b).sum();
        let mut ds = vec![0.0; d];
        for c in 0..n {
            let dr = r[c] * (dlog[c] - mean_dlog);
            for i in 0..d {
                ds[i] += dr * us[c][i] + r[c] * dus[c][i];
            }
        }
        Ok(ds)
    }
}

impl ScoreField for AnalyticScoreField {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(xs.raw_dim());
        let mut cached: Option<(f64, GmmSpec)> = None;
        for (i, (x, &t)) in xs.rows().into_iter().zip(ts).enumerate() {
            if cached.as_ref().map(|c| c.0) != Some(t) {
                cached = Some((t, self.marginal(t)?));
            }
            let g = &cached.as_ref().unwrap().1;
            let s = g.score(&x.to_vec());
            out.row_mut(i).assign(&ndarray::ArrayView1::from(&s));
        }
        Ok(out)
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        Ok(self.marginal(t)?.score_jacobian(x))
    }

    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.score(x, t)
    }
}
