//! The trainable score model `s_θ(x, t)`.
//!
//! A fully connected network over `concat(x, fourier(t))` with smooth
//! activations. Parameters live in one flat vector, layer-major, and within
//! each layer the weights (row-major, shape `fan_in × fan_out`) come before
//! the biases. The Gaussian Fourier frequencies are fixed at initialization
//! and stored separately.

mod adam;
mod checkpoint;
mod tape;

pub use adam::Adam;
pub use checkpoint::CHECKPOINT_VERSION;
pub use tape::{Tape, Var};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{Config, FlatConfig};
use crate::error::{Error, Result};
use crate::field::ScoreField;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::SiLU => a / (1.0 + (-a).exp()),
            Activation::Tanh => a.tanh(),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::SiLU => {
                let sig = 1.0 / (1.0 + (-a).exp());
                sig * (1.0 + a * (1.0 - sig))
            }
            Activation::Tanh => {
                let th = a.tanh();
                1.0 - th * th
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "silu" | "swish" => Ok(Activation::SiLU),
            "tanh" => Ok(Activation::Tanh),
            _ => Err(Error::config(format!("unknown activation {s:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::SiLU => "SiLU",
            Activation::Tanh => "Tanh",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub fourier_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_widths: vec![128, 128],
            time_embed_dim: 64,
            activation: Activation::SiLU,
            fourier_scale: 30.0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("net.input_dim must be positive"));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::config(
                "net.hidden_widths must be non-empty and positive",
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config(
                "net.time_embed_dim must be even and at least 2",
            ));
        }
        if !(self.fourier_scale > 0.0) {
            return Err(Error::config("net.fourier_scale must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim + self.time_embed_dim];
        sizes.extend(&self.hidden_widths);
        sizes.push(self.input_dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

impl FlatConfig for NetConfig {
    fn from_config(cfg: &Config) -> Result<Self> {
        let d = NetConfig::default();
        let c = NetConfig {
            input_dim: cfg.get_or("net.input_dim", d.input_dim)?,
            hidden_widths: cfg
                .get_list("net.hidden_widths")?
                .unwrap_or(d.hidden_widths),
            time_embed_dim: cfg.get_or("net.time_embed_dim", d.time_embed_dim)?,
            activation: cfg.get_or("net.activation", d.activation)?,
            fourier_scale: cfg.get_or("net.fourier_scale", d.fourier_scale)?,
        };
        c.validate()?;
        Ok(c)
    }

    fn write_config(&self, cfg: &mut Config) {
        cfg.set("net.input_dim", self.input_dim);
        let widths: Vec<String> = self.hidden_widths.iter().map(ToString::to_string).collect();
        cfg.set("net.hidden_widths", widths.join(","));
        cfg.set("net.time_embed_dim", self.time_embed_dim);
        cfg.set("net.activation", self.activation);
        cfg.set("net.fourier_scale", format!("{:?}", self.fourier_scale));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    config: NetConfig,
    params: Vec<f64>,
    fourier: Vec<f64>,
    seed: u64,
    offsets: Vec<LayerOffsets>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerOffsets {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

fn layer_offsets(config: &NetConfig) -> Vec<LayerOffsets> {
    let mut at = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let o = LayerOffsets {
                fan_in,
                fan_out,
                weights: at,
                bias: at + fan_in * fan_out,
            };
            at += fan_in * fan_out + fan_out;
            o
        })
        .collect()
}

/// Activations of one batched forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    /// Inputs to each affine layer; `inputs[0]` is `concat(x, fourier(t))`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    pub(crate) output: Array2<f64>,
}

impl ScoreNet {
    /// Fan-in scaled uniform weights and Fourier frequencies drawn from
    /// `N(0, fourier_scale²)`, all from `seed`.
    pub fn init(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::substream(seed, "net/init");
        let offsets = layer_offsets(&config);
        let mut params = vec![0.0; config.param_count()];
        for o in &offsets {
            let bound = 1.0 / (o.fan_in as f64).sqrt();
            for p in &mut params[o.weights..o.bias + o.fan_out] {
                *p = rng::uniform(&mut r, -bound, bound);
            }
        }
        let mut fr = rng::substream(seed, "net/fourier");
        let fourier = (0..config.time_embed_dim / 2)
            .map(|_| config.fourier_scale * rng::normal(&mut fr))
            .collect();
        Ok(Self {
            offsets,
            config,
            params,
            fourier,
            seed,
        })
    }

    /// Network with all weights and biases zero; evaluates to `0` everywhere.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        let mut net = Self::init(config, 0)?;
        net.params.iter_mut().for_each(|p| *p = 0.0);
        Ok(net)
    }

    pub(crate) fn from_parts(
        config: NetConfig,
        seed: u64,
        fourier: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if fourier.len() != config.time_embed_dim / 2 {
            return Err(Error::Contract(
                "Fourier frequency count does not match the config".into(),
            ));
        }
        if params.len() != config.param_count() {
            return Err(Error::Contract(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            offsets: layer_offsets(&config),
            config,
            params,
            fourier,
            seed,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn fourier(&self) -> &[f64] {
        &self.fourier
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn weights(&self, layer: usize) -> ArrayView2<'_, f64> {
        let o = self.offsets[layer];
        ArrayView2::from_shape((o.fan_in, o.fan_out), &self.params[o.weights..o.bias]).unwrap()
    }

    fn bias(&self, layer: usize) -> ndarray::ArrayView1<'_, f64> {
        let o = self.offsets[layer];
        ndarray::ArrayView1::from(&self.params[o.bias..o.bias + o.fan_out])
    }

    fn input_matrix(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let d = self.config.input_dim;
        if xs.ncols() != d || xs.nrows() != ts.len() {
            return Err(Error::Contract(format!(
                "batch shape {:?} with {} times does not fit input dimension {d}",
                xs.shape(),
                ts.len()
            )));
        }
        if xs.iter().chain(ts).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("score network input"));
        }
        let half = self.fourier.len();
        let mut z = Array2::zeros((xs.nrows(), d + 2 * half));
        z.slice_mut(s![.., ..d]).assign(&xs);
        for (mut row, &t) in z.rows_mut().into_iter().zip(ts) {
            for (j, f) in self.fourier.iter().enumerate() {
                let (sin, cos) = (2.0 * PI * f * t).sin_cos();
                row[d + j] = sin;
                row[d + half + j] = cos;
            }
        }
        Ok(z)
    }

    pub(crate) fn forward_cached(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<ForwardCache> {
        let act = self.config.activation;
        let n_layers = self.offsets.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers - 1);
        inputs.push(self.input_matrix(xs, ts)?);
        for l in 0..n_layers - 1 {
            let a = inputs[l].dot(&self.weights(l)) + &self.bias(l);
            inputs.push(a.mapv(|v| act.apply(v)));
            pre.push(a);
        }
        let output =
            inputs[n_layers - 1].dot(&self.weights(n_layers - 1)) + &self.bias(n_layers - 1);
        Ok(ForwardCache {
            inputs,
            pre,
            output,
        })
    }

    pub fn forward(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        let act = self.config.activation;
        let n_layers = self.offsets.len();
        let mut z = self.input_matrix(xs, ts)?;
        for l in 0..n_layers - 1 {
            let mut a = z.dot(&self.weights(l));
            a += &self.bias(l);
            a.mapv_inplace(|v| act.apply(v));
            z = a;
        }
        Ok(z.dot(&self.weights(n_layers - 1)) + &self.bias(n_layers - 1))
    }

    /// Adds `d(Σ cotangent ⊙ output)/dθ` for a cached forward pass into `grad`.
    pub(crate) fn backward_into(
        &self,
        cache: &ForwardCache,
        cotangent: &Array2<f64>,
        grad: &mut [f64],
    ) {
        let act = self.config.activation;
        let n_layers = self.offsets.len();
        let mut g = cotangent.clone();
        for l in (0..n_layers).rev() {
            if l < n_layers - 1 {
                ndarray::Zip::from(&mut g)
                    .and(&cache.pre[l])
                    .for_each(|gi, &a| *gi *= act.derivative(a));
            }
            let o = self.offsets[l];
            let dw = cache.inputs[l].t().dot(&g);
            for (dst, src) in grad[o.weights..o.bias].iter_mut().zip(dw.iter()) {
                *dst += src;
            }
            let db = g.sum_axis(Axis(0));
            for (dst, src) in grad[o.bias..o.bias + o.fan_out].iter_mut().zip(db.iter()) {
                *dst += src;
            }
            if l > 0 {
                g = g.dot(&self.weights(l).t());
            }
        }
    }

    /// Outputs and Jacobian-vector products `J(x_i, t_i)·v_i` for a batch of directions.
    pub fn jvp_batch(
        &self,
        xs: ArrayView2<f64>,
        ts: &[f64],
        directions: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if directions.raw_dim() != xs.raw_dim() {
            return Err(Error::Contract(
                "directions must have the shape of the batch".into(),
            ));
        }
        let act = self.config.activation;
        let n_layers = self.offsets.len();
        let d = self.config.input_dim;
        let mut z = self.input_matrix(xs, ts)?;
        // Only the x block of the first layer sees the tangent.
        let w0 = self.weights(0);
        let mut dz = directions.dot(&w0.slice(s![..d, ..]));
        for l in 0..n_layers - 1 {
            let a = if l == 0 {
                z.dot(&w0) + &self.bias(0)
            } else {
                dz = dz.dot(&self.weights(l));
                z.dot(&self.weights(l)) + &self.bias(l)
            };
            ndarray::Zip::from(&mut dz)
                .and(&a)
                .for_each(|t, &ai| *t *= act.derivative(ai));
            z = a.mapv(|v| act.apply(v));
        }
        let w = self.weights(n_layers - 1);
        Ok((z.dot(&w) + &self.bias(n_layers - 1), dz.dot(&w)))
    }

    /// Exact `∂s/∂x` at one point by forward accumulation, one pass per input direction.
    pub fn input_jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        let d = self.config.input_dim;
        let xs = Array2::from_shape_fn((d, d), |(_, j)| x[j]);
        let ts = vec![t; d];
        let (_, jv) = self.jvp_batch(xs.view(), &ts, Array2::eye(d).view())?;
        // Row j of `jv` is J e_j, i.e. column j of the Jacobian.
        Ok(jv.t().to_owned())
    }

    /// Exact divergence at every row of a batch.
    pub fn divergence(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array1<f64>> {
        let (_, div) = self.eval_with_divergence(xs, ts)?;
        Ok(div)
    }

    /// Outputs together with exact divergences.
    pub fn eval_with_divergence(
        &self,
        xs: ArrayView2<f64>,
        ts: &[f64],
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let d = self.config.input_dim;
        let n = xs.nrows();
        let mut div = Array1::zeros(n);
        let mut out = None;
        for j in 0..d {
            let mut dir = Array2::zeros((n, d));
            dir.column_mut(j).fill(1.0);
            let (o, jv) = self.jvp_batch(xs, ts, dir.view())?;
            div += &jv.column(j);
            out.get_or_insert(o);
        }
        Ok((out.unwrap(), div))
    }
}

impl ScoreField for ScoreNet {
    fn dim(&self) -> usize {
        self.config.input_dim
    }

    fn eval_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        self.forward(xs, ts)
    }

    fn jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        self.input_jacobian(x, t)
    }

    fn divergence_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Vec<f64>> {
        Ok(self.divergence(xs, ts)?.to_vec())
    }
}
