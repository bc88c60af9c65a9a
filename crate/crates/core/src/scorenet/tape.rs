use ndarray::{Array2, Axis};

use super::{ForwardCache, ScoreNet};
use crate::arith::{self, BatchArith};
use crate::error::{Error, Result};

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Net(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    RowDot(usize, usize),
    RowNorm(usize),
    Abs(usize),
    Mean(usize),
}

/// Reverse-mode record of network evaluations and batched arithmetic.
///
/// Only parameters receive gradients. Inputs to the network are treated as
/// constants, so first-order reverse mode through forward passes is enough.
pub struct Tape<'n> {
    net: &'n ScoreNet,
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    caches: Vec<ForwardCache>,
}

impl<'n> Tape<'n> {
    pub fn new(net: &'n ScoreNet) -> Self {
        Self {
            net,
            values: Vec::new(),
            ops: Vec::new(),
            caches: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = &self.values[v.0];
        if a.len() != 1 {
            return Err(Error::Contract(format!(
                "value of shape {:?} is not a scalar",
                a.shape()
            )));
        }
        Ok(a[[0, 0]])
    }

    /// `d loss / d params`. The loss must be a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Result<Vec<f64>> {
        self.scalar(loss)?;
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Array2::ones((1, 1)));
        let mut grad = vec![0.0; self.net.param_count()];
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match self.ops[i] {
                Op::Leaf => {}
                Op::Net(c) => self.net.backward_into(&self.caches[c], &g, &mut grad),
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, a, g.clone());
                    self.accumulate(&mut adj, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, a, g.clone());
                    self.accumulate(&mut adj, b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.values[b];
                    let gb = &g * &self.values[a];
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::Scale(a, c) => self.accumulate(&mut adj, a, g * c),
                Op::RowDot(a, b) => {
                    let ga = &self.values[b] * &g;
                    let gb = &self.values[a] * &g;
                    self.accumulate(&mut adj, a, ga);
                    self.accumulate(&mut adj, b, gb);
                }
                Op::RowNorm(a) => {
                    let norms = &self.values[i];
                    let scale = ndarray::Zip::from(&g).and(norms).map_collect(|&gi, &n| {
                        if n > 0.0 {
                            gi / n
                        } else {
                            0.0
                        }
                    });
                    let ga = &self.values[a] * &scale;
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Abs(a) => {
                    let ga = ndarray::Zip::from(&g)
                        .and(&self.values[a])
                        .map_collect(|&gi, &v| if v == 0.0 { 0.0 } else { gi * v.signum() });
                    self.accumulate(&mut adj, a, ga);
                }
                Op::Mean(a) => {
                    let shape = self.values[a].raw_dim();
                    let n = self.values[a].len().max(1) as f64;
                    self.accumulate(&mut adj, a, Array2::from_elem(shape, g[[0, 0]] / n));
                }
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("parameter gradient"));
        }
        Ok(grad)
    }

    /// Adds `g` into the adjoint of node `a`, summing over broadcast axes.
    fn accumulate(&self, adj: &mut [Option<Array2<f64>>], a: usize, g: Array2<f64>) {
        let shape = self.values[a].dim();
        let mut g = g;
        if shape.0 == 1 && g.nrows() != 1 {
            g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        if shape.1 == 1 && g.ncols() != 1 {
            g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        match &mut adj[a] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

impl BatchArith for Tape<'_> {
    type V = Var;

    fn eval(&mut self, xs: &Array2<f64>, ts: &[f64]) -> Result<Var> {
        let cache = self.net.forward_cached(xs.view(), ts)?;
        let out = cache.output.clone();
        self.caches.push(cache);
        let c = self.caches.len() - 1;
        Ok(self.push(out, Op::Net(c)))
    }

    fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    fn value<'v>(&'v self, a: &'v Var) -> &'v Array2<f64> {
        &self.values[a.0]
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(v, Op::Add(a.0, b.0))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(v, Op::Sub(a.0, b.0))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Var {
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(v, Op::Mul(a.0, b.0))
    }

    fn scale(&mut self, a: &Var, c: f64) -> Var {
        let v = &self.values[a.0] * c;
        self.push(v, Op::Scale(a.0, c))
    }

    fn row_dot(&mut self, a: &Var, b: &Var) -> Var {
        let v = arith::row_dot(&self.values[a.0], &self.values[b.0]);
        self.push(v, Op::RowDot(a.0, b.0))
    }

    fn row_norm(&mut self, a: &Var) -> Var {
        let v = arith::row_norm(&self.values[a.0]);
        self.push(v, Op::RowNorm(a.0))
    }

    fn abs(&mut self, a: &Var) -> Var {
        let v = self.values[a.0].mapv(f64::abs);
        self.push(v, Op::Abs(a.0))
    }

    fn mean(&mut self, a: &Var) -> Var {
        let v = arith::mean(&self.values[a.0]);
        self.push(v, Op::Mean(a.0))
    }
}
