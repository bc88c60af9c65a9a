//! Batched arithmetic over score-field evaluations.
//!
//! Estimators are written once against [`BatchArith`] and run either on
//! plain arrays ([`FieldArith`]) or on a recording [`crate::scorenet::Tape`]
//! that can be differentiated with respect to network parameters.
//!
//! Values are `n × k` arrays. Binary operations broadcast a single column
//! across columns and a single row across rows.

use ndarray::{Array2, Axis};

use crate::error::Result;
use crate::field::ScoreField;

pub trait BatchArith {
    type V: Clone;

    /// Field outputs at the rows of `xs`, row `i` at time `ts[i]`.
    fn eval(&mut self, xs: &Array2<f64>, ts: &[f64]) -> Result<Self::V>;
    fn constant(&mut self, value: Array2<f64>) -> Self::V;
    fn value<'v>(&'v self, a: &'v Self::V) -> &'v Array2<f64>;

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V;
    /// Row-wise inner product, `n × 1`.
    fn row_dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Row-wise Euclidean norm, `n × 1`.
    fn row_norm(&mut self, a: &Self::V) -> Self::V;
    fn abs(&mut self, a: &Self::V) -> Self::V;
    /// Mean of all entries, `1 × 1`.
    fn mean(&mut self, a: &Self::V) -> Self::V;

    /// Multiply every row `i` by `c[i]`.
    fn scale_rows(&mut self, a: &Self::V, c: &[f64]) -> Self::V {
        let col = self.constant(column(c));
        self.mul(a, &col)
    }

    /// `Σ_k c_k · a_k`.
    fn combine(&mut self, terms: &[(f64, &Self::V)]) -> Self::V {
        let mut acc = self.scale(terms[0].1, terms[0].0);
        for (c, v) in &terms[1..] {
            let sv = self.scale(v, *c);
            acc = self.add(&acc, &sv);
        }
        acc
    }
}

pub fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i])
}

pub(crate) fn row_dot(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    (a * b).sum_axis(Axis(1)).insert_axis(Axis(1))
}

pub(crate) fn row_norm(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v * v)
        .sum_axis(Axis(1))
        .mapv(f64::sqrt)
        .insert_axis(Axis(1))
}

pub(crate) fn mean(a: &Array2<f64>) -> Array2<f64> {
    Array2::from_elem((1, 1), a.mean().unwrap_or(0.0))
}

/// Plain evaluation of any [`ScoreField`].
pub struct FieldArith<'f, F: ScoreField + ?Sized> {
    field: &'f F,
}

impl<'f, F: ScoreField + ?Sized> FieldArith<'f, F> {
    pub fn new(field: &'f F) -> Self {
        Self { field }
    }
}

impl<F: ScoreField + ?Sized> BatchArith for FieldArith<'_, F> {
    type V = Array2<f64>;

    fn eval(&mut self, xs: &Array2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        self.field.eval_batch(xs.view(), ts)
    }
    fn constant(&mut self, value: Array2<f64>) -> Array2<f64> {
        value
    }
    fn value<'v>(&'v self, a: &'v Array2<f64>) -> &'v Array2<f64> {
        a
    }
    fn add(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a + b
    }
    fn sub(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a - b
    }
    fn mul(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a * b
    }
    fn scale(&mut self, a: &Array2<f64>, c: f64) -> Array2<f64> {
        a * c
    }
    fn row_dot(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        row_dot(a, b)
    }
    fn row_norm(&mut self, a: &Array2<f64>) -> Array2<f64> {
        row_norm(a)
    }
    fn abs(&mut self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(f64::abs)
    }
    fn mean(&mut self, a: &Array2<f64>) -> Array2<f64> {
        mean(a)
    }
}
