//! The capability "evaluate s(x, t)".

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// A time-indexed vector field `s(x, t)` on `R^D`.
///
/// Batches are row-major: row `i` of `xs` is evaluated at time `ts[i]`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    fn eval_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>>;

    /// Exact input Jacobian `∂s_i/∂x_j` at one point.
    fn jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>>;

    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Contract(format!("bad point shape: {e}")))?;
        Ok(self.eval_batch(xs, &[t])?.row(0).to_vec())
    }

    /// `div_x s` at every row of a batch.
    fn divergence_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Vec<f64>> {
        xs.rows()
            .into_iter()
            .zip(ts)
            .map(|(x, &t)| {
                let j = self.jacobian(&x.to_vec(), t)?;
                Ok(j.diag().sum())
            })
            .collect()
    }
}

impl<F: ScoreField + ?Sized> ScoreField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Array2<f64>> {
        (**self).eval_batch(xs, ts)
    }
    fn jacobian(&self, x: &[f64], t: f64) -> Result<Array2<f64>> {
        (**self).jacobian(x, t)
    }
    fn eval(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        (**self).eval(x, t)
    }
    fn divergence_batch(&self, xs: ArrayView2<f64>, ts: &[f64]) -> Result<Vec<f64>> {
        (**self).divergence_batch(xs, ts)
    }
}

/// `s ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl ScoreField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_batch(&self, xs: ArrayView2<f64>, _ts: &[f64]) -> Result<Array2<f64>> {
        Ok(Array2::zeros(xs.raw_dim()))
    }
    fn jacobian(&self, _x: &[f64], _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros((self.dim, self.dim)))
    }
}

/// Central-difference Jacobian, for oracles and fields without a closed form.
pub fn fd_jacobian<F: ScoreField + ?Sized>(
    field: &F,
    x: &[f64],
    t: f64,
    h: f64,
) -> Result<Array2<f64>> {
    let d = x.len();
    let mut jac = Array2::zeros((d, d));
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let plus = field.eval(&xp, t)?;
        xp[j] = x[j] - h;
        let minus = field.eval(&xp, t)?;
        xp[j] = x[j];
        for i in 0..d {
            jac[[i, j]] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

pub(crate) fn check_finite(values: &[f64], location: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(location))
    }
}
