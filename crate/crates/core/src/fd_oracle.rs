//! Central finite differences over flat parameter vectors.
//!
//! The step for coordinate `i` is `h · max(1, |x_i|)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

#[inline]
fn step(h: f64, xi: f64) -> f64 {
    h * xi.abs().max(1.0)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn fd_gradient<F>(mut f: F, at: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let mut x = at.clone();
    let mut g = DVector::zeros(at.len());
    for i in 0..at.len() {
        let hi = step(h, at[i]);
        x[i] = at[i] + hi;
        let fp = f(&x);
        x[i] = at[i] - hi;
        let fm = f(&x);
        x[i] = at[i];
        if !(fp.is_finite() && fm.is_finite()) {
            return Err(Error::Oracle { coord: i });
        }
        // the actual spacing after rounding of x ± hi
        g[i] = (fp - fm) / ((at[i] + hi) - (at[i] - hi));
    }
    Ok(g)
}

/// Central-difference Jacobian of a vector function; column `j` is `∂F/∂x_j`.
pub fn fd_jacobian<F>(mut f: F, at: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut x = at.clone();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(at.len());
    for j in 0..at.len() {
        let hj = step(h, at[j]);
        x[j] = at[j] + hj;
        let fp = f(&x);
        x[j] = at[j] - hj;
        let fm = f(&x);
        x[j] = at[j];
        if fp.len() != fm.len() || !(fp.iter().chain(fm.iter()).all(|v| v.is_finite())) {
            return Err(Error::Oracle { coord: j });
        }
        cols.push((fp - fm) / ((at[j] + hj) - (at[j] - hj)));
    }
    let m = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, at.len(), |i, j| cols[j][i]))
}

/// `‖a - b‖∞ / max(‖b‖∞, 1)`, with `b` the reference.
pub fn relative_error<'a, I, J>(analytic: I, reference: J) -> f64
where
    I: IntoIterator<Item = &'a f64>,
    J: IntoIterator<Item = &'a f64>,
{
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 1.0;
    let mut bad = false;
    for (a, b) in analytic.into_iter().zip(reference) {
        let d = (a - b).abs();
        bad |= d.is_nan();
        diff = diff.max(d);
        scale = scale.max(b.abs());
    }
    if bad {
        f64::INFINITY
    } else {
        diff / scale
    }
}
