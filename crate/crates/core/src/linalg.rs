//! Small dense helpers: norms, medians, cosines and an SPD solver.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn norm<S: Scalar>(v: ArrayView1<'_, S>) -> S {
    v.iter().map(|&x| x * x).sum::<S>().sqrt()
}

pub fn row_norms<S: Scalar>(m: ArrayView2<'_, S>) -> Vec<S> {
    m.axis_iter(Axis(0)).map(norm).collect()
}

/// Median with the even-length convention of averaging the two middle values.
/// Returns `None` on empty input or if any value is NaN.
pub fn median<S: Scalar>(values: &[S]) -> Option<S> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered above"));
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / S::of(2.0)
    })
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine<S: Scalar>(a: ArrayView1<'_, S>, b: ArrayView1<'_, S>) -> S {
    let na = norm(a);
    let nb = norm(b);
    if na == S::zero() || nb == S::zero() {
        return S::zero();
    }
    a.dot(&b) / (na * nb)
}

/// Rows scaled to unit norm (zero rows stay zero).
pub fn normalize_rows<S: Scalar>(m: ArrayView2<'_, S>) -> Array2<S> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = norm(row.view());
        if n > S::zero() {
            row.mapv_inplace(|x| x / n);
        }
    }
    out
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky
/// factorization. `B` may have several right-hand-side columns.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::Shape(format!(
            "cholesky_solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let scale = (0..n)
        .map(|i| a[[i, i]].abs())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 1e-13 * scale) {
            return Err(Error::Singular(format!(
                "matrix is not positive definite (pivot {j} = {d:.3e})"
            )));
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    let mut x = b.clone();
    for c in 0..x.ncols() {
        // forward substitution L y = b
        for i in 0..n {
            let mut s = x[[i, c]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
        // back substitution L^T x = y
        for i in (0..n).rev() {
            let mut s = x[[i, c]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, c]];
            }
            x[[i, c]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

pub fn to_f64<S: Scalar>(m: ArrayView2<'_, S>) -> Array2<f64> {
    m.mapv(|x| x.as_f64())
}

pub fn from_f64<S: Scalar>(m: ArrayView2<'_, f64>) -> Array2<S> {
    m.mapv(S::of)
}

pub fn vec_from_f64<S: Scalar>(v: ArrayView1<'_, f64>) -> Array1<S> {
    v.mapv(S::of)
}
