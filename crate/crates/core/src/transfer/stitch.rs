//! Affine stitching maps `x_b ~ W x_a + b` between the two activation
//! spaces.
//!
//! File layout: `"XSTC"`, version `u32`, `d_A`, `d_B` (`u32`), flags `u8`
//! (bit 0: inverse map present), `fit_mse` and `inversion_weight` (`f32`),
//! then `w` (`d_B x d_A`), `b`, and optionally `w_inv` (`d_A x d_B`),
//! `b_inv`, all row-major little-endian `f32`.

use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{dim, read_file, write_file, Reader, Writer};
use crate::linalg::{cholesky_solve, to_f64};
use crate::scalar::Scalar;
use crate::synthdata::ActivationPairBatch;

pub const STITCH_MAGIC: &[u8; 4] = b"XSTC";
pub const STITCH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchConfig {
    /// Ridge strength relative to `trace(X^T X) / d_A`; zero disables it.
    pub ridge: f64,
    /// Weight of the round-trip penalty `||x - T'(T(x))||^2`; zero gives the
    /// closed-form ridge fit.
    pub inversion_weight: f64,
    pub inversion_steps: usize,
    pub inversion_lr: f64,
    /// Rows used by the gradient refinement.
    pub inversion_rows: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            inversion_weight: 0.0,
            inversion_steps: 300,
            inversion_lr: 1e-3,
            inversion_rows: 8192,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StitchMap {
    /// `d_B x d_A`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Held-out mean squared error per entry of `x_b - (W x_a + b)`.
    pub fit_mse: f64,
    /// Reverse map `x_a ~ W' x_b + b'`.
    pub inverse: Option<(Array2<f64>, Array1<f64>)>,
    pub inversion_weight: f64,
}

impl StitchMap {
    pub fn d_a(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_b(&self) -> usize {
        self.w.nrows()
    }

    /// `W x + b` for every row of `x`.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    pub fn apply_inverse(&self, x: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
        self.inverse.as_ref().map(|(w, b)| x.dot(&w.t()) + b)
    }

    /// Mean per-entry squared error of `x_b - T(x_a)`.
    pub fn mse(&self, x_a: ArrayView2<'_, f64>, x_b: ArrayView2<'_, f64>) -> f64 {
        mean_sq(&(self.apply(x_a) - x_b))
    }
}

fn mean_sq(m: &Array2<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64
}

/// Ridge least squares for `y ~ x W^T + b`; the bias is not penalized.
pub fn ridge_fit(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    ridge: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, d) = x.dim();
    if n < d + 1 {
        return Err(Error::Shape(format!(
            "stitch fit needs at least {} rows, got {n}",
            d + 1
        )));
    }
    let ones = Array2::<f64>::ones((n, 1));
    let xa = concatenate(Axis(1), &[x.view(), ones.view()]).expect("same row count");
    let mut gram = xa.t().dot(&xa);
    if ridge > 0.0 {
        let trace: f64 = (0..d).map(|i| gram[[i, i]]).sum();
        let lambda = ridge * trace / d as f64;
        for i in 0..d {
            gram[[i, i]] += lambda;
        }
    }
    let rhs = xa.t().dot(&y);
    let sol = cholesky_solve(&gram, &rhs)?;
    let w = sol.slice(s![..d, ..]).t().as_standard_layout().into_owned();
    let b = sol.row(d).to_owned();
    Ok((w, b))
}

/// Fits `T: A -> B` (and the reverse map) on `train`; `fit_mse` is measured
/// on `heldout`.
pub fn fit_stitch<S: Scalar>(
    train: &ActivationPairBatch<S>,
    heldout: &ActivationPairBatch<S>,
    cfg: &StitchConfig,
) -> Result<StitchMap> {
    if cfg.ridge < 0.0 || cfg.inversion_weight < 0.0 {
        return Err(Error::config(
            "stitch",
            "ridge and inversion_weight must be non-negative",
        ));
    }
    let x_a = to_f64(train.x_a.view());
    let x_b = to_f64(train.x_b.view());
    let (mut w, mut b) = ridge_fit(x_a.view(), x_b.view(), cfg.ridge)?;
    let (mut wi, mut bi) = ridge_fit(x_b.view(), x_a.view(), cfg.ridge)?;
    if cfg.inversion_weight > 0.0 {
        let rows = cfg.inversion_rows.min(x_a.nrows());
        refine_with_inversion(
            x_a.slice(s![..rows, ..]),
            x_b.slice(s![..rows, ..]),
            (&mut w, &mut b, &mut wi, &mut bi),
            cfg,
        );
    }
    let mut map = StitchMap {
        w,
        b,
        fit_mse: 0.0,
        inverse: Some((wi, bi)),
        inversion_weight: cfg.inversion_weight,
    };
    map.fit_mse = map.mse(
        to_f64(heldout.x_a.view()).view(),
        to_f64(heldout.x_b.view()).view(),
    );
    Ok(map)
}

// Full-batch Adam on
// mean||T(x_a) - x_b||^2 + mean||T'(x_b) - x_a||^2 + w mean||T'(T(x_a)) - x_a||^2,
// started from the two one-way ridge solutions.
fn refine_with_inversion(
    x_a: ArrayView2<'_, f64>,
    x_b: ArrayView2<'_, f64>,
    (w, b, wi, bi): (
        &mut Array2<f64>,
        &mut Array1<f64>,
        &mut Array2<f64>,
        &mut Array1<f64>,
    ),
    cfg: &StitchConfig,
) {
    let n = x_a.nrows() as f64;
    let lam = cfg.inversion_weight;
    let mut opt = crate::training::Adam::<f64>::new(
        &[w.len(), b.len(), wi.len(), bi.len(), 0, 0, 0],
        0.9,
        0.999,
        1e-8,
    );
    for _ in 0..cfg.inversion_steps {
        let p = x_a.dot(&w.t()) + &*b;
        let q = x_b.dot(&wi.t()) + &*bi;
        let c = p.dot(&wi.t()) + &*bi;
        let dq = (&q - &x_a) * (2.0 / n);
        let dc = (&c - &x_a) * (2.0 * lam / n);
        let dp = (&p - &x_b) * (2.0 / n) + dc.dot(&*wi);
        let g_w = dp.t().dot(&x_a);
        let g_b = dp.sum_axis(Axis(0));
        let g_wi = dq.t().dot(&x_b) + dc.t().dot(&p);
        let g_bi = dq.sum_axis(Axis(0)) + dc.sum_axis(Axis(0));
        let mut empty: [Vec<f64>; 3] = Default::default();
        let [e0, e1, e2] = &mut empty;
        opt.step(
            [
                w.as_slice_mut().expect("standard layout"),
                b.as_slice_mut().expect("standard layout"),
                wi.as_slice_mut().expect("standard layout"),
                bi.as_slice_mut().expect("standard layout"),
                e0,
                e1,
                e2,
            ],
            [
                g_w.as_slice().expect("standard layout"),
                g_b.as_slice().expect("standard layout"),
                g_wi.as_slice().expect("standard layout"),
                g_bi.as_slice().expect("standard layout"),
                &[],
                &[],
                &[],
            ],
            cfg.inversion_lr,
        );
    }
}

pub fn encode_stitch(map: &StitchMap) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.magic(STITCH_MAGIC);
    w.u32(STITCH_VERSION);
    w.u32(dim(map.d_a(), "d_A")?);
    w.u32(dim(map.d_b(), "d_B")?);
    w.u8(map.inverse.is_some() as u8);
    w.f32(map.fit_mse as f32);
    w.f32(map.inversion_weight as f32);
    w.floats(map.w.iter());
    w.floats(map.b.iter());
    if let Some((wi, bi)) = &map.inverse {
        w.floats(wi.iter());
        w.floats(bi.iter());
    }
    Ok(w.buf)
}

pub fn decode_stitch(bytes: &[u8]) -> Result<StitchMap> {
    let mut r = Reader::new(bytes);
    r.expect_magic(STITCH_MAGIC)?;
    let version = r.u32()?;
    if version != STITCH_VERSION {
        return Err(Error::Format(format!(
            "unsupported stitch version {version}"
        )));
    }
    let d_a = r.u32()? as usize;
    let d_b = r.u32()? as usize;
    let flags = r.u8()?;
    if flags > 1 {
        return Err(Error::Format(format!("unknown stitch flags {flags:#x}")));
    }
    let fit_mse = r.f32()? as f64;
    let inversion_weight = r.f32()? as f64;
    let w = r.matrix(d_b, d_a)?;
    let b = r.vector(d_b)?;
    let inverse = if flags & 1 == 1 {
        Some((r.matrix(d_a, d_b)?, r.vector(d_a)?))
    } else {
        None
    };
    r.finish()?;
    Ok(StitchMap {
        w,
        b,
        fit_mse,
        inverse,
        inversion_weight,
    })
}

pub fn write_stitch(path: &Path, map: &StitchMap) -> Result<()> {
    write_file(path, &encode_stitch(map)?)
}

pub fn read_stitch(path: &Path) -> Result<StitchMap> {
    decode_stitch(&read_file(path)?)
}
