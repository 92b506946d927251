use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::linalg::{median, row_norms};
use crate::scalar::Scalar;
use crate::synthdata::ActivationPairBatch;

/// Scales that bring each model's median row norm to `sqrt((d_A + d_B) / 2)`.
pub fn compute_normalization<S: Scalar>(
    sample: &ActivationPairBatch<S>,
    d_a: usize,
    d_b: usize,
) -> Result<(S, S)> {
    if sample.is_empty() {
        return Err(Error::Normalization("calibration sample is empty".into()));
    }
    let target = ((d_a + d_b) as f64 / 2.0).sqrt();
    let scale = |x: &Array2<S>, which: &str| -> Result<S> {
        let med = median(&row_norms(x.view()))
            .map(|m| m.as_f64())
            .filter(|m| *m > 0.0 && m.is_finite())
            .ok_or_else(|| {
                Error::Normalization(format!(
                    "median row norm of model {which} is zero or undefined"
                ))
            })?;
        Ok(S::of(target / med))
    };
    Ok((scale(&sample.x_a, "A")?, scale(&sample.x_b, "B")?))
}

/// Rows to keep: a row is dropped when its norm in either model exceeds
/// `factor` times that model's batch median norm.
pub fn mask_outliers<S: Scalar>(batch: &ActivationPairBatch<S>, factor: f64) -> Vec<bool> {
    let keep_side = |x: &Array2<S>| -> Vec<bool> {
        let norms = row_norms(x.view());
        match median(&norms) {
            Some(med) if factor.is_finite() => {
                let limit = med.as_f64() * factor;
                norms.iter().map(|n| n.as_f64() <= limit).collect()
            }
            _ => vec![true; norms.len()],
        }
    };
    keep_side(&batch.x_a)
        .into_iter()
        .zip(keep_side(&batch.x_b))
        .map(|(a, b)| a && b)
        .collect()
}

/// Rows of `x` with `keep[r]` set.
pub fn select_rows<S: Scalar>(x: ArrayView2<'_, S>, keep: &[bool]) -> Array2<S> {
    if keep.iter().all(|&k| k) {
        return x.to_owned();
    }
    let idx: Vec<usize> = (0..keep.len()).filter(|&r| keep[r]).collect();
    x.select(Axis(0), &idx)
}
