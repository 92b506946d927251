use std::fmt::Write as _;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{
    classify_features, match_concepts, recovery_and_fp, EvalConfig, Match, RecoveryCounts,
};
use crate::crosscoder::{forward, CrosscoderModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::{ActivationPairBatch, ConceptBank};
use crate::transfer::ProxyRecord;

/// Counts of live features' relative decoder norms in equal-width bins
/// over `[0, 1]` (the last bin is closed).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: usize,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>, bins: usize) -> Self {
        let mut counts = vec![0; bins];
        for v in values {
            let b = ((v * bins as f64).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { bins, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub architecture: String,
    pub dict_size: usize,
    pub theta_recovery: f64,
    pub theta_low: f64,
    pub theta_high: f64,
    pub recovery_rate_total: Option<f64>,
    pub recovery_shared: Option<f64>,
    pub recovery_a_excl: Option<f64>,
    pub recovery_b_excl: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub fp_shared_as_exclusive: usize,
    pub fp_no_concept: usize,
    pub counts: RecoveryCounts,
    pub fve_a: f64,
    pub fve_b: f64,
    pub dead_fraction: f64,
    pub relative_norm_histogram: Histogram,
    pub matches: Vec<Match>,
    /// Externally supplied interpretability detection score, if any.
    pub detection_score: Option<f64>,
    /// Per-feature exclusivity-proxy scores, when a stitch was fitted.
    #[serde(default)]
    pub exclusivity_proxy: Option<Vec<ProxyRecord>>,
}

/// `1 - sum ||x - x_hat||^2 / sum ||x - mean(x)||^2` per model, on
/// normalized inputs.
pub fn fve<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
) -> Result<(f64, f64)> {
    let trace = forward(model, x_a, x_b, model.k)?;
    let one = |x: ArrayView2<'_, S>, recon: ArrayView2<'_, S>, which: &str| -> Result<f64> {
        let mean = x
            .mean_axis(Axis(0))
            .ok_or_else(|| Error::Metric("FVE on an empty batch".into()))?;
        let mut var = 0.0;
        let mut sse = 0.0;
        for (row, rec) in x.rows().into_iter().zip(recon.rows()) {
            for ((&v, &m), &r) in row.iter().zip(mean.iter()).zip(rec.iter()) {
                var += (v - m).as_f64().powi(2);
                sse += (v - r).as_f64().powi(2);
            }
        }
        if var == 0.0 {
            return Err(Error::Metric(format!(
                "model {which} inputs have zero variance"
            )));
        }
        Ok(1.0 - sse / var)
    };
    Ok((
        one(x_a, trace.recon_a.view(), "A")?,
        one(x_b, trace.recon_b.view(), "B")?,
    ))
}

/// Features with no nonzero activation on the (normalized) batch.
pub fn never_fired<S: Scalar>(
    model: &CrosscoderModel<S>,
    x_a: ArrayView2<'_, S>,
    x_b: ArrayView2<'_, S>,
) -> Result<Vec<bool>> {
    let trace = forward(model, x_a, x_b, model.k)?;
    let mut dead = vec![true; model.dict_size()];
    for &(_, j) in &trace.selected {
        dead[j] = false;
    }
    Ok(dead)
}

/// Full report on held-out data. `heldout` is raw; it is normalized with
/// `scales` before use. `dead` defaults to the features that never fire on
/// the held-out batch.
pub fn evaluate<S: Scalar>(
    model: &CrosscoderModel<S>,
    bank: &ConceptBank<S>,
    heldout: &ActivationPairBatch<S>,
    scales: (S, S),
    cfg: &EvalConfig,
    dead: Option<&[bool]>,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut data = heldout.clone();
    data.scale(scales.0, scales.1);
    let (fve_a, fve_b) = fve(model, data.x_a.view(), data.x_b.view())?;
    let dead = match dead {
        Some(d) => d.to_vec(),
        None => never_fired(model, data.x_a.view(), data.x_b.view())?,
    };
    let classes = classify_features(model, cfg.theta_low, cfg.theta_high, &dead);
    let matches = match_concepts(model, bank, cfg.theta_recovery)?;
    let counts = recovery_and_fp(&matches, &classes, &bank.partition);
    let rel = model.relative_decoder_norms();
    let hist = Histogram::of(
        rel.iter()
            .zip(&dead)
            .filter(|(_, &d)| !d)
            .filter_map(|(r, _)| r.map(|v| v.as_f64())),
        cfg.histogram_bins,
    );
    Ok(EvalReport {
        architecture: model.arch.name().to_string(),
        dict_size: model.dict_size(),
        theta_recovery: cfg.theta_recovery,
        theta_low: cfg.theta_low,
        theta_high: cfg.theta_high,
        recovery_rate_total: counts.recovery_rate_total(),
        recovery_shared: counts.recovery_shared(),
        recovery_a_excl: counts.recovery_a_excl(),
        recovery_b_excl: counts.recovery_b_excl(),
        false_positive_rate: counts.false_positive_rate(),
        fp_shared_as_exclusive: counts.fp_shared_as_exclusive,
        fp_no_concept: counts.fp_no_concept,
        fve_a,
        fve_b,
        dead_fraction: dead.iter().filter(|&&d| d).count() as f64 / model.dict_size() as f64,
        relative_norm_histogram: hist,
        matches,
        detection_score: None,
        exclusivity_proxy: None,
        counts,
    })
}

/// One point of a recovery-vs-step curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub shared: Option<f64>,
    pub a_excl: Option<f64>,
    pub b_excl: Option<f64>,
    pub fp_rate: Option<f64>,
}

impl CurveRow {
    /// Recovery over both exclusive categories pooled, from the per-side
    /// rates and category sizes.
    pub fn exclusive(&self, n_a: usize, n_b: usize) -> Option<f64> {
        let a = self.a_excl.map(|r| r * n_a as f64).unwrap_or(0.0);
        let b = self.b_excl.map(|r| r * n_b as f64).unwrap_or(0.0);
        (n_a + n_b > 0).then(|| (a + b) / (n_a + n_b) as f64)
    }
}

pub fn curve_row<S: Scalar>(
    step: usize,
    model: &CrosscoderModel<S>,
    bank: &ConceptBank<S>,
    cfg: &EvalConfig,
    dead: &[bool],
) -> Result<CurveRow> {
    let matches = match_concepts(model, bank, cfg.theta_recovery)?;
    let classes = classify_features(model, cfg.theta_low, cfg.theta_high, dead);
    let c = recovery_and_fp(&matches, &classes, &bank.partition);
    Ok(CurveRow {
        step,
        shared: c.recovery_shared(),
        a_excl: c.recovery_a_excl(),
        b_excl: c.recovery_b_excl(),
        fp_rate: c.false_positive_rate(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,shared,a_excl,b_excl,fp_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.step,
            cell(r.shared),
            cell(r.a_excl),
            cell(r.b_excl),
            cell(r.fp_rate)
        );
    }
    s
}

pub fn write_curve_csv(path: &Path, rows: &[CurveRow]) -> Result<()> {
    crate::io::write_file(path, curve_csv(rows).as_bytes())
}
