//! Toy-model and crosscoder quality metrics: concept recovery, feature
//! classification by relative decoder norm, false-positive breakdown, FVE,
//! and recovery-vs-step curves.

mod report;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::crosscoder::{Architecture, CrosscoderModel, FeatureRole};
use crate::error::{Error, Result};
use crate::linalg::{normalize_rows, to_f64};
use crate::scalar::Scalar;
use crate::synthdata::{ConceptBank, ConceptKind};

pub use report::{
    curve_csv, curve_row, evaluate, fve, never_fired, write_curve_csv, CurveRow, EvalReport,
    Histogram,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub theta_recovery: f64,
    pub theta_low: f64,
    pub theta_high: f64,
    /// Rows of fresh held-out data used for FVE and firing statistics.
    pub heldout_rows: usize,
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            theta_recovery: 0.8,
            theta_low: 0.2,
            theta_high: 0.8,
            heldout_rows: 8192,
            histogram_bins: 50,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_recovery > 0.0 && self.theta_recovery < 1.0) {
            return Err(Error::config("eval.theta_recovery", "must lie in (0, 1)"));
        }
        if !(self.theta_low > 0.0 && self.theta_low < self.theta_high && self.theta_high < 1.0) {
            return Err(Error::config(
                "eval.theta_low/theta_high",
                "need 0 < theta_low < theta_high < 1",
            ));
        }
        if self.heldout_rows == 0 {
            return Err(Error::config("eval.heldout_rows", "must be positive"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("eval.histogram_bins", "must be positive"));
        }
        Ok(())
    }
}

/// Decoder frame in which a match was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub feature: usize,
    pub concept: usize,
    pub cosine: f64,
    pub frame: Frame,
    pub category: ConceptKind,
}

/// Cosines between every decoder row and every concept, in each frame.
/// `a[j][i]` compares `w_dec_a[j]` with concept `i` (zero for concepts not
/// observable by A); `b[j][i]` compares `w_dec_b[j]` with `concepts_b`.
#[derive(Debug, Clone)]
pub struct CosineTable {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

pub fn cosine_table<S: Scalar>(
    model: &CrosscoderModel<S>,
    bank: &ConceptBank<S>,
) -> Result<CosineTable> {
    if model.d_a() != bank.d_act() || model.d_b() != bank.d_act() {
        return Err(Error::Shape(format!(
            "model dims {}/{} do not match concept dimension {}",
            model.d_a(),
            model.d_b(),
            bank.d_act()
        )));
    }
    let n = bank.n_concepts();
    let dec_a = normalize_rows(to_f64(model.w_dec_a.view()).view());
    let dec_b = normalize_rows(to_f64(model.w_dec_b.view()).view());
    let con_a = normalize_rows(to_f64(bank.concepts.view()).view());
    let con_b = normalize_rows(to_f64(bank.concepts_b.view()).view());
    let raw_a = dec_a.dot(&con_a.t());
    let raw_b = dec_b.dot(&con_b.t());
    let m = model.dict_size();
    let mut a = Array2::zeros((m, n));
    let mut b = Array2::zeros((m, n));
    for i in 0..n {
        let kind = bank.partition[i];
        if kind.observable_by_a() {
            a.column_mut(i).assign(&raw_a.column(i));
        }
        if let Some(r) = bank.b_row_of(i) {
            b.column_mut(i).assign(&raw_b.column(r));
        }
    }
    Ok(CosineTable { a, b })
}

/// All `(feature, concept)` pairs with cosine above `theta`, in feature then
/// concept order. Exclusive concepts are matched only in their observable
/// frame; shared concepts in either (the larger cosine is reported).
pub fn match_concepts<S: Scalar>(
    model: &CrosscoderModel<S>,
    bank: &ConceptBank<S>,
    theta: f64,
) -> Result<Vec<Match>> {
    let table = cosine_table(model, bank)?;
    Ok(matches_from_table(&table, &bank.partition, theta))
}

pub fn matches_from_table(
    table: &CosineTable,
    partition: &[ConceptKind],
    theta: f64,
) -> Vec<Match> {
    let (m, n) = table.a.dim();
    let mut out = Vec::new();
    for j in 0..m {
        for (i, &category) in partition.iter().enumerate().take(n) {
            let ca = table.a[[j, i]];
            let cb = table.b[[j, i]];
            let hit = |c: f64, ok: bool| ok && c > theta;
            let best = match (
                hit(ca, category.observable_by_a()),
                hit(cb, category.observable_by_b()),
            ) {
                (true, true) if cb > ca => Some((cb, Frame::B)),
                (true, _) => Some((ca, Frame::A)),
                (false, true) => Some((cb, Frame::B)),
                (false, false) => None,
            };
            if let Some((cosine, frame)) = best {
                out.push(Match {
                    feature: j,
                    concept: i,
                    cosine,
                    frame,
                    category,
                });
            }
        }
    }
    out
}

/// Per-feature category: `Some(kind)` for live features, `None` for dead
/// features and features whose decoder rows are both zero.
///
/// Standard and DSF features are classified by relative decoder norm
/// `R`: `R > theta_high` is A-exclusive, `R < theta_low` is B-exclusive.
/// DFC features take their partition's category.
pub fn classify_features<S: Scalar>(
    model: &CrosscoderModel<S>,
    theta_low: f64,
    theta_high: f64,
    dead: &[bool],
) -> Vec<Option<ConceptKind>> {
    let r = model.relative_decoder_norms();
    (0..model.dict_size())
        .map(|j| {
            if dead.get(j).copied().unwrap_or(false) {
                return None;
            }
            let rel = r[j]?.as_f64();
            Some(if model.arch == Architecture::Dfc {
                let kind = match model.layout.role(j) {
                    FeatureRole::AExclusive => ConceptKind::AExclusive,
                    FeatureRole::BExclusive => ConceptKind::BExclusive,
                    _ => ConceptKind::Shared,
                };
                debug_assert!(match kind {
                    ConceptKind::AExclusive => rel == 1.0,
                    ConceptKind::BExclusive => rel == 0.0,
                    ConceptKind::Shared => true,
                });
                kind
            } else if rel > theta_high {
                ConceptKind::AExclusive
            } else if rel < theta_low {
                ConceptKind::BExclusive
            } else {
                ConceptKind::Shared
            })
        })
        .collect()
}

/// Integer counts behind the recovery and false-positive rates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryCounts {
    pub concepts_shared: usize,
    pub concepts_a_excl: usize,
    pub concepts_b_excl: usize,
    pub recovered_shared: usize,
    pub recovered_a_excl: usize,
    pub recovered_b_excl: usize,
    pub classified_shared: usize,
    pub classified_a_excl: usize,
    pub classified_b_excl: usize,
    pub true_positive: usize,
    pub fp_shared_as_exclusive: usize,
    pub fp_no_concept: usize,
}

impl RecoveryCounts {
    pub fn concepts(&self) -> usize {
        self.concepts_shared + self.concepts_a_excl + self.concepts_b_excl
    }

    pub fn recovered(&self) -> usize {
        self.recovered_shared + self.recovered_a_excl + self.recovered_b_excl
    }

    pub fn exclusive_classified(&self) -> usize {
        self.classified_a_excl + self.classified_b_excl
    }

    pub fn false_positives(&self) -> usize {
        self.fp_shared_as_exclusive + self.fp_no_concept
    }

    pub fn recovery_rate_total(&self) -> Option<f64> {
        ratio(self.recovered(), self.concepts())
    }

    pub fn recovery_shared(&self) -> Option<f64> {
        ratio(self.recovered_shared, self.concepts_shared)
    }

    pub fn recovery_a_excl(&self) -> Option<f64> {
        ratio(self.recovered_a_excl, self.concepts_a_excl)
    }

    pub fn recovery_b_excl(&self) -> Option<f64> {
        ratio(self.recovered_b_excl, self.concepts_b_excl)
    }

    /// Recovery over both exclusive categories pooled.
    pub fn recovery_exclusive(&self) -> Option<f64> {
        ratio(
            self.recovered_a_excl + self.recovered_b_excl,
            self.concepts_a_excl + self.concepts_b_excl,
        )
    }

    pub fn false_positive_rate(&self) -> Option<f64> {
        ratio(self.false_positives(), self.exclusive_classified())
    }
}

/// `None` for an empty denominator.
pub fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Concept-level recovery and feature-level false positives.
///
/// A concept is recovered when at least one feature matches it. A feature
/// classified exclusive is a true positive when it recovers any exclusive
/// concept; otherwise it is `fp_shared_as_exclusive` if it recovers a shared
/// concept and `fp_no_concept` if it recovers nothing.
pub fn recovery_and_fp(
    matches: &[Match],
    classes: &[Option<ConceptKind>],
    partition: &[ConceptKind],
) -> RecoveryCounts {
    let mut c = RecoveryCounts::default();
    let mut recovered = vec![false; partition.len()];
    let mut hits_excl = vec![false; classes.len()];
    let mut hits_shared = vec![false; classes.len()];
    for m in matches {
        recovered[m.concept] = true;
        if m.category.is_exclusive() {
            hits_excl[m.feature] = true;
        } else {
            hits_shared[m.feature] = true;
        }
    }
    for (i, &kind) in partition.iter().enumerate() {
        let (total, got) = match kind {
            ConceptKind::Shared => (&mut c.concepts_shared, &mut c.recovered_shared),
            ConceptKind::AExclusive => (&mut c.concepts_a_excl, &mut c.recovered_a_excl),
            ConceptKind::BExclusive => (&mut c.concepts_b_excl, &mut c.recovered_b_excl),
        };
        *total += 1;
        *got += recovered[i] as usize;
    }
    for (j, class) in classes.iter().enumerate() {
        match class {
            None => {}
            Some(ConceptKind::Shared) => c.classified_shared += 1,
            Some(kind) => {
                if *kind == ConceptKind::AExclusive {
                    c.classified_a_excl += 1;
                } else {
                    c.classified_b_excl += 1;
                }
                if hits_excl[j] {
                    c.true_positive += 1;
                } else if hits_shared[j] {
                    c.fp_shared_as_exclusive += 1;
                } else {
                    c.fp_no_concept += 1;
                }
            }
        }
    }
    c
}
