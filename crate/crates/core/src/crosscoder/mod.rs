//! Crosscoder parameterization for the standard, dedicated-feature (DFC)
//! and designated-shared-feature (DSF) architectures.
//!
//! Features are laid out in contiguous blocks:
//!
//! ```text
//! [0, a_end)            A-exclusive   (DFC only)
//! [a_end, b_end)        B-exclusive   (DFC only)
//! [b_end, M)            shared
//!   [b_end, designated_end)  designated shared subset (DSF only)
//! ```
//!
//! DFC exclusive features have structurally zero decoder rows in the other
//! model (and zero encoder columns, since they are never read). DSF
//! designated features carry bit-identical decoder rows in both models.

mod checkpoint;
mod forward;

use std::ops::Range;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::rng::{normal, stream_rng, Stream};
use crate::scalar::Scalar;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{batch_topk, decode, encode, forward, select_topk, DesignatedPool, ForwardTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Standard,
    Dfc,
    Dsf,
}

impl Architecture {
    pub fn tag(self) -> u8 {
        match self {
            Architecture::Standard => 0,
            Architecture::Dfc => 1,
            Architecture::Dsf => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Architecture::Standard),
            1 => Some(Architecture::Dfc),
            2 => Some(Architecture::Dsf),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Standard => "standard",
            Architecture::Dfc => "dfc",
            Architecture::Dsf => "dsf",
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Structural role of a dictionary feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    AExclusive,
    BExclusive,
    Shared,
}

/// Disjoint partition of the dictionary indices `[0, dict_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    pub dict_size: usize,
    pub a_end: usize,
    pub b_end: usize,
    pub designated_end: usize,
}

impl PartitionLayout {
    pub fn standard(dict_size: usize) -> Self {
        Self {
            dict_size,
            a_end: 0,
            b_end: 0,
            designated_end: 0,
        }
    }

    pub fn dedicated(dict_size: usize, a_exclusive: usize, b_exclusive: usize) -> Self {
        Self {
            dict_size,
            a_end: a_exclusive,
            b_end: a_exclusive + b_exclusive,
            designated_end: a_exclusive + b_exclusive,
        }
    }

    pub fn designated(dict_size: usize, designated: usize) -> Self {
        Self {
            dict_size,
            a_end: 0,
            b_end: 0,
            designated_end: designated,
        }
    }

    /// Layout for `arch` from fractional sizes: `exclusive_fraction` of the
    /// dictionary per model (DFC) or `designated_fraction` (DSF), rounded to
    /// the nearest feature.
    pub fn for_arch(
        arch: Architecture,
        dict_size: usize,
        exclusive_fraction: f64,
        designated_fraction: f64,
    ) -> Self {
        let count = |f: f64| (dict_size as f64 * f).round() as usize;
        match arch {
            Architecture::Standard => Self::standard(dict_size),
            Architecture::Dfc => {
                let n = count(exclusive_fraction).max(1);
                Self::dedicated(dict_size, n, n)
            }
            Architecture::Dsf => Self::designated(dict_size, count(designated_fraction).max(1)),
        }
    }

    pub fn a_exclusive(&self) -> Range<usize> {
        0..self.a_end
    }

    pub fn b_exclusive(&self) -> Range<usize> {
        self.a_end..self.b_end
    }

    pub fn shared(&self) -> Range<usize> {
        self.b_end..self.dict_size
    }

    pub fn designated_range(&self) -> Range<usize> {
        self.b_end..self.designated_end
    }

    pub fn role(&self, feature: usize) -> FeatureRole {
        if feature < self.a_end {
            FeatureRole::AExclusive
        } else if feature < self.b_end {
            FeatureRole::BExclusive
        } else {
            FeatureRole::Shared
        }
    }

    pub fn validate(&self, arch: Architecture) -> Result<()> {
        let ordered = self.a_end <= self.b_end
            && self.b_end <= self.designated_end
            && self.designated_end <= self.dict_size;
        if !ordered || self.dict_size == 0 {
            return Err(Error::config(
                "layout",
                format!(
                    "ranges are not an ordered partition of [0, {})",
                    self.dict_size
                ),
            ));
        }
        let has_exclusive = self.b_end > 0;
        let has_designated = self.designated_end > self.b_end;
        match arch {
            Architecture::Standard if has_exclusive || has_designated => Err(Error::config(
                "layout",
                "standard crosscoders have no exclusive or designated features",
            )),
            Architecture::Dfc if has_designated => Err(Error::config(
                "layout",
                "DFC layouts have no designated features",
            )),
            Architecture::Dsf if has_exclusive => Err(Error::config(
                "layout",
                "DSF layouts have no exclusive partitions",
            )),
            Architecture::Dsf if !has_designated => Err(Error::config(
                "layout",
                "DSF layouts need designated features",
            )),
            _ => Ok(()),
        }
    }
}

/// Crosscoder weights. Encoders are `d x M`, decoders `M x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosscoderModel<S> {
    pub arch: Architecture,
    pub w_enc_a: Array2<S>,
    pub w_enc_b: Array2<S>,
    pub b_enc: Array1<S>,
    pub w_dec_a: Array2<S>,
    pub w_dec_b: Array2<S>,
    pub b_dec_a: Array1<S>,
    pub b_dec_b: Array1<S>,
    pub layout: PartitionLayout,
    /// Active-feature budget per sample (enforced batch-wise).
    pub k: usize,
    /// DSF only: density multiplier of the designated pool.
    pub dsf_multiplier: f64,
}

pub const DEFAULT_DSF_MULTIPLIER: f64 = 2.0;

/// Shape and health overview of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub arch: Architecture,
    pub d_a: usize,
    pub d_b: usize,
    pub dict_size: usize,
    pub k: usize,
    pub a_exclusive: usize,
    pub b_exclusive: usize,
    pub designated: usize,
    pub parameters: usize,
    pub mean_decoder_norm_a: f64,
    pub mean_decoder_norm_b: f64,
    pub structural_zeros_hold: bool,
    pub tied_rows_hold: bool,
}

/// Initializes a crosscoder: Gaussian decoder rows rescaled to
/// `init_decoder_norm` per model, encoders set to the decoder transposes,
/// zero biases, DFC structural zeros and DSF tied rows installed.
pub fn init_model<S: Scalar>(
    arch: Architecture,
    d_a: usize,
    d_b: usize,
    k: usize,
    layout: PartitionLayout,
    init_decoder_norm: f64,
    seed: u64,
) -> Result<CrosscoderModel<S>> {
    layout.validate(arch)?;
    let m = layout.dict_size;
    if d_a == 0 || d_b == 0 {
        return Err(Error::config(
            "d_a/d_b",
            "activation dimensions must be positive",
        ));
    }
    if k < 1 || k > m {
        return Err(Error::config("k", format!("must lie in [1, {m}], got {k}")));
    }
    if arch == Architecture::Dsf && d_a != d_b {
        return Err(Error::config(
            "arch",
            "DSF ties decoder rows across models and needs d_a == d_b",
        ));
    }
    if !(init_decoder_norm > 0.0) {
        return Err(Error::config("init_decoder_norm", "must be positive"));
    }

    let mut rng = stream_rng(seed, Stream::Init, 0);
    let mut dec_a = Array2::<f64>::zeros((m, d_a));
    let mut dec_b = Array2::<f64>::zeros((m, d_b));
    for i in 0..m {
        let mut row_a = dec_a.row_mut(i);
        row_a.mapv_inplace(|_| normal(&mut rng));
        let n = norm(row_a.view());
        row_a.mapv_inplace(|x| x * init_decoder_norm / n);
        let mut row_b = dec_b.row_mut(i);
        row_b.mapv_inplace(|_| normal(&mut rng));
        let n = norm(row_b.view());
        row_b.mapv_inplace(|x| x * init_decoder_norm / n);
    }

    let mut model = CrosscoderModel {
        arch,
        w_enc_a: dec_a.t().as_standard_layout().mapv(S::of),
        w_enc_b: dec_b.t().as_standard_layout().mapv(S::of),
        b_enc: Array1::zeros(m),
        w_dec_a: dec_a.mapv(S::of),
        w_dec_b: dec_b.mapv(S::of),
        b_dec_a: Array1::zeros(d_a),
        b_dec_b: Array1::zeros(d_b),
        layout,
        k,
        dsf_multiplier: DEFAULT_DSF_MULTIPLIER,
    };
    if arch == Architecture::Dsf {
        for i in layout.designated_range() {
            let row = model.w_dec_a.row(i).to_owned();
            model.w_dec_b.row_mut(i).assign(&row);
            model.w_enc_b.column_mut(i).assign(&row);
        }
    }
    model.enforce_structural_zeros();
    Ok(model)
}

impl<S: Scalar> CrosscoderModel<S> {
    pub fn d_a(&self) -> usize {
        self.w_dec_a.ncols()
    }

    pub fn d_b(&self) -> usize {
        self.w_dec_b.ncols()
    }

    pub fn dict_size(&self) -> usize {
        self.layout.dict_size
    }

    /// Per-feature weights `(c_a, c_b)` of each model's encoder
    /// pre-activation: `(1/2, 1/2)` for averaged features, `(1, 0)` / `(0, 1)`
    /// for DFC exclusive features.
    pub fn encoder_coefficients(&self) -> (Array1<S>, Array1<S>) {
        let half = S::of(0.5);
        let m = self.dict_size();
        let mut c_a = Array1::from_elem(m, half);
        let mut c_b = Array1::from_elem(m, half);
        if self.arch == Architecture::Dfc {
            for i in self.layout.a_exclusive() {
                c_a[i] = S::one();
                c_b[i] = S::zero();
            }
            for i in self.layout.b_exclusive() {
                c_a[i] = S::zero();
                c_b[i] = S::one();
            }
        }
        (c_a, c_b)
    }

    /// DSF designated pool, if any.
    pub fn designated_pool(&self) -> Option<DesignatedPool> {
        (self.arch == Architecture::Dsf).then(|| DesignatedPool {
            range: self.layout.designated_range(),
            multiplier: self.dsf_multiplier,
        })
    }

    /// Zeroes the DFC cross-partition decoder rows and encoder columns.
    pub fn enforce_structural_zeros(&mut self) {
        if self.arch != Architecture::Dfc {
            return;
        }
        for i in self.layout.a_exclusive() {
            self.w_dec_b.row_mut(i).fill(S::zero());
            self.w_enc_b.column_mut(i).fill(S::zero());
        }
        for i in self.layout.b_exclusive() {
            self.w_dec_a.row_mut(i).fill(S::zero());
            self.w_enc_a.column_mut(i).fill(S::zero());
        }
    }

    /// True when every DFC cross-partition decoder row and encoder column is
    /// exactly zero (vacuous for other architectures).
    pub fn structural_zeros_hold(&self) -> bool {
        if self.arch != Architecture::Dfc {
            return true;
        }
        let zero = |v: ndarray::ArrayView1<'_, S>| v.iter().all(|&x| x == S::zero());
        self.layout
            .a_exclusive()
            .all(|i| zero(self.w_dec_b.row(i)) && zero(self.w_enc_b.column(i)))
            && self
                .layout
                .b_exclusive()
                .all(|i| zero(self.w_dec_a.row(i)) && zero(self.w_enc_a.column(i)))
    }

    /// True when every DSF designated feature has identical A and B decoder
    /// rows (vacuous for other architectures).
    pub fn tied_rows_hold(&self) -> bool {
        self.arch != Architecture::Dsf
            || self
                .layout
                .designated_range()
                .all(|i| self.w_dec_a.row(i) == self.w_dec_b.row(i))
    }

    pub fn summary(&self) -> ModelSummary {
        let mean_norm = |m: &Array2<S>| {
            let n = m.nrows().max(1) as f64;
            m.axis_iter(Axis(0)).map(|r| norm(r).as_f64()).sum::<f64>() / n
        };
        ModelSummary {
            arch: self.arch,
            d_a: self.d_a(),
            d_b: self.d_b(),
            dict_size: self.dict_size(),
            k: self.k,
            a_exclusive: self.layout.a_exclusive().len(),
            b_exclusive: self.layout.b_exclusive().len(),
            designated: self.layout.designated_range().len(),
            parameters: self.parameter_count(),
            mean_decoder_norm_a: mean_norm(&self.w_dec_a),
            mean_decoder_norm_b: mean_norm(&self.w_dec_b),
            structural_zeros_hold: self.structural_zeros_hold(),
            tied_rows_hold: self.tied_rows_hold(),
        }
    }

    /// `||d_i^A|| / (||d_i^A|| + ||d_i^B||)`.
    pub fn relative_decoder_norm(&self, feature: usize) -> Result<S> {
        if feature >= self.dict_size() {
            return Err(Error::Shape(format!(
                "feature {feature} out of range for dictionary of {}",
                self.dict_size()
            )));
        }
        let na = norm(self.w_dec_a.row(feature));
        let nb = norm(self.w_dec_b.row(feature));
        let total = na + nb;
        if total == S::zero() {
            return Err(Error::UndefinedFeature(feature));
        }
        Ok(na / total)
    }

    /// Relative decoder norms of every feature (`None` when both rows are zero).
    pub fn relative_decoder_norms(&self) -> Vec<Option<S>> {
        let na = self.w_dec_a.map_axis(Axis(1), |r| norm(r));
        let nb = self.w_dec_b.map_axis(Axis(1), |r| norm(r));
        na.iter()
            .zip(nb.iter())
            .map(|(&a, &b)| {
                let t = a + b;
                (t > S::zero()).then(|| a / t)
            })
            .collect()
    }

    /// Parameter tensors as flat slices in checkpoint order:
    /// `w_enc_a, w_enc_b, b_enc, w_dec_a, w_dec_b, b_dec_a, b_dec_b`.
    pub fn param_slices(&self) -> [&[S]; 7] {
        [
            self.w_enc_a.as_slice().expect("standard layout"),
            self.w_enc_b.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.w_dec_a.as_slice().expect("standard layout"),
            self.w_dec_b.as_slice().expect("standard layout"),
            self.b_dec_a.as_slice().expect("standard layout"),
            self.b_dec_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn param_slices_mut(&mut self) -> [&mut [S]; 7] {
        [
            self.w_enc_a.as_slice_mut().expect("standard layout"),
            self.w_enc_b.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.w_dec_a.as_slice_mut().expect("standard layout"),
            self.w_dec_b.as_slice_mut().expect("standard layout"),
            self.b_dec_a.as_slice_mut().expect("standard layout"),
            self.b_dec_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Converts to another scalar type.
    pub fn cast<T: Scalar>(&self) -> CrosscoderModel<T> {
        let c2 = |m: &Array2<S>| m.mapv(|x| T::of(x.as_f64()));
        let c1 = |v: &Array1<S>| v.mapv(|x| T::of(x.as_f64()));
        CrosscoderModel {
            arch: self.arch,
            w_enc_a: c2(&self.w_enc_a),
            w_enc_b: c2(&self.w_enc_b),
            b_enc: c1(&self.b_enc),
            w_dec_a: c2(&self.w_dec_a),
            w_dec_b: c2(&self.w_dec_b),
            b_dec_a: c1(&self.b_dec_a),
            b_dec_b: c1(&self.b_dec_b),
            layout: self.layout,
            k: self.k,
            dsf_multiplier: self.dsf_multiplier,
        }
    }
}
