//! Model stitching, crosscoder-mediated vector transfer, and the geometric
//! exclusivity proxy.

mod stitch;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::crosscoder::CrosscoderModel;
use crate::error::{Error, Result};
use crate::linalg::{cosine, norm};
use crate::scalar::Scalar;
use crate::synthdata::{ConceptBank, ConceptKind};

pub use stitch::{
    decode_stitch, encode_stitch, fit_stitch, read_stitch, ridge_fit, write_stitch, StitchConfig,
    StitchMap, STITCH_MAGIC, STITCH_VERSION,
};

pub const DEFAULT_TRANSFER_FEATURES: usize = 10;

/// Translates a model-A direction into model B through the shared
/// dictionary: the `n` live shared-partition features whose A decoders are
/// most cosine-similar to `v_a` (positive similarities only) vote with
/// weight equal to that similarity, and the weighted mean of their B
/// decoders is rescaled to `||v_a||`.
pub fn transfer_vector<S: Scalar>(
    model: &CrosscoderModel<S>,
    v_a: ArrayView1<'_, S>,
    n: usize,
    dead: &[bool],
) -> Result<Array1<S>> {
    if v_a.len() != model.d_a() {
        return Err(Error::Shape(format!(
            "vector has {} entries, model A has {}",
            v_a.len(),
            model.d_a()
        )));
    }
    let mut scored: Vec<(f64, usize)> = model
        .layout
        .shared()
        .filter(|&j| !dead.get(j).copied().unwrap_or(false))
        .map(|j| (cosine(model.w_dec_a.row(j), v_a).as_f64(), j))
        .filter(|(c, _)| *c > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(n);
    if scored.is_empty() {
        return Err(Error::DegenerateTransfer(
            "no live shared feature has positive cosine with the vector".into(),
        ));
    }
    let total: f64 = scored.iter().map(|s| s.0).sum();
    let mut v_b = Array1::<f64>::zeros(model.d_b());
    for &(w, j) in &scored {
        v_b.zip_mut_with(&model.w_dec_b.row(j), |acc, &d| *acc += w * d.as_f64());
    }
    v_b /= total;
    let nb = norm(v_b.view());
    if nb == 0.0 {
        return Err(Error::DegenerateTransfer(
            "transferred vector is zero".into(),
        ));
    }
    let target = norm(v_a).as_f64();
    Ok(v_b.mapv(|x| S::of(x * target / nb)))
}

/// Similarity `s = 1 + 4 max(0, cos*)` mapped to exclusivity `6 - s`.
pub fn exclusivity_from_cosine(cos_star: f64) -> f64 {
    6.0 - (1.0 + 4.0 * cos_star.max(0.0))
}

/// Geometric stand-in for the behavioural exclusivity score, in `[1, 5]`.
///
/// A feature leaning towards model A (`||d^A|| >= ||d^B||`) has its A
/// decoder carried into model B by the stitch's linear part and compared
/// with every B-observable concept; `cos*` is the best cosine. B-leaning
/// features go the other way through the inverse map against A-observable
/// concepts.
pub fn exclusivity_proxy<S: Scalar>(
    model: &CrosscoderModel<S>,
    stitch: &StitchMap,
    feature: usize,
    bank: &ConceptBank<S>,
    dead: &[bool],
) -> Result<f64> {
    if feature >= model.dict_size() {
        return Err(Error::Shape(format!("feature {feature} out of range")));
    }
    if dead.get(feature).copied().unwrap_or(false) {
        return Err(Error::UndefinedFeature(feature));
    }
    let d_a = model.w_dec_a.row(feature).mapv(|x| x.as_f64());
    let d_b = model.w_dec_b.row(feature).mapv(|x| x.as_f64());
    let (na, nb) = (norm(d_a.view()), norm(d_b.view()));
    if na + nb == 0.0 {
        return Err(Error::UndefinedFeature(feature));
    }
    let cos_star = if na >= nb {
        let moved = stitch.w.dot(&d_a);
        bank.concepts_b
            .rows()
            .into_iter()
            .map(|c| cosine(moved.view(), c.mapv(|x| x.as_f64()).view()))
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        let (wi, _) = stitch
            .inverse
            .as_ref()
            .ok_or_else(|| Error::DegenerateTransfer("stitch has no inverse map".into()))?;
        let moved = wi.dot(&d_b);
        (0..bank.n_concepts())
            .filter(|&i| bank.partition[i].observable_by_a())
            .map(|i| {
                cosine(
                    moved.view(),
                    bank.concepts.row(i).mapv(|x| x.as_f64()).view(),
                )
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(exclusivity_from_cosine(cos_star))
}

/// Relative Frobenius error of the fitted affine map `[W | b]` against the
/// bank's model-B map (median rescale included).
pub fn stitch_transform_error<S: Scalar>(map: &StitchMap, bank: &ConceptBank<S>) -> f64 {
    let s = bank.median_rescale;
    let mut err = 0.0;
    let mut total = 0.0;
    for ((i, j), &w) in map.w.indexed_iter() {
        let t = s * bank.transform_a[[i, j]].as_f64();
        err += (w - t).powi(2);
        total += t * t;
    }
    for (i, &b) in map.b.iter().enumerate() {
        let t = s * bank.transform_b[i].as_f64();
        err += (b - t).powi(2);
        total += t * t;
    }
    (err / total).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecord {
    pub feature: usize,
    pub class: ConceptKind,
    pub score: f64,
}

/// Proxy scores for every classified (live) feature.
pub fn proxy_scores<S: Scalar>(
    model: &CrosscoderModel<S>,
    stitch: &StitchMap,
    bank: &ConceptBank<S>,
    classes: &[Option<ConceptKind>],
) -> Result<Vec<ProxyRecord>> {
    let dead: Vec<bool> = classes.iter().map(Option::is_none).collect();
    classes
        .iter()
        .enumerate()
        .filter_map(|(j, c)| c.map(|class| (j, class)))
        .map(|(feature, class)| {
            Ok(ProxyRecord {
                feature,
                class,
                score: exclusivity_proxy(model, stitch, feature, bank, &dead)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crosscoder::{init_model, Architecture, PartitionLayout};
    use crate::synthdata::{build_concept_bank, ToyConfig, TransformKind};
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn hand_model() -> CrosscoderModel<f64> {
        let mut m = init_model(
            Architecture::Standard,
            2,
            2,
            1,
            PartitionLayout::standard(3),
            0.4,
            0,
        )
        .unwrap();
        m.w_dec_a = array![[1.0, 0.0], [0.6, 0.8], [-1.0, 0.0]];
        m.w_dec_b = array![[0.0, 2.0], [1.0, 1.0], [5.0, 5.0]];
        m
    }

    #[test]
    fn three_term_weighted_average() {
        let m = hand_model();
        let v = array![3.0, 0.0];
        let out = transfer_vector(&m, v.view(), 10, &[]).unwrap();
        // weights 1.0 and 0.6; feature 2 has cosine -1 and is left out
        let mean: Array1<f64> = (array![0.0, 2.0] * 1.0 + array![1.0, 1.0] * 0.6) / 1.6;
        let expect = &mean * (3.0 / mean.dot(&mean).sqrt());
        assert!((&out - &expect).iter().all(|d: &f64| d.abs() < 1e-12));
    }

    #[test]
    fn single_feature_transfer() {
        let m = hand_model();
        let v = array![0.0, 1.0];
        let out = transfer_vector(&m, v.view(), 1, &[]).unwrap();
        let expect = array![1.0, 1.0] / 2f64.sqrt();
        assert!((&out - &expect).iter().all(|d: &f64| d.abs() < 1e-12));
        // a dead feature is skipped
        let v = array![1.0, 0.1];
        let out = transfer_vector(&m, v.view(), 1, &[true, false, false]).unwrap();
        let expect = array![1.0, 1.0] * (v.dot(&v).sqrt() / 2f64.sqrt());
        assert!((&out - &expect).iter().all(|d: &f64| d.abs() < 1e-12));
    }

    #[test]
    fn orthogonal_dominant_feature() {
        let mut m = init_model(
            Architecture::Standard,
            3,
            3,
            1,
            PartitionLayout::standard(3),
            0.4,
            0,
        )
        .unwrap();
        m.w_dec_a = Array2::eye(3);
        m.w_dec_b = array![[0.0, 0.0, 3.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let out = transfer_vector(&m, array![2.0, 0.0, 0.0].view(), 10, &[]).unwrap();
        assert!((&out - &array![0.0, 0.0, 2.0])
            .iter()
            .all(|d: &f64| d.abs() < 1e-12));
    }

    #[test]
    fn degenerate_transfer() {
        let m = hand_model();
        let mut m2 = m.clone();
        m2.w_dec_a = array![[-1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]];
        assert!(matches!(
            transfer_vector(&m2, array![1.0, 0.0].view(), 3, &[]),
            Err(Error::DegenerateTransfer(_))
        ));
    }

    #[test]
    fn dfc_transfer_uses_shared_partition_only() {
        let layout = PartitionLayout::dedicated(4, 1, 1);
        let mut m = init_model::<f64>(Architecture::Dfc, 2, 2, 1, layout, 0.4, 0).unwrap();
        m.w_dec_a = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.7, 0.7]];
        m.w_dec_b = array![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let out = transfer_vector(&m, array![1.0, 0.0].view(), 1, &[]).unwrap();
        assert!((&out - &array![0.0, 1.0])
            .iter()
            .all(|d: &f64| d.abs() < 1e-12));
    }

    #[test]
    fn score_mapping() {
        assert_eq!(exclusivity_from_cosine(1.0), 1.0);
        assert_eq!(exclusivity_from_cosine(0.0), 5.0);
        assert_eq!(exclusivity_from_cosine(-0.7), 5.0);
        assert!((exclusivity_from_cosine(0.5) - 3.0).abs() < 1e-12);
    }

    fn identity_setup() -> (ConceptBank<f64>, StitchMap) {
        let cfg = ToyConfig {
            n_concepts: 16,
            d_act: 8,
            r_exclusive: 0.25,
            transform: TransformKind::Identity,
            ..ToyConfig::desk()
        };
        let bank = build_concept_bank::<f64>(&cfg, 3).unwrap();
        let map = StitchMap {
            w: Array2::eye(8),
            b: Array1::zeros(8),
            fit_mse: 0.0,
            inverse: Some((Array2::eye(8), Array1::zeros(8))),
            inversion_weight: 0.0,
        };
        (bank, map)
    }

    #[test]
    fn proxy_on_shared_concept_is_one() {
        let (bank, map) = identity_setup();
        let mut m = init_model::<f64>(
            Architecture::Standard,
            8,
            8,
            1,
            PartitionLayout::standard(2),
            0.4,
            0,
        )
        .unwrap();
        let s = bank.indices(ConceptKind::Shared)[0];
        m.w_dec_a.row_mut(0).assign(&bank.concepts.row(s));
        m.w_dec_b.row_mut(0).fill(0.0);
        let score = exclusivity_proxy(&m, &map, 0, &bank, &[]).unwrap();
        assert!((score - 1.0).abs() < 1e-9);
        assert!(matches!(
            exclusivity_proxy(&m, &map, 0, &bank, &[true]),
            Err(Error::UndefinedFeature(0))
        ));
    }

    proptest! {
        #[test]
        fn transfer_is_scale_equivariant(c in 0.01f64..50.0, x in -1.0f64..1.0, y in 0.1f64..1.0) {
            let m = hand_model();
            let v = array![x, y];
            let base = transfer_vector(&m, v.view(), 10, &[]).unwrap();
            let scaled = transfer_vector(&m, (&v * c).view(), 10, &[]).unwrap();
            prop_assert!((&scaled - &(&base * c)).iter().all(|d| d.abs() < 1e-9 * c.max(1.0)));
        }

        #[test]
        fn proxy_is_scale_invariant(seed in 0u64..50, c in 0.05f64..20.0) {
            let (bank, map) = identity_setup();
            let mut m = init_model::<f64>(Architecture::Standard, 8, 8, 1, PartitionLayout::standard(4), 0.4, seed).unwrap();
            // break the A/B norm tie so the leaning side is unambiguous
            m.w_dec_b.mapv_inplace(|x| x * if seed % 2 == 0 { 0.5 } else { 2.0 });
            let mut scaled = m.clone();
            let row = &scaled.w_dec_a.row(1) * c;
            scaled.w_dec_a.row_mut(1).assign(&row);
            let row_b = &scaled.w_dec_b.row(1) * c;
            scaled.w_dec_b.row_mut(1).assign(&row_b);
            let a = exclusivity_proxy(&m, &map, 1, &bank, &[]).unwrap();
            let b = exclusivity_proxy(&scaled, &map, 1, &bank, &[]).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
