use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;

use super::{ConceptKind, ToyConfig, TransformKind};
use crate::error::Result;
use crate::linalg::{median, norm};
use crate::rng::{normal, stream_rng, Stream};
use crate::scalar::Scalar;

/// Ground-truth concepts for both simulated models.
#[derive(Debug, Clone)]
pub struct ConceptBank<S> {
    /// `n_concepts x d_act`, unit-norm rows in the model-A frame.
    pub concepts: Array2<S>,
    pub partition: Vec<ConceptKind>,
    /// Linear part of the model-B map (`d_act x d_act`).
    pub transform_a: Array2<S>,
    /// Translation of the model-B map.
    pub transform_b: Array1<S>,
    /// Model-B frame vectors for every B-observable concept, in increasing
    /// concept order (see [`ConceptBank::b_rows`]).
    pub concepts_b: Array2<S>,
    /// Concept id of each row of `concepts_b`.
    pub b_rows: Vec<usize>,
    /// Factor applied after the affine map to preserve the median norm.
    pub median_rescale: f64,
    pub probs: Vec<f64>,
    pub rng_seed: u64,
}

impl<S: Scalar> ConceptBank<S> {
    pub fn n_concepts(&self) -> usize {
        self.concepts.nrows()
    }

    pub fn d_act(&self) -> usize {
        self.concepts.ncols()
    }

    pub fn count(&self, kind: ConceptKind) -> usize {
        self.partition.iter().filter(|&&k| k == kind).count()
    }

    pub fn indices(&self, kind: ConceptKind) -> Vec<usize> {
        (0..self.partition.len())
            .filter(|&i| self.partition[i] == kind)
            .collect()
    }

    /// Row of `concepts_b` holding concept `i`, if B observes it.
    pub fn b_row_of(&self, concept: usize) -> Option<usize> {
        self.b_rows.binary_search(&concept).ok()
    }

    /// Model-B frame vector of a B-observable concept.
    pub fn concept_b(&self, concept: usize) -> Option<ndarray::ArrayView1<'_, S>> {
        self.b_row_of(concept).map(|r| self.concepts_b.row(r))
    }

    /// Model-B image of an arbitrary model-A vector under the bank's affine
    /// map (including the median rescale).
    pub fn map_to_b(&self, v: ndarray::ArrayView1<'_, S>) -> Array1<S> {
        let s = S::of(self.median_rescale);
        (self.transform_a.dot(&v) + &self.transform_b) * s
    }
}

/// Samples concepts, their partition, the model-B transform and the
/// activation probabilities.
pub fn build_concept_bank<S: Scalar>(cfg: &ToyConfig, seed: u64) -> Result<ConceptBank<S>> {
    cfg.validate()?;
    let n = cfg.n_concepts;
    let d = cfg.d_act;
    let mut rng = stream_rng(seed, Stream::Bank, 0);

    let mut concepts = Array2::<f64>::zeros((n, d));
    for mut row in concepts.axis_iter_mut(Axis(0)) {
        row.mapv_inplace(|_| normal(&mut rng));
        let len = norm(row.view());
        row.mapv_inplace(|x| x / len);
    }

    // Shuffle ids, then label contiguous blocks of the shuffled order.
    let n_excl = cfg.exclusive_per_model();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut partition = vec![ConceptKind::Shared; n];
    for &i in &order[..n_excl] {
        partition[i] = ConceptKind::AExclusive;
    }
    for &i in &order[n_excl..2 * n_excl] {
        partition[i] = ConceptKind::BExclusive;
    }

    let (transform_a, transform_b) = match cfg.transform {
        TransformKind::Random => {
            let std = cfg.transform_variance.sqrt();
            let a = Array2::from_shape_simple_fn((d, d), || std * normal(&mut rng));
            let b = Array1::from_shape_simple_fn(d, || cfg.tau * normal(&mut rng));
            (a, b)
        }
        TransformKind::Identity => (Array2::eye(d), Array1::zeros(d)),
    };

    let b_rows: Vec<usize> = (0..n).filter(|&i| partition[i].observable_by_b()).collect();
    let mut mapped = Array2::<f64>::zeros((b_rows.len(), d));
    for (r, &i) in b_rows.iter().enumerate() {
        let img = transform_a.dot(&concepts.row(i)) + &transform_b;
        mapped.row_mut(r).assign(&img);
    }
    let src_norms: Vec<f64> = b_rows.iter().map(|&i| norm(concepts.row(i))).collect();
    let dst_norms: Vec<f64> = mapped.axis_iter(Axis(0)).map(norm).collect();
    let median_rescale = match (median(&src_norms), median(&dst_norms)) {
        (Some(src), Some(dst)) if dst > 0.0 => src / dst,
        _ => 1.0,
    };
    mapped.mapv_inplace(|x| x * median_rescale);

    let probs = build_probabilities(cfg, seed)?;

    Ok(ConceptBank {
        concepts: concepts.mapv(S::of),
        partition,
        transform_a: transform_a.mapv(S::of),
        transform_b: transform_b.mapv(S::of),
        concepts_b: mapped.mapv(S::of),
        b_rows,
        median_rescale,
        probs,
        rng_seed: seed,
    })
}

/// Correlated, frequency-decayed activation probabilities.
///
/// A latent `z = L u + sigma_diag g` with `L_ij ~ N(0, 0.5/sqrt(r))` has
/// covariance `L L^T + sigma_diag^2 I`; probabilities are `sigmoid(z)`,
/// decayed by `exp(-decay * perm(i))` and rescaled to sum to `k_target`
/// before the lower clamp.
pub fn build_probabilities(cfg: &ToyConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = cfg.n_concepts;
    let r = cfg.correlation_rank;
    let mut rng = stream_rng(seed, Stream::Probabilities, 0);

    let l_std = (0.5 / (r as f64).sqrt()).sqrt();
    let l = Array2::from_shape_simple_fn((n, r), || l_std * normal(&mut rng));
    let u = Array1::from_shape_simple_fn(r, || normal(&mut rng));
    let g = Array1::from_shape_simple_fn(n, || normal(&mut rng));
    let z = l.dot(&u) + g * cfg.sigma_diag;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    Ok(probabilities_from_latent(
        z.as_slice().expect("contiguous"),
        &perm,
        cfg.decay,
        cfg.k_target(),
        cfg.min_prob,
    ))
}

/// Deterministic tail of the probability pipeline: sigmoid, decay by the
/// permuted rank, rescale to `k_target`, clamp below at `min_prob`. No upper
/// clamp is applied; values above one mean "always active".
pub fn probabilities_from_latent(
    z: &[f64],
    perm: &[usize],
    decay: f64,
    k_target: f64,
    min_prob: f64,
) -> Vec<f64> {
    let decayed: Vec<f64> = z
        .iter()
        .zip(perm)
        .map(|(&zi, &rank)| sigmoid(zi) * (-decay * rank as f64).exp())
        .collect();
    let total: f64 = decayed.iter().sum();
    decayed
        .iter()
        .map(|&p| (p * k_target / total).max(min_prob))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            n_concepts: 64,
            d_act: 16,
            r_exclusive: 0.25,
            ..ToyConfig::paper()
        }
    }

    #[test]
    fn paper_partition_sizes() {
        let cfg = ToyConfig::paper();
        assert_eq!(cfg.exclusive_per_model(), 51);
        let bank = build_concept_bank::<f32>(&cfg, 0).unwrap();
        assert_eq!(bank.count(ConceptKind::AExclusive), 51);
        assert_eq!(bank.count(ConceptKind::BExclusive), 51);
        assert_eq!(bank.count(ConceptKind::Shared), 2048 - 102);
    }

    #[test]
    fn eight_concept_partition() {
        let cfg = ToyConfig {
            n_concepts: 8,
            d_act: 4,
            r_exclusive: 0.5,
            ..ToyConfig::paper()
        };
        let bank = build_concept_bank::<f64>(&cfg, 3).unwrap();
        assert_eq!(bank.count(ConceptKind::Shared), 4);
        assert_eq!(bank.count(ConceptKind::AExclusive), 2);
        assert_eq!(bank.count(ConceptKind::BExclusive), 2);
    }

    #[test]
    fn unit_rows_and_median_preserved() {
        let bank = build_concept_bank::<f64>(&small(), 11).unwrap();
        for row in bank.concepts.axis_iter(Axis(0)) {
            assert!((norm(row) - 1.0).abs() < 1e-6);
        }
        let src: Vec<f64> = bank
            .b_rows
            .iter()
            .map(|&i| norm(bank.concepts.row(i)))
            .collect();
        let dst: Vec<f64> = bank.concepts_b.axis_iter(Axis(0)).map(norm).collect();
        assert!((median(&src).unwrap() - median(&dst).unwrap()).abs() < 1e-6);
        assert_eq!(
            bank.concepts_b.nrows(),
            64 - bank.count(ConceptKind::AExclusive)
        );
    }

    #[test]
    fn identity_transform_reproduces_shared_rows() {
        let cfg = ToyConfig {
            transform: TransformKind::Identity,
            tau: 0.0,
            ..small()
        };
        let bank = build_concept_bank::<f64>(&cfg, 5).unwrap();
        for i in bank.indices(ConceptKind::Shared) {
            let b = bank.concept_b(i).unwrap();
            for (x, y) in b.iter().zip(bank.concepts.row(i).iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_bank() {
        let a = build_concept_bank::<f32>(&small(), 9).unwrap();
        let b = build_concept_bank::<f32>(&small(), 9).unwrap();
        assert_eq!(a.concepts, b.concepts);
        assert_eq!(a.concepts_b, b.concepts_b);
        assert_eq!(a.partition, b.partition);
        assert_eq!(a.probs, b.probs);
        let c = build_concept_bank::<f32>(&small(), 10).unwrap();
        assert_ne!(a.concepts, c.concepts);
    }

    #[test]
    fn invalid_dimensions_name_field() {
        let cfg = ToyConfig {
            d_act: 1,
            ..small()
        };
        let err = build_concept_bank::<f32>(&cfg, 0).unwrap_err();
        assert!(err.to_string().contains("toy.d_act"));
        let cfg = ToyConfig {
            r_exclusive: 1.0,
            ..small()
        };
        assert!(build_concept_bank::<f32>(&cfg, 0)
            .unwrap_err()
            .to_string()
            .contains("toy.r_exclusive"));
    }

    #[test]
    fn probabilities_sum_to_target_and_respect_floor() {
        let cfg = ToyConfig {
            decay: 0.0,
            ..ToyConfig::paper()
        };
        let p = build_probabilities(&cfg, 1).unwrap();
        let k = cfg.k_target();
        let sum: f64 = p.iter().sum();
        // The floor can only add mass, at most n * min_prob.
        assert!(sum >= k - 1e-9);
        assert!(sum <= k + cfg.n_concepts as f64 * cfg.min_prob);
        assert!(p.iter().all(|&x| x >= cfg.min_prob));
    }

    #[test]
    fn zero_latent_gives_half_before_decay() {
        let n = 10;
        let z = vec![0.0; n];
        let perm: Vec<usize> = (0..n).collect();
        // k_target = n / 2 makes the rescale factor exactly one.
        let p = probabilities_from_latent(&z, &perm, 0.0, n as f64 / 2.0, 1e-4);
        assert!(p.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn huge_target_stays_finite_and_monotone() {
        let z: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 3.0).collect();
        let perm = vec![0; 20];
        let p = probabilities_from_latent(&z, &perm, 0.0, 1e6, 1e-4);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!(p.windows(2).all(|w| w[1] > w[0]));
        assert!(p[0] > 1.0);
    }
}
