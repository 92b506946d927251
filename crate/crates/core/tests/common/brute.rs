//! Exhaustive O(M * n) enumeration of concept recovery, feature
//! classification and false positives, written directly from the metric
//! definitions.

use crossdiff_core::crosscoder::{
    init_model, Architecture, CrosscoderModel, FeatureRole, PartitionLayout,
};
use crossdiff_core::synthdata::{build_concept_bank, ConceptBank, ConceptKind, ToyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Default, PartialEq, Eq)]
pub struct BruteCounts {
    pub concepts: [usize; 3],
    pub recovered: [usize; 3],
    pub classified: [usize; 3],
    pub fp_shared: usize,
    pub fp_none: usize,
    pub tp: usize,
}

fn slot(k: ConceptKind) -> usize {
    match k {
        ConceptKind::Shared => 0,
        ConceptKind::AExclusive => 1,
        ConceptKind::BExclusive => 2,
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn brute_force(
    model: &CrosscoderModel<f64>,
    bank: &ConceptBank<f64>,
    theta: f64,
    theta_low: f64,
    theta_high: f64,
    dead: &[bool],
) -> BruteCounts {
    let n = bank.n_concepts();
    let m = model.dict_size();
    let mut out = BruteCounts::default();
    let mut recovers = vec![vec![false; n]; m];
    for i in 0..n {
        let kind = bank.partition[i];
        out.concepts[slot(kind)] += 1;
        let c_a: Vec<f64> = bank.concepts.row(i).to_vec();
        let c_b: Option<Vec<f64>> = bank.concept_b(i).map(|r| r.to_vec());
        let mut any = false;
        for j in 0..m {
            let da: Vec<f64> = model.w_dec_a.row(j).to_vec();
            let db: Vec<f64> = model.w_dec_b.row(j).to_vec();
            let in_a = kind != ConceptKind::BExclusive && cos(&da, &c_a) > theta;
            let in_b = kind != ConceptKind::AExclusive
                && c_b.as_ref().is_some_and(|cb| cos(&db, cb) > theta);
            if in_a || in_b {
                recovers[j][i] = true;
                any = true;
            }
        }
        if any {
            out.recovered[slot(kind)] += 1;
        }
    }
    for j in 0..m {
        if dead[j] {
            continue;
        }
        let na = model
            .w_dec_a
            .row(j)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let nb = model
            .w_dec_b
            .row(j)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if na + nb == 0.0 {
            continue;
        }
        let class = if model.arch == Architecture::Dfc {
            match model.layout.role(j) {
                FeatureRole::AExclusive => ConceptKind::AExclusive,
                FeatureRole::BExclusive => ConceptKind::BExclusive,
                _ => ConceptKind::Shared,
            }
        } else {
            let r = na / (na + nb);
            if r > theta_high {
                ConceptKind::AExclusive
            } else if r < theta_low {
                ConceptKind::BExclusive
            } else {
                ConceptKind::Shared
            }
        };
        out.classified[slot(class)] += 1;
        if class == ConceptKind::Shared {
            continue;
        }
        let hits = |want_excl: bool| {
            (0..n).any(|i| recovers[j][i] && bank.partition[i].is_exclusive() == want_excl)
        };
        if hits(true) {
            out.tp += 1;
        } else if hits(false) {
            out.fp_shared += 1;
        } else {
            out.fp_none += 1;
        }
    }
    out
}

pub struct MetricInstance {
    pub bank: ConceptBank<f64>,
    pub model: CrosscoderModel<f64>,
    pub dead: Vec<bool>,
}

/// A random bank (n <= 64) and a model whose decoder rows are a mix of
/// noisy concept copies at assorted per-model scales and random directions.
pub fn random_metric_instance(seed: u64) -> MetricInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toy = ToyConfig {
        n_concepts: rng.gen_range(8..=64),
        d_act: rng.gen_range(4..=16),
        r_exclusive: rng.gen_range(0.1..0.5),
        ..ToyConfig::desk()
    };
    let bank = build_concept_bank::<f64>(&toy, seed).unwrap();
    let arch = [Architecture::Standard, Architecture::Dfc, Architecture::Dsf][seed as usize % 3];
    let m = rng.gen_range(8..=128);
    let layout = match arch {
        Architecture::Standard => PartitionLayout::standard(m),
        Architecture::Dfc => {
            PartitionLayout::dedicated(m, rng.gen_range(1..=m / 4), rng.gen_range(1..=m / 4))
        }
        Architecture::Dsf => PartitionLayout::designated(m, rng.gen_range(1..=m / 4)),
    };
    let d = toy.d_act;
    let mut model = init_model(arch, d, d, 1, layout, 0.4, seed).unwrap();
    for j in 0..m {
        if rng.gen_bool(0.6) {
            let i = rng.gen_range(0..toy.n_concepts);
            let noise = rng.gen_range(0.0..0.8);
            let sa = [0.0, 0.05, 0.3, 1.0, 2.0][rng.gen_range(0..5)];
            let sb = [0.0, 0.05, 0.3, 1.0, 2.0][rng.gen_range(0..5)];
            for t in 0..d {
                model.w_dec_a[[j, t]] =
                    sa * (bank.concepts[[i, t]] + noise * rng.gen_range(-0.5..0.5));
            }
            if let Some(cb) = bank.concept_b(i) {
                for t in 0..d {
                    model.w_dec_b[[j, t]] = sb * (cb[t] + noise * rng.gen_range(-0.5..0.5));
                }
            }
        }
    }
    if arch == Architecture::Dsf {
        for j in model.layout.designated_range() {
            let row = model.w_dec_a.row(j).to_owned();
            model.w_dec_b.row_mut(j).assign(&row);
        }
    }
    model.enforce_structural_zeros();
    let dead = (0..m).map(|_| rng.gen_bool(0.1)).collect();
    MetricInstance { bank, model, dead }
}
