//! Central finite differences against the analytic gradients, with the
//! TopK and AuxK selections frozen at the unperturbed point.

use crossdiff_core::crosscoder::{init_model, Architecture, CrosscoderModel, PartitionLayout};
use crossdiff_core::training::{loss_and_grads, loss_with_selection};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Instance {
    pub model: CrosscoderModel<f64>,
    pub x_a: Array2<f64>,
    pub x_b: Array2<f64>,
    pub k: usize,
    pub dead: Vec<usize>,
    pub alpha: f64,
    pub k_aux: usize,
}

pub fn random_instance(seed: u64, arch: Architecture) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_a = rng.gen_range(2..=8);
    let d_b = if arch == Architecture::Dsf {
        d_a
    } else {
        rng.gen_range(2..=8)
    };
    let m = rng.gen_range(4..=16);
    let rows = rng.gen_range(1..=4);
    let k = rng.gen_range(1..=3.min(m));
    let layout = match arch {
        Architecture::Standard => PartitionLayout::standard(m),
        Architecture::Dfc => {
            let a = rng.gen_range(1..=m / 3);
            let b = rng.gen_range(1..=m / 3);
            PartitionLayout::dedicated(m, a, b)
        }
        Architecture::Dsf => PartitionLayout::designated(m, rng.gen_range(1..=m / 2)),
    };
    let mut model = init_model(arch, d_a, d_b, k, layout, 0.5, seed).unwrap();
    let mut unif = |s: f64| rng.gen_range(-s..s);
    model.b_enc.mapv_inplace(|_| unif(0.3));
    model.b_dec_a.mapv_inplace(|_| unif(0.3));
    model.b_dec_b.mapv_inplace(|_| unif(0.3));
    let x_a = Array2::from_shape_fn((rows, d_a), |_| unif(1.5));
    let x_b = Array2::from_shape_fn((rows, d_b), |_| unif(1.5));
    let dead: Vec<usize> = (0..m).filter(|_| rng.gen_bool(0.5)).collect();
    let alpha = if rng.gen_bool(0.5) { 0.03 } else { 0.7 };
    let k_aux = rng.gen_range(1..=4);
    Instance {
        model,
        x_a,
        x_b,
        k,
        dead,
        alpha,
        k_aux,
    }
}

/// Worst relative error over every free parameter:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
/// Entries that are not free parameters (DFC cross-partition rows and
/// columns) must have an exactly zero analytic gradient; DSF tied rows are
/// perturbed as one parameter.
pub fn max_relative_error(inst: &Instance, h: f64) -> f64 {
    let base = &inst.model;
    let out = loss_and_grads(
        base,
        inst.x_a.view(),
        inst.x_b.view(),
        inst.k,
        &inst.dead,
        inst.alpha,
        inst.k_aux,
    )
    .unwrap();
    let loss_at = |m: &CrosscoderModel<f64>| {
        loss_with_selection(
            m,
            inst.x_a.view(),
            inst.x_b.view(),
            out.selected.clone(),
            out.aux.clone(),
            inst.alpha,
        )
        .parts
        .total
    };
    let m = base.dict_size();
    let (d_a, d_b) = (base.d_a(), base.d_b());
    let grads = out.grads.slices();
    let mut worst: f64 = 0.0;
    for tensor in 0..7 {
        for idx in 0..grads[tensor].len() {
            let analytic = grads[tensor][idx];
            // feature owning this entry
            let feature = match tensor {
                0 | 1 => Some(idx % m),
                3 => Some(idx / d_a),
                4 => Some(idx / d_b),
                _ => None,
            };
            let frozen_zero = base.arch == Architecture::Dfc
                && feature.is_some_and(|f| match tensor {
                    1 | 4 => base.layout.a_exclusive().contains(&f),
                    0 | 3 => base.layout.b_exclusive().contains(&f),
                    _ => false,
                });
            if frozen_zero {
                assert_eq!(analytic, 0.0, "non-parameter has gradient");
                continue;
            }
            let tied = base.arch == Architecture::Dsf
                && (tensor == 3 || tensor == 4)
                && feature.is_some_and(|f| base.layout.designated_range().contains(&f));
            let perturb = |delta: f64| {
                let mut p = base.clone();
                {
                    let slices = p.param_slices_mut();
                    slices[tensor][idx] += delta;
                    if tied {
                        let other = if tensor == 3 { 4 } else { 3 };
                        slices[other][idx] += delta;
                    }
                }
                loss_at(&p)
            };
            let numeric = (perturb(h) - perturb(-h)) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
