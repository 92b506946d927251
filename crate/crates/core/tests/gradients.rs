mod common;

use common::gradcheck::{max_relative_error, random_instance};
use crossdiff_core::crosscoder::Architecture;

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..30u64 {
        for arch in [Architecture::Standard, Architecture::Dfc, Architecture::Dsf] {
            let inst = random_instance(seed, arch);
            let err = max_relative_error(&inst, 1e-3);
            assert!(err < 1e-4, "seed {seed} {arch}: relative error {err}");
        }
    }
}

#[test]
fn aux_term_is_exercised() {
    let mut with_aux = 0;
    for seed in 0..30u64 {
        let inst = random_instance(seed, Architecture::Standard);
        let out = crossdiff_core::training::loss_and_grads(
            &inst.model,
            inst.x_a.view(),
            inst.x_b.view(),
            inst.k,
            &inst.dead,
            inst.alpha,
            inst.k_aux,
        )
        .unwrap();
        if out.parts.aux > 0.0 {
            with_aux += 1;
        }
    }
    assert!(with_aux >= 10);
}
