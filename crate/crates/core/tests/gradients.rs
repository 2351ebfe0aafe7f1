//! Analytic gradients of the Combiner and the contrastive loss against
//! central finite differences in f64.

mod common;

use cir_core::combiner::{CombineMode, Phase};
use common::*;
use ndarray::Array2;

#[test]
fn small_instance_eval_phase_matches_finite_differences() {
    // d = 6, batch 3, eval phase, every parameter coordinate.
    let mut r = rng(6);
    let inst = Instance {
        params: random_params(6, 6),
        img: gaussian_matrix(&mut r, 3, 6),
        txt: gaussian_matrix(&mut r, 3, 6),
        tgt: gaussian_matrix(&mut r, 3, 6),
        mode: CombineMode::Full,
        phase: Phase::Eval,
        tau: 1.0,
    };
    let stats = check_gradients(&inst, usize::MAX, 0);
    assert!(stats.checked > 4000, "{stats:?}");
    assert!(stats.worst_rel < REL_TOL, "{stats:?}");
}

#[test]
fn every_mode_and_phase_matches_finite_differences() {
    let mut total = FdStats::default();
    for i in 0..30 {
        let inst = gradient_instance(i, 1.0);
        let stats = check_gradients(&inst, 12, i as u64);
        assert!(
            stats.worst_rel < REL_TOL,
            "instance {i} ({:?}, {:?}): {stats:?}",
            inst.mode,
            inst.phase
        );
        total.merge(stats);
    }
    // Kinks are rare with continuous random data.
    assert!(total.skipped_kinks * 20 < total.checked, "{total:?}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for (b, d, tau) in [(2, 3, 1.0), (5, 4, 1.0), (8, 16, 1.0), (4, 8, 10.0)] {
        let c: Array2<f64> = gaussian_matrix(&mut r, b, d);
        let t = gaussian_matrix(&mut r, b, d);
        let worst = check_loss_gradient(&c, &t, tau);
        assert!(worst < REL_TOL, "b={b} d={d} tau={tau}: {worst}");
    }
}
