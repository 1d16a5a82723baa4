mod common;

use common::gradient_check;
use nann_core::metric::Activation;

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let g = gradient_check(1, Activation::Relu, 1.0, true);
    assert!(g.max_rel_err <= 1e-4, "{} at {}", g.max_rel_err, g.worst);
    assert!(g.params > 300);
}

#[test]
fn prediction_only_gradient_matches() {
    let g = gradient_check(2, Activation::Relu, 0.0, false);
    assert!(g.max_rel_err <= 1e-4, "{} at {}", g.max_rel_err, g.worst);
}

#[test]
fn linear_network_gradient_matches() {
    let g = gradient_check(3, Activation::Identity, 0.7, true);
    assert!(g.max_rel_err <= 1e-4, "{} at {}", g.max_rel_err, g.worst);
}

#[test]
fn several_seeds_agree() {
    for seed in 10..14 {
        let g = gradient_check(seed, Activation::Relu, 1.0, seed % 2 == 0);
        assert!(g.max_rel_err <= 1e-4, "seed {seed}: {} at {}", g.max_rel_err, g.worst);
    }
}
