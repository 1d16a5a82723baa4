#![allow(dead_code)]

use nann_core::data::{generate_synthetic, SyntheticSpec};
use nann_core::metric::{Activation, MetricModel, ModelShape};
use nann_core::train::{loss_and_gradient, total_loss, FeatureTable, LabeledPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Points scattered around ten Gaussian centers.
pub fn clustered(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..10)
        .map(|_| (0..dim).map(|_| 4.0 * normal.sample(&mut rng)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            c.iter().map(|x| x + normal.sample(&mut rng)).collect()
        })
        .collect()
}

pub struct GradCheck {
    pub params: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

/// Analytic gradient vs central differences of the independently computed
/// objective, over every parameter of a width-8 model.
pub fn gradient_check(seed: u64, activation: Activation, lambda: f64, with_noise: bool) -> GradCheck {
    let ds = generate_synthetic(&SyntheticSpec {
        seed,
        n_users: 6,
        n_items: 10,
        d_x: 5,
        z_dim: 3,
        density: 0.2,
    })
    .unwrap();
    let table = FeatureTable::from_dataset(&ds);
    let mut shape = ModelShape::new(5, 8, vec![8, 8], 3);
    shape.activation = activation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut model = MetricModel::random(&shape, &mut rng).unwrap();
    // Perturb the uniform attention so its gradient is exercised off the symmetric point.
    for a in model.attention.iter_mut() {
        *a += rng.random_range(-0.2..0.2);
    }
    let batch: Vec<LabeledPair> = (0..6)
        .map(|i| LabeledPair {
            user: i % 6,
            item: (3 * i + 1) % 10,
            target: (0..3).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise = with_noise.then_some(noise.as_slice());
    let scl_pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 6, (7 * i + 2) % 10)).collect();
    let eps = 1e-3;

    let (_, grad) = loss_and_gradient(&model, &table, &batch, noise, &scl_pairs, lambda, eps).unwrap();
    let analytic = grad.to_flat();
    let names: Vec<String> = model
        .blocks()
        .iter()
        .flat_map(|(name, b)| (0..b.len()).map(move |i| format!("{name}[{i}]")))
        .collect();
    let base = model.to_flat();
    let mut worst = (0.0, String::new());
    for i in 0..base.len() {
        let mut eval_at = |x: f64| {
            let mut p = base.clone();
            p[i] = x;
            model.set_flat(&p).unwrap();
            total_loss(&model, &table, &batch, noise, &scl_pairs, lambda, eps)
                .unwrap()
                .total
        };
        let numeric = (eval_at(base[i] + FD_STEP) - eval_at(base[i] - FD_STEP)) / (2.0 * FD_STEP);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst.0 {
            worst = (rel, names[i].clone());
        }
    }
    GradCheck {
        params: base.len(),
        max_rel_err: worst.0,
        worst: worst.1,
    }
}
