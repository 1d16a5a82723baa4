use nann_core::data::{generate_synthetic, SyntheticSpec};
use nann_core::metric::{Dense, MetricModel};
use nann_core::train::{fit, TrainConfig};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        n_users: 200,
        n_items: 500,
        d_x: 16,
        z_dim: 3,
        density: 0.01,
    }
}

#[test]
fn fifty_epochs_cut_the_objective_by_thirty_percent() {
    let ds = generate_synthetic(&spec(4)).unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let state = fit(&ds, &cfg).unwrap();
    let (first, last) = state.smoothed_total(20).unwrap();
    assert!(last <= 0.7 * first, "loss {first} -> {last}");
    assert!(state.history.iter().all(|r| r.total.is_finite()));
}

/// Elementwise bound on the output change caused by replacing `a` with `b`
/// weights, given the input `x` and an input perturbation bound `e`.
fn layer_bound(a: &Dense, b: &Dense, x: &[f64], e: &[f64]) -> Vec<f64> {
    (0..a.out_dim)
        .map(|r| {
            let row = r * a.in_dim..(r + 1) * a.in_dim;
            let mut s = (b.bias[r] - a.bias[r]).abs();
            for ((wa, wb), (xi, ei)) in a.weight[row.clone()].iter().zip(&b.weight[row]).zip(x.iter().zip(e)) {
                s += wb.abs() * ei + (wb - wa).abs() * xi.abs();
            }
            s
        })
        .collect()
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Propagated worst-case effect of half-precision rounding on one relevance value.
fn quantization_bound(full: &MetricModel, half: &MetricModel, xu: &[f64], xv: &[f64]) -> f64 {
    let zero_u = vec![0.0; xu.len()];
    let zero_v = vec![0.0; xv.len()];
    let mut e = layer_bound(&full.user_projector, &half.user_projector, xu, &zero_u);
    e.extend(layer_bound(&full.item_projector, &half.item_projector, xv, &zero_v));
    let mut a = full.project_user(xu).unwrap();
    a.extend(full.project_item(xv).unwrap());
    let last = full.layers.len() - 1;
    for (m, (la, lb)) in full.layers.iter().zip(&half.layers).enumerate() {
        let next_e = layer_bound(la, lb, &a, &e);
        let mut next_a = la.apply(&a);
        if m != last {
            relu(&mut next_a);
        }
        a = next_a;
        e = next_e;
    }
    let mut bound = 0.0;
    for ((aa, ab), (z, ez)) in full.attention.iter().zip(&half.attention).zip(a.iter().zip(&e)) {
        bound += ab.abs() * ez + (ab - aa).abs() * z.abs();
    }
    bound
}

#[test]
fn half_precision_error_stays_within_propagated_bound() {
    let ds = generate_synthetic(&spec(8)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let full = fit(&ds, &cfg).unwrap().export_model();
    let half = full.quantize().unwrap();
    let mut worst_ratio: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    for u in 0..40 {
        for v in (0..500).step_by(20) {
            let xu = &ds.users[u].raw_features;
            let xv = &ds.items[v].raw_features;
            let d_full = full
                .relevance(&full.project_user(xu).unwrap(), &full.project_item(xv).unwrap())
                .unwrap();
            let d_half = half
                .relevance(&half.project_user(xu).unwrap(), &half.project_item(xv).unwrap())
                .unwrap();
            let bound = quantization_bound(&full, &half, xu, xv);
            let diff = (d_full - d_half).abs();
            assert!(diff <= bound * (1.0 + 1e-9) + 1e-12, "diff {diff} > bound {bound}");
            worst_ratio = worst_ratio.max(diff / bound.max(1e-300));
            max_diff = max_diff.max(diff);
        }
    }
    eprintln!("1000 pairs: max |fp16 - fp32| = {max_diff:.3e}, worst diff/bound = {worst_ratio:.3}");
    // The bound is not vacuous relative to the observed error scale.
    assert!(worst_ratio > 0.0);
}
