mod common;

use std::collections::HashSet;

use nann_core::data::{generate_synthetic, parse_dataset, write_dataset, SyntheticSpec};
use nann_core::index::{GraphIndex, IndexConfig};
use nann_core::metric::{cosine_similarity, euclidean_distance};
use nann_core::search::{brute_force, c_hipanns, EuclideanEval, MetricEval, SearchParams};
use nann_core::train::pearson_correlation;
use proptest::prelude::*;

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, dim)
}

fn points(max_n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(vec_of(dim), 1..max_n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn euclidean_is_a_metric((a, b, c) in (1usize..12).prop_flat_map(|d| (vec_of(d), vec_of(d), vec_of(d)))) {
        let ab = euclidean_distance(&a, &b).unwrap();
        let bc = euclidean_distance(&b, &c).unwrap();
        let ac = euclidean_distance(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9 * (1.0 + ab + bc));
        prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        let cos = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&cos));
    }

    #[test]
    fn rank_alignment_ignores_affine_rescaling(
        xs in prop::collection::vec(-10.0f64..10.0, 3..40),
        seed in 0u64..1000,
        scale_x in 0.01f64..100.0,
        shift_x in -50.0f64..50.0,
        scale_y in 0.01f64..100.0,
        shift_y in -50.0f64..50.0,
    ) {
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| x * 0.5 + ((i as u64 * 2654435761 + seed) % 97) as f64 * 0.1)
            .collect();
        let Ok(rho) = pearson_correlation(&xs, &ys) else { return Ok(()) };
        let xs2: Vec<f64> = xs.iter().map(|x| scale_x * x + shift_x).collect();
        let ys2: Vec<f64> = ys.iter().map(|y| scale_y * y + shift_y).collect();
        let rho2 = pearson_correlation(&xs2, &ys2).unwrap();
        prop_assert!((rho - rho2).abs() <= 1e-9, "{} vs {}", rho, rho2);
        let loss = |r: f64| 1.0 / (r + 1.0 + 1e-3);
        prop_assert!((loss(rho) - loss(rho2)).abs() <= 1e-6 * loss(rho));
        // Negative scaling flips the sign.
        let flipped: Vec<f64> = xs.iter().map(|x| -scale_x * x).collect();
        prop_assert!((pearson_correlation(&flipped, &ys).unwrap() + rho).abs() <= 1e-9);
    }

    #[test]
    fn synthetic_records_resolve_and_round_trip(
        seed in 0u64..10_000,
        n_users in 1usize..15,
        n_items in 1usize..25,
        d_x in 1usize..6,
        z_dim in 1usize..4,
        density in 0.0f64..0.5,
    ) {
        let ds = generate_synthetic(&SyntheticSpec { seed, n_users, n_items, d_x, z_dim, density }).unwrap();
        let users: HashSet<u32> = ds.users.iter().map(|u| u.user_id).collect();
        let mut triples = HashSet::new();
        for x in &ds.interactions {
            prop_assert!(users.contains(&x.user_id));
            prop_assert!((x.item_id as usize) < ds.items.len());
            prop_assert!(x.behavior_type < ds.z_dim);
            prop_assert!(x.value.is_finite() && x.value >= 0.0);
            prop_assert!(triples.insert((x.user_id, x.item_id, x.behavior_type)));
        }
        let mut text = Vec::new();
        write_dataset(&ds, &mut text).unwrap();
        let back = parse_dataset(std::str::from_utf8(&text).unwrap()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn built_index_keeps_invariants(pts in points(120, 3), seed in 0u64..50, m in 2usize..8) {
        let cfg = IndexConfig { m, ef_construction: 16, level_prob: 0.3, seed, ..IndexConfig::default() };
        let built = GraphIndex::build_dense(cfg.clone(), &pts).unwrap();
        built.validate().unwrap();
        let sizes = built.layer_sizes();
        prop_assert_eq!(sizes[0], pts.len());
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        let mut folded = GraphIndex::new(cfg, 3).unwrap();
        for (i, p) in pts.iter().enumerate() {
            folded.insert(i as u32, p).unwrap();
        }
        prop_assert_eq!(folded, built);
    }

    #[test]
    fn parallel_search_returns_a_valid_top_list(
        pts in points(150, 2),
        query in vec_of(2),
        k in 1usize..12,
        kp in 1usize..6,
        hops in 1usize..4,
        deterministic in any::<bool>(),
    ) {
        let cfg = IndexConfig { m: 4, ef_construction: 16, level_prob: 0.3, ..IndexConfig::default() };
        let idx = GraphIndex::build_dense(cfg, &pts).unwrap();
        let eval = EuclideanEval { query: &query, embeddings: &pts };
        let params = SearchParams { k, k_parallel: kp.min(k), hops, ef: 2 * k, deterministic, threads: 2 };
        let r = c_hipanns(&idx, &eval, &params).unwrap();
        prop_assert!(r.items.len() <= k);
        prop_assert_eq!(r.items.len(), k.min(r.stats.nodes_visited));
        prop_assert_eq!(r.stats.metric_evaluations, r.stats.nodes_visited);
        for w in r.items.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
        for &(id, s) in &r.items {
            prop_assert_eq!(s, eval.evaluate(&[id]).unwrap()[0]);
        }
        // The best result can be no better than the exact best.
        let all: Vec<u32> = (0..pts.len() as u32).collect();
        let exact = brute_force(&eval, &all, 1).unwrap();
        prop_assert!(r.items[0].1 <= exact.items[0].1);
    }
}

#[test]
fn dangling_references_are_rejected_on_parse() {
    let ds = generate_synthetic(&SyntheticSpec {
        seed: 1,
        n_users: 3,
        n_items: 4,
        d_x: 2,
        z_dim: 2,
        density: 0.5,
    })
    .unwrap();
    let mut text = Vec::new();
    write_dataset(&ds, &mut text).unwrap();
    let text = String::from_utf8(text).unwrap();
    let last = text.lines().last().unwrap().to_string();
    let fields: Vec<&str> = last.split('\t').collect();
    let bad_item = format!("{}\t{}\t99\t{}\t{}", fields[0], fields[1], fields[3], fields[4]);
    assert!(parse_dataset(&text.replace(&last, &bad_item)).is_err());
    let bad_type = format!("{}\t{}\t{}\t7\t{}", fields[0], fields[1], fields[2], fields[4]);
    assert!(parse_dataset(&text.replace(&last, &bad_type)).is_err());
}
