//! Acceptance gate: runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nann_core::batch::{BatchConfig, BatchQueue, EvalPair, ModelEngine};
use nann_core::data::{generate_synthetic, ItemId, SyntheticSpec};
use nann_core::eval::{self, RunConfig};
use nann_core::index::{GraphIndex, IndexConfig};
use nann_core::metric::{Activation, MetricModel, ModelShape};
use nann_core::search::{brute_force, c_hipanns, greedy_search, EuclideanEval, ModelEval, SearchParams};
use nann_core::train::fit;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Per-query quality numbers compared across repeated runs.
type QualityRow = (f64, f64, f64, usize, usize, usize);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Exhaustive budgets reproduce brute force on 500-item sets.
fn oracle_exactness() -> Outcome {
    let n = 500;
    let mut complete_edges = Vec::new();
    for a in 0..n as ItemId {
        for b in a + 1..n as ItemId {
            complete_edges.push((a, b));
        }
    }
    let mut failures = Vec::new();
    for trial in 0..50u64 {
        let ds = generate_synthetic(&SyntheticSpec {
            seed: trial,
            n_users: 2,
            n_items: n,
            d_x: 8,
            z_dim: 3,
            density: 0.01,
        })
        .map_err(|e| e.to_string())?;
        let shape = ModelShape::new(8, 8, vec![16], 3);
        let model = MetricModel::random(&shape, &mut ChaCha8Rng::seed_from_u64(trial)).unwrap();
        let emb = eval::embed(&model, &ds).unwrap();
        let metric = ModelEval {
            model: &model,
            user: &emb.users[0],
            item_embeddings: &emb.items,
        };
        let all: Vec<ItemId> = (0..n as ItemId).collect();

        let idx = eval::build_index(
            &IndexConfig {
                seed: trial,
                ..IndexConfig::default()
            },
            &emb,
        )
        .unwrap();
        let greedy = greedy_search(
            &idx,
            &metric,
            &SearchParams {
                ef: n,
                ..SearchParams::new(10)
            },
        )
        .unwrap();
        if greedy.items != brute_force(&metric, &all, 10).unwrap().items {
            failures.push(format!("greedy trial {trial} (base components {})", idx.base_components()));
        }

        let items: Vec<(ItemId, Vec<f64>)> = emb.items.iter().enumerate().map(|(i, v)| (i as ItemId, v.clone())).collect();
        let complete = GraphIndex::from_edges(
            IndexConfig {
                m: n / 2,
                ..IndexConfig::default()
            },
            &items,
            &vec![0; n],
            &[complete_edges.clone()],
            (trial % n as u64) as ItemId,
        )
        .unwrap();
        let full = SearchParams {
            k: n,
            k_parallel: n,
            hops: 1,
            ef: n,
            deterministic: true,
            threads: 1,
        };
        let par = c_hipanns(&complete, &metric, &full).unwrap();
        if par.items != brute_force(&metric, &all, n).unwrap().items {
            failures.push(format!("parallel trial {trial}"));
        }
    }
    check(
        failures.is_empty(),
        format!("50 trials, mismatches: {}", if failures.is_empty() { "none".into() } else { failures.join(", ") }),
    )
}

/// Recall@10 floor on clustered data with the Euclidean metric.
fn quality_floor() -> Outcome {
    let mut pts = common::clustered(2100, 8, 2024);
    let queries = pts.split_off(2000);
    let idx = GraphIndex::build_dense(IndexConfig::default(), &pts).unwrap();
    let params = SearchParams {
        k: 10,
        k_parallel: 8,
        hops: 3,
        ef: 20,
        deterministic: true,
        threads: 1,
    };
    let all: Vec<ItemId> = (0..pts.len() as ItemId).collect();
    let mut recalls = Vec::new();
    for q in &queries {
        let metric = EuclideanEval {
            query: q,
            embeddings: &pts,
        };
        let exact = brute_force(&metric, &all, 10).unwrap().ids();
        let got = c_hipanns(&idx, &metric, &params).unwrap().ids();
        recalls.push(eval::recall_at(10, &got, &exact));
    }
    let r = mean(&recalls);
    check(r >= 0.95, format!("mean Recall@10 = {r:.4} over 100 queries (need >= 0.95)"))
}

/// Parallel searchers raise coverage at equal per-searcher budget.
fn parallel_benefit() -> Outcome {
    let mut cov8 = Vec::new();
    let mut cov1 = Vec::new();
    for seed in 0..5 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let ds = eval::generate(&cfg).unwrap();
        let model = fit(&ds, &cfg.train_config()).map_err(|e| e.to_string())?.export_model();
        let emb = eval::embed(&model, &ds).unwrap();
        let idx = eval::build_index(&cfg.index_config(), &emb).unwrap();
        let full = eval::evaluate(&cfg, &ds, &model, Some(&idx), None).map_err(|e| e.to_string())?;
        let single_cfg = RunConfig {
            no_parallel: true,
            ..cfg
        };
        let single = eval::evaluate(&single_cfg, &ds, &model, Some(&idx), None).map_err(|e| e.to_string())?;
        cov8.push(full.aggregate.coverage);
        cov1.push(single.aggregate.coverage);
    }
    let (a, b) = (mean(&cov8), mean(&cov1));
    check(
        a > b,
        format!("mean Cov k_parallel=8: {a:.4}, k_parallel=1: {b:.4} over 5 seeds (per seed {cov8:.3?} vs {cov1:.3?})"),
    )
}

/// Rank-alignment term raises held-out correlation of relevance with -distance.
fn scl_transfer() -> Outcome {
    let mut gains = Vec::new();
    let mut hops = (Vec::new(), Vec::new());
    for seed in 0..5 {
        let base = RunConfig {
            seed,
            n_queries: 50,
            ..RunConfig::default()
        };
        let ds = eval::generate(&base).unwrap();
        let mut rho = [0.0; 2];
        for (slot, no_scl) in [(0, false), (1, true)] {
            let cfg = RunConfig { no_scl, ..base.clone() };
            let model = fit(&ds, &cfg.train_config()).map_err(|e| e.to_string())?.export_model();
            rho[slot] = eval::heldout_alignment(&model, &ds, seed, 2000).ok_or("degenerate held-out sample")?;
            let report = eval::evaluate(&cfg, &ds, &model, None, None).map_err(|e| e.to_string())?;
            let h = report.aggregate.mean_hops_to_best;
            if no_scl {
                hops.1.push(h);
            } else {
                hops.0.push(h);
            }
        }
        gains.push(rho[0] - rho[1]);
    }
    let g = mean(&gains);
    check(
        g >= 0.1,
        format!(
            "mean rho gain {g:.4} (need >= 0.1); mean hops-to-best with/without: {:.2}/{:.2}",
            mean(&hops.0),
            mean(&hops.1)
        ),
    )
}

/// Analytic gradients against central differences.
fn gradient_correctness() -> Outcome {
    let runs = [
        common::gradient_check(1, Activation::Relu, 1.0, true),
        common::gradient_check(2, Activation::Identity, 1.0, true),
    ];
    let worst = runs.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    let at = &runs.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap().worst;
    check(
        worst <= 1e-4,
        format!("{} params per model, max relative error {worst:.2e} at {at}", runs[0].params),
    )
}

/// Randomized concurrent stress through the batch queue.
fn batching_equivalence() -> Outcome {
    let shape = ModelShape::new(8, 8, vec![32, 32], 3);
    let model = Arc::new(MetricModel::random(&shape, &mut ChaCha8Rng::seed_from_u64(6)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let items: Arc<Vec<Vec<f64>>> = Arc::new(
        (0..2000)
            .map(|_| {
                let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                model.project_item(&raw).unwrap()
            })
            .collect(),
    );
    let queue = BatchQueue::new(BatchConfig {
        batch_size: 256,
        flush_timeout: Duration::from_millis(1),
        ..BatchConfig::default()
    })
    .unwrap();
    let engine = Arc::new(ModelEngine::new(model.clone(), items.clone(), 256).unwrap());
    let dispatcher = queue.spawn_dispatcher(engine);
    let producers = 8;
    let per_producer = 125;
    let (submitted, mismatches): (usize, usize) = std::thread::scope(|s| {
        let handles: Vec<_> = (0..producers)
            .map(|t| {
                let (queue, model, items) = (&queue, &model, &items);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(600 + t as u64);
                    let mut pending = Vec::new();
                    for _ in 0..per_producer {
                        let raw: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let user: Arc<[f64]> = Arc::from(model.project_user(&raw).unwrap());
                        let size = rng.random_range(1..=64);
                        let ids: Vec<ItemId> = (0..size).map(|_| rng.random_range(0..2000)).collect();
                        let pairs = ids.iter().map(|&item| EvalPair { user: user.clone(), item }).collect();
                        pending.push((queue.submit(pairs).unwrap(), user, ids));
                    }
                    let mut total = 0;
                    let mut bad = 0;
                    for (handle, user, ids) in pending {
                        let got = handle.wait().unwrap();
                        total += ids.len();
                        for (id, g) in ids.iter().zip(got) {
                            let direct = model.relevance(&user, &items[*id as usize]).unwrap();
                            bad += (g.to_bits() != direct.to_bits()) as usize;
                        }
                    }
                    (total, bad)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
    });
    queue.shutdown();
    dispatcher.join().unwrap().map_err(|e| e.to_string())?;
    let r = queue.stats();
    let requests = producers * per_producer;
    let conserved = r.total_pairs == submitted && r.batch_sizes.iter().sum::<usize>() == submitted;
    let bound = submitted.div_ceil(256) + r.timeout_flushes;
    let reduction = requests as f64 / r.invocations as f64;
    check(
        mismatches == 0 && conserved && r.invocations <= bound && reduction >= 10.0,
        format!(
            "{requests} requests, {submitted} pairs; bit mismatches {mismatches}; conserved {conserved}; \
             invocations {} <= bound {bound}: {}; reduction vs per-request dispatch {reduction:.2}x (need >= 10x; \
             floor at N_U=256 is ceil(pairs/256) = {})",
            r.invocations,
            r.invocations <= bound,
            submitted.div_ceil(256)
        ),
    )
}

/// Half precision keeps Recall@100 and halves the file.
fn quantization() -> Outcome {
    let cfg = RunConfig::default();
    let ds = eval::generate(&cfg).unwrap();
    let full = fit(&ds, &cfg.train_config()).map_err(|e| e.to_string())?.export_model();
    let half = full.quantize().map_err(|e| e.to_string())?;
    let (b32, b16) = (full.to_bytes().len(), half.to_bytes().len());
    let halved = (b16 as f64 - b32 as f64 / 2.0).abs() <= 64.0;

    let users: Vec<usize> = (0..cfg.n_users).collect();
    let emb32 = eval::embed(&full, &ds).unwrap();
    let emb16 = eval::embed(&half, &ds).unwrap();
    let gt = eval::ground_truth(&full, &emb32, &users, 100).unwrap();
    let mut recall = [0.0; 2];
    for (slot, (model, emb)) in [(&full, &emb32), (&half, &emb16)].into_iter().enumerate() {
        let idx = eval::build_index(&cfg.index_config(), emb).unwrap();
        let run = eval::run_queries(&cfg, Arc::new(model.clone()), emb, &idx, &users).map_err(|e| e.to_string())?;
        let scored = eval::score_queries(&users, &run.results, &gt);
        recall[slot] = mean(&scored.iter().map(|q| q.recall_at_100).collect::<Vec<_>>());
    }
    let drop = recall[0] - recall[1];
    check(
        halved && drop <= 0.02,
        format!(
            "Recall@100 fp32 {:.4}, fp16 {:.4}, drop {drop:.4} (need <= 0.02); file {b32} -> {b16} bytes",
            recall[0], recall[1]
        ),
    )
}

/// Layer populations against the binomial expectation.
fn level_statistics() -> Outcome {
    let n = 100_000;
    let p = 1.0 / 17.0;
    let max_layers = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    // Level draws do not depend on M or ef_construction; small values keep the build fast.
    let cfg = IndexConfig {
        m: 4,
        ef_construction: 8,
        level_prob: p,
        max_layers,
        seed: 17,
        diversity_heuristic: false,
    };
    let idx = GraphIndex::build_dense(cfg, &pts).map_err(|e| e.to_string())?;
    let mut sizes = idx.layer_sizes();
    sizes.resize(max_layers, 0);
    let mut ok = true;
    let mut rows = Vec::new();
    for (l, &observed) in sizes.iter().enumerate().skip(1) {
        let q = p.powi(l as i32);
        let expected = n as f64 * q;
        let sigma = (n as f64 * q * (1.0 - q)).sqrt();
        let within = (observed as f64 - expected).abs() <= 3.0 * sigma;
        ok &= within;
        rows.push(format!("L{l} {observed} vs {expected:.1}±{:.1}", 3.0 * sigma));
    }
    check(ok, rows.join("; "))
}

/// Same seed, same quality numbers.
fn determinism() -> Outcome {
    let cfg = RunConfig {
        n_queries: 50,
        ..RunConfig::default()
    };
    let quality = |threads: usize| -> Result<Vec<QualityRow>, String> {
        let r = eval::run_experiment(&RunConfig {
            query_threads: threads,
            ..cfg.clone()
        })
        .map_err(|e| e.to_string())?;
        Ok(r.queries
            .iter()
            .map(|q| {
                (
                    q.coverage,
                    q.recall_at_10,
                    q.recall_at_100,
                    q.nodes_visited,
                    q.metric_evaluations,
                    q.hops_to_best,
                )
            })
            .collect())
    };
    let a = quality(4)?;
    let b = quality(4)?;
    let c = quality(1)?;
    check(
        a == b && a == c,
        format!("3 runs of {} queries identical: {}", a.len(), a == b && a == c),
    )
}

fn main() -> ExitCode {
    // (name, check, runtime limit in seconds)
    let criteria: [(&str, fn() -> Outcome, u64); 9] = [
        ("oracle exactness", oracle_exactness, 30),
        ("desk-scale quality floor", quality_floor, 60),
        ("parallel-search benefit", parallel_benefit, 300),
        ("rank-alignment transfer", scl_transfer, 600),
        ("gradient correctness", gradient_correctness, 10),
        ("batching equivalence", batching_equivalence, 60),
        ("quantization", quantization, 120),
        ("level statistics", level_statistics, 120),
        ("determinism", determinism, 300),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| *f == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(d) if secs < *limit as f64 => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.1}s, limit {limit}s")),
            Err(d) => (false, d),
        };
        failed += !pass as usize;
        println!(
            "criterion {n} [{name}]: {} ({secs:.1}s) {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
