//! Offline quality and speed measurement, and the end-to-end experiment.
//!
//! Ground truth is the brute-force top-`k` under the same learned metric the
//! search uses, so coverage and recall measure search fidelity.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::batch::{BatchConfig, BatchQueue, DispatchReport, ModelEngine, QueueEval};
use crate::data::{generate_synthetic, Dataset, ItemId, SyntheticSpec};
use crate::error::{Error, Result};
use crate::index::{GraphIndex, IndexConfig};
use crate::metric::{Activation, MetricModel};
use crate::search::{brute_force, c_hipanns, MetricEval, ModelEval, SearchParams, SearchResult};
use crate::train::{fit, rank_alignment, sample_uniform_pairs, FeatureTable, Optimizer, TrainConfig};

/// `|retrieved ∩ ground_truth| / |ground_truth|`; `ground_truth` is the
/// brute-force top list (normally 100 long).
pub fn coverage(retrieved: &[ItemId], ground_truth: &[ItemId]) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    let gt: HashSet<ItemId> = ground_truth.iter().copied().collect();
    let hits = retrieved
        .iter()
        .copied()
        .collect::<HashSet<_>>()
        .intersection(&gt)
        .count();
    hits as f64 / gt.len() as f64
}

/// Overlap of the first `k` retrieved with the first `k` ground-truth items,
/// over `k` (clamped to the ground-truth length).
pub fn recall_at(k: usize, retrieved: &[ItemId], ground_truth: &[ItemId]) -> f64 {
    let k = k.min(ground_truth.len());
    if k == 0 {
        return 0.0;
    }
    let gt: HashSet<ItemId> = ground_truth[..k].iter().copied().collect();
    let hits = retrieved[..k.min(retrieved.len())]
        .iter()
        .filter(|x| gt.contains(x))
        .count();
    hits as f64 / k as f64
}

/// Items scored per second.
pub fn measure_speed(metric_evaluations: usize, wall_secs: f64) -> Result<f64> {
    if !(wall_secs > 0.0) {
        return Err(Error::invalid(format!("wall time must be positive, got {wall_secs}")));
    }
    Ok(metric_evaluations as f64 / wall_secs)
}

/// Every knob of a run. Parsed from flat `key = value` text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub d_x: usize,
    pub z_dim: usize,
    pub density: f64,

    pub epochs: usize,
    pub train_batch_size: usize,
    pub learning_rate: f64,
    pub lambda_scl: f64,
    pub n_l: usize,
    pub negative_ratio: usize,
    pub d_h: usize,
    pub hidden: Vec<usize>,
    pub serendipity_sigma: f64,
    pub optimizer: Optimizer,
    pub train_attention: bool,

    pub m: usize,
    pub ef_construction: usize,
    pub level_prob: f64,
    pub max_layers: usize,

    /// Retrieval depth; coverage and Recall@100 use this many items.
    pub k: usize,
    pub k_parallel: usize,
    pub hops: usize,
    pub ef: usize,
    pub deterministic: bool,

    pub batch_size: usize,
    pub flush_timeout_us: u64,
    pub pipelining: bool,

    /// Number of users queried (first users by position); 0 queries all.
    pub n_queries: usize,
    pub query_threads: usize,
    pub quantize: bool,

    pub no_scl: bool,
    pub no_multirel: bool,
    pub no_parallel: bool,
    pub no_batching: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_users: 200,
            n_items: 5000,
            d_x: 16,
            z_dim: 3,
            density: 0.01,
            epochs: 4,
            train_batch_size: 128,
            learning_rate: 3e-3,
            lambda_scl: 1.0,
            n_l: 64,
            negative_ratio: 1,
            d_h: 16,
            hidden: vec![64, 64],
            serendipity_sigma: 1.0,
            optimizer: Optimizer::Adam,
            train_attention: false,
            m: 16,
            ef_construction: 100,
            level_prob: 1.0 / 17.0,
            max_layers: 4,
            k: 100,
            k_parallel: 8,
            hops: 3,
            ef: 16,
            deterministic: true,
            batch_size: 256,
            flush_timeout_us: 1000,
            pipelining: false,
            n_queries: 0,
            query_threads: 4,
            quantize: false,
            no_scl: false,
            no_multirel: false,
            no_parallel: false,
            no_batching: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Sets one field by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_value(key, v)?,
            "n_users" => self.n_users = parse_value(key, v)?,
            "n_items" => self.n_items = parse_value(key, v)?,
            "d_x" => self.d_x = parse_value(key, v)?,
            "z_dim" => self.z_dim = parse_value(key, v)?,
            "density" => self.density = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "train_batch_size" => self.train_batch_size = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "lambda_scl" => self.lambda_scl = parse_value(key, v)?,
            "n_l" => self.n_l = parse_value(key, v)?,
            "negative_ratio" => self.negative_ratio = parse_value(key, v)?,
            "d_h" => self.d_h = parse_value(key, v)?,
            "hidden" => {
                self.hidden = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|w| parse_value(key, w.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "serendipity_sigma" => self.serendipity_sigma = parse_value(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(Error::invalid(format!("unknown optimizer {v:?}"))),
                }
            }
            "train_attention" => self.train_attention = parse_bool(key, v)?,
            "m" => self.m = parse_value(key, v)?,
            "ef_construction" => self.ef_construction = parse_value(key, v)?,
            "level_prob" => self.level_prob = parse_value(key, v)?,
            "max_layers" => self.max_layers = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "k_parallel" => self.k_parallel = parse_value(key, v)?,
            "hops" => self.hops = parse_value(key, v)?,
            "ef" => self.ef = parse_value(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "flush_timeout_us" => self.flush_timeout_us = parse_value(key, v)?,
            "pipelining" => self.pipelining = parse_bool(key, v)?,
            "n_queries" => self.n_queries = parse_value(key, v)?,
            "query_threads" => self.query_threads = parse_value(key, v)?,
            "quantize" => self.quantize = parse_bool(key, v)?,
            "no_scl" => self.no_scl = parse_bool(key, v)?,
            "no_multirel" => self.no_multirel = parse_bool(key, v)?,
            "no_parallel" => self.no_parallel = parse_bool(key, v)?,
            "no_batching" => self.no_batching = parse_bool(key, v)?,
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Flat `key = value` rendering that [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in value.as_object().expect("struct is an object") {
            let rendered = match v {
                serde_json::Value::Array(xs) => xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
                serde_json::Value::String(s) => s.to_lowercase(),
                other => other.to_string(),
            };
            let _ = writeln!(out, "{k} = {rendered}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_threads == 0 {
            return Err(Error::invalid("query_threads must be positive"));
        }
        if self.k > self.n_items {
            return Err(Error::invalid(format!("k = {} exceeds n_items = {}", self.k, self.n_items)));
        }
        self.search_params().validate()?;
        self.index_config().validate()?;
        self.train_config().validate()?;
        self.batch_config().validate()
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            seed: self.seed,
            n_users: self.n_users,
            n_items: self.n_items,
            d_x: self.d_x,
            z_dim: self.z_dim,
            density: self.density,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.train_batch_size,
            learning_rate: self.learning_rate,
            n_l: self.n_l,
            lambda_scl: if self.no_scl { 0.0 } else { self.lambda_scl },
            negative_ratio: self.negative_ratio,
            rng_seed: self.seed,
            optimizer: self.optimizer,
            train_attention: self.train_attention,
            d_h: self.d_h,
            hidden: self.hidden.clone(),
            activation: Activation::Relu,
            serendipity_sigma: self.serendipity_sigma,
            ..TrainConfig::default()
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            m: self.m,
            ef_construction: self.ef_construction,
            level_prob: self.level_prob,
            max_layers: self.max_layers,
            seed: self.seed,
            diversity_heuristic: false,
        }
    }

    pub fn search_params(&self) -> SearchParams {
        let k_parallel = if self.no_parallel { 1 } else { self.k_parallel };
        SearchParams {
            k: self.k,
            k_parallel,
            hops: self.hops,
            ef: self.ef,
            deterministic: self.deterministic,
            // Concurrent searchers only pay off when their requests can be merged.
            threads: if self.no_batching { 1 } else { k_parallel },
        }
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.batch_size,
            flush_timeout: Duration::from_micros(self.flush_timeout_us),
            pipelining: self.pipelining,
            ..BatchConfig::default()
        }
    }

    /// Short stable hex digest of the rendered config.
    pub fn run_id(&self) -> String {
        // FNV-1a, 64-bit.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")[..12].to_string()
    }
}

/// Synthetic dataset for `cfg`, reduced to one behavior under `no_multirel`.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let ds = generate_synthetic(&cfg.synthetic_spec())?;
    if cfg.no_multirel {
        ds.single_behavior(0)
    } else {
        Ok(ds)
    }
}

/// Projected user and item embeddings, both indexed by position.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub users: Vec<Vec<f64>>,
    pub items: Arc<Vec<Vec<f64>>>,
}

pub fn embed(model: &MetricModel, ds: &Dataset) -> Result<Embeddings> {
    let users = ds
        .users
        .iter()
        .map(|u| model.project_user(&u.raw_features))
        .collect::<Result<_>>()?;
    let items = ds
        .items
        .iter()
        .map(|v| model.project_item(&v.raw_features))
        .collect::<Result<_>>()?;
    Ok(Embeddings {
        users,
        items: Arc::new(items),
    })
}

pub fn build_index(cfg: &IndexConfig, emb: &Embeddings) -> Result<GraphIndex> {
    GraphIndex::build_dense(cfg.clone(), &emb.items)
}

fn query_users(cfg: &RunConfig, n_users: usize) -> Vec<usize> {
    let n = if cfg.n_queries == 0 { n_users } else { cfg.n_queries.min(n_users) };
    (0..n).collect()
}

/// Brute-force top-`depth` item ids per query user.
pub fn ground_truth(
    model: &MetricModel,
    emb: &Embeddings,
    users: &[usize],
    depth: usize,
) -> Result<Vec<Vec<ItemId>>> {
    let all: Vec<ItemId> = (0..emb.items.len() as ItemId).collect();
    users
        .iter()
        .map(|&u| {
            let eval = ModelEval {
                model,
                user: &emb.users[u],
                item_embeddings: &emb.items,
            };
            Ok(brute_force(&eval, &all, depth)?.ids())
        })
        .collect()
}

pub struct QueryRun {
    pub results: Vec<SearchResult>,
    pub wall_secs: f64,
    pub dispatch: Option<DispatchReport>,
}

/// Runs every query on `cfg.query_threads` workers, through the batch queue
/// unless `no_batching` is set.
pub fn run_queries(
    cfg: &RunConfig,
    model: Arc<MetricModel>,
    emb: &Embeddings,
    index: &GraphIndex,
    users: &[usize],
) -> Result<QueryRun> {
    let params = cfg.search_params();
    let slots: Mutex<Vec<Option<Result<SearchResult>>>> = Mutex::new((0..users.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let queue = if cfg.no_batching {
        None
    } else {
        Some(BatchQueue::new(cfg.batch_config())?)
    };
    let dispatcher = match &queue {
        Some(q) => {
            let engine = ModelEngine::new(model.clone(), emb.items.clone(), cfg.batch_size)?;
            Some(q.spawn_dispatcher(Arc::new(engine)))
        }
        None => None,
    };
    let start = Instant::now();
    std::thread::scope(|s| {
        for _ in 0..cfg.query_threads.min(users.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= users.len() {
                    break;
                }
                let user = &emb.users[users[i]];
                let r = match &queue {
                    Some(q) => {
                        let eval = QueueEval {
                            queue: q,
                            user: Arc::from(user.as_slice()),
                        };
                        c_hipanns(index, &eval as &dyn MetricEval, &params)
                    }
                    None => {
                        let eval = ModelEval {
                            model: &model,
                            user,
                            item_embeddings: &emb.items,
                        };
                        c_hipanns(index, &eval, &params)
                    }
                };
                slots.lock()[i] = Some(r);
            });
        }
    });
    let wall_secs = start.elapsed().as_secs_f64();
    let dispatch = match (queue, dispatcher) {
        (Some(q), Some(h)) => {
            q.shutdown();
            h.join().map_err(|_| Error::Engine("dispatcher panicked".into()))??;
            Some(q.stats())
        }
        _ => None,
    };
    let results = slots
        .into_inner()
        .into_iter()
        .map(|r| r.expect("every query ran"))
        .collect::<Result<Vec<_>>>()?;
    Ok(QueryRun {
        results,
        wall_secs,
        dispatch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub user: usize,
    pub coverage: f64,
    pub recall_at_10: f64,
    pub recall_at_100: f64,
    pub nodes_visited: usize,
    pub metric_evaluations: usize,
    pub hops_to_best: usize,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub queries: usize,
    pub coverage: f64,
    pub recall_at_10: f64,
    pub recall_at_100: f64,
    pub items_per_sec: f64,
    pub mean_nodes_visited: f64,
    pub mean_metric_evaluations: f64,
    pub mean_hops_to_best: f64,
    pub k_parallel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    pub first_total_loss: f64,
    pub last_total_loss: f64,
    pub skipped_scl_steps: usize,
    /// Pearson correlation of relevance with negated embedding distance on
    /// uniformly drawn pairs; absent when degenerate.
    pub heldout_rank_alignment: Option<f64>,
    pub precision: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub config: RunConfig,
    pub aggregate: Aggregate,
    pub training: Option<TrainingSummary>,
    pub dispatch: Option<DispatchReport>,
    pub queries: Vec<QueryReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn score_queries(users: &[usize], results: &[SearchResult], ground_truth: &[Vec<ItemId>]) -> Vec<QueryReport> {
    users
        .iter()
        .zip(results)
        .zip(ground_truth)
        .map(|((&user, r), gt)| {
            let ids = r.ids();
            QueryReport {
                user,
                coverage: coverage(&ids, gt),
                recall_at_10: recall_at(10, &ids, gt),
                recall_at_100: recall_at(100, &ids, gt),
                nodes_visited: r.stats.nodes_visited,
                metric_evaluations: r.stats.metric_evaluations,
                hops_to_best: r.stats.hops_to_best,
                wall_time_secs: r.stats.wall_time_secs,
            }
        })
        .collect()
}

/// Held-out rank alignment on uniformly drawn pairs.
pub fn heldout_alignment(model: &MetricModel, ds: &Dataset, seed: u64, n_pairs: usize) -> Option<f64> {
    let table = FeatureTable::from_dataset(ds);
    let pairs = sample_uniform_pairs(seed ^ 0x68e1_d0u64, ds.users.len(), ds.items.len(), n_pairs);
    rank_alignment(model, &table, &pairs).ok()
}

/// Searches every query user and scores against brute force with `model`.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &MetricModel,
    index: Option<&GraphIndex>,
    training: Option<TrainingSummary>,
) -> Result<EvalReport> {
    let emb = embed(model, ds).map_err(|e| e.at_stage("embed"))?;
    let built;
    let index = match index {
        Some(i) => i,
        None => {
            built = build_index(&cfg.index_config(), &emb).map_err(|e| e.at_stage("build"))?;
            &built
        }
    };
    if index.len() != ds.items.len() {
        return Err(Error::invalid(format!(
            "index holds {} items, dataset has {}",
            index.len(),
            ds.items.len()
        ))
        .at_stage("search"));
    }
    let users = query_users(cfg, ds.users.len());
    let gt = ground_truth(model, &emb, &users, cfg.k).map_err(|e| e.at_stage("ground_truth"))?;
    let run = run_queries(cfg, Arc::new(model.clone()), &emb, index, &users).map_err(|e| e.at_stage("search"))?;
    let queries = score_queries(&users, &run.results, &gt);
    let evaluations: usize = queries.iter().map(|q| q.metric_evaluations).sum();
    let aggregate = Aggregate {
        queries: queries.len(),
        coverage: mean(queries.iter().map(|q| q.coverage)),
        recall_at_10: mean(queries.iter().map(|q| q.recall_at_10)),
        recall_at_100: mean(queries.iter().map(|q| q.recall_at_100)),
        items_per_sec: measure_speed(evaluations, run.wall_secs.max(1e-9)).map_err(|e| e.at_stage("eval"))?,
        mean_nodes_visited: mean(queries.iter().map(|q| q.nodes_visited as f64)),
        mean_metric_evaluations: mean(queries.iter().map(|q| q.metric_evaluations as f64)),
        mean_hops_to_best: mean(queries.iter().map(|q| q.hops_to_best as f64)),
        k_parallel: cfg.search_params().k_parallel,
    };
    Ok(EvalReport {
        run_id: cfg.run_id(),
        config: cfg.clone(),
        aggregate,
        training,
        dispatch: run.dispatch,
        queries,
    })
}

/// Generate, train, (optionally) quantize, index, search and score.
pub fn run_experiment(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let ds = generate(cfg).map_err(|e| e.at_stage("gen"))?;
    let state = fit(&ds, &cfg.train_config()).map_err(|e| e.at_stage("train"))?;
    let mut model = state.export_model();
    if cfg.quantize {
        model = model.quantize().map_err(|e| e.at_stage("quantize"))?;
    }
    let training = TrainingSummary {
        steps: state.history.len(),
        first_total_loss: state.history.first().map_or(f64::NAN, |r| r.total),
        last_total_loss: state.history.last().map_or(f64::NAN, |r| r.total),
        skipped_scl_steps: state.skipped_scl_steps,
        heldout_rank_alignment: heldout_alignment(&model, &ds, cfg.seed, 2000),
        precision: format!("{:?}", model.precision).to_lowercase(),
    };
    evaluate(cfg, &ds, &model, None, Some(training))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per query, tab separated, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "user\tcoverage\trecall_at_10\trecall_at_100\tnodes_visited\tmetric_evaluations\thops_to_best\twall_time_secs\n",
        );
        for q in &self.queries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                q.user,
                q.coverage,
                q.recall_at_10,
                q.recall_at_100,
                q.nodes_visited,
                q.metric_evaluations,
                q.hops_to_best,
                q.wall_time_secs
            );
        }
        out
    }

    /// Short human-readable summary.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        let _ = writeln!(out, "run {}  ({} queries, k_parallel {})", self.run_id, a.queries, a.k_parallel);
        let _ = writeln!(out, "  coverage        {:.4}", a.coverage);
        let _ = writeln!(out, "  recall@10       {:.4}", a.recall_at_10);
        let _ = writeln!(out, "  recall@100      {:.4}", a.recall_at_100);
        let _ = writeln!(out, "  items/sec       {:.0}", a.items_per_sec);
        let _ = writeln!(out, "  nodes visited   {:.1}", a.mean_nodes_visited);
        let _ = writeln!(out, "  hops to best    {:.2}", a.mean_hops_to_best);
        if let Some(d) = &self.dispatch {
            let _ = writeln!(
                out,
                "  batches         {} (mean fill {:.3}, {} timeout flushes)",
                d.invocations, d.mean_fill, d.timeout_flushes
            );
        }
        out
    }
}
