//! Retrieval over a [`GraphIndex`] with a user-conditioned relevance metric.
//!
//! Every algorithm scores items through a [`MetricEval`], so the same code
//! runs against direct model evaluation or the batching executor. Higher
//! scores are better; ties rank the lower item id first.

mod pool;

use std::collections::{BinaryHeap, HashMap, HashSet};
use std::time::Instant;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::index::{GraphIndex, NodeId};
use crate::metric::{squared_euclidean, MetricModel};

pub use pool::{CandidatePool, Scored};

/// Scores a list of items for one fixed query; output aligns with input.
pub trait MetricEval: Sync {
    fn evaluate(&self, items: &[ItemId]) -> Result<Vec<f64>>;
}

impl<F> MetricEval for F
where
    F: Fn(&[ItemId]) -> Result<Vec<f64>> + Sync,
{
    fn evaluate(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        self(items)
    }
}

/// Negative Euclidean distance to a query point. `embeddings` is indexed by item id.
pub struct EuclideanEval<'a> {
    pub query: &'a [f64],
    pub embeddings: &'a [Vec<f64>],
}

impl MetricEval for EuclideanEval<'_> {
    fn evaluate(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        items
            .iter()
            .map(|&id| {
                let v = lookup(self.embeddings, id)?;
                if v.len() != self.query.len() {
                    return Err(Error::invalid("query and item dims differ"));
                }
                Ok(-squared_euclidean(self.query, v).sqrt())
            })
            .collect()
    }
}

/// Inference-mode learned relevance for one projected user embedding.
/// `item_embeddings` holds projected item embeddings indexed by item id.
pub struct ModelEval<'a> {
    pub model: &'a MetricModel,
    pub user: &'a [f64],
    pub item_embeddings: &'a [Vec<f64>],
}

impl MetricEval for ModelEval<'_> {
    fn evaluate(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        items
            .iter()
            .map(|&id| self.model.relevance(self.user, lookup(self.item_embeddings, id)?))
            .collect()
    }
}

fn lookup(table: &[Vec<f64>], id: ItemId) -> Result<&[f64]> {
    table
        .get(id as usize)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::invalid(format!("no embedding for item {id}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    pub k_parallel: usize,
    /// Hop budget per seed per layer.
    pub hops: usize,
    /// Frontier width per searcher per hop; raised to `k` where a result pool is read.
    pub ef: usize,
    /// Fixed merge order; results independent of `threads`.
    pub deterministic: bool,
    /// OS threads issuing evaluations concurrently.
    pub threads: usize,
}

impl SearchParams {
    pub fn new(k: usize) -> Self {
        SearchParams {
            k,
            k_parallel: 1,
            hops: 3,
            ef: 2 * k,
            deterministic: true,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k_parallel == 0 || self.hops == 0 || self.ef == 0 || self.threads == 0 {
            return Err(Error::invalid("k, k_parallel, hops, ef and threads must be positive"));
        }
        if self.k_parallel > self.k {
            return Err(Error::invalid(format!(
                "k_parallel {} exceeds k {}",
                self.k_parallel, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub evaluations: usize,
    /// Nodes whose neighbor lists were read.
    pub expansions: usize,
    pub rounds: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub algorithm: String,
    pub k_parallel: usize,
    pub nodes_visited: usize,
    pub metric_evaluations: usize,
    pub eval_calls: usize,
    /// Expansion rounds completed before the top result was first scored.
    pub hops_to_best: usize,
    pub wall_time_secs: f64,
    /// Top layer first.
    pub layers: Vec<LayerStats>,
}

impl SearchStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    /// Best first.
    pub items: Vec<(ItemId, f64)>,
    pub stats: SearchStats,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|x| x.0).collect()
    }
}

fn scored_items(v: &[Scored]) -> Vec<(ItemId, f64)> {
    v.iter().map(|s| (s.item, s.score)).collect()
}

fn checked_scores(items: &[ItemId], scores: Vec<f64>) -> Result<Vec<f64>> {
    if scores.len() != items.len() {
        return Err(Error::Engine(format!(
            "evaluator returned {} scores for {} items",
            scores.len(),
            items.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("non-finite relevance {s}")));
    }
    Ok(scores)
}

/// Exact top-`k` over `items` in one evaluation call.
pub fn brute_force(eval: &dyn MetricEval, items: &[ItemId], k: usize) -> Result<SearchResult> {
    if k == 0 || k > items.len() {
        return Err(Error::invalid(format!(
            "k = {k} must lie in 1..={}",
            items.len()
        )));
    }
    let start = Instant::now();
    let scores = checked_scores(items, eval.evaluate(items)?)?;
    let pool = CandidatePool::new(k);
    for (&id, &s) in items.iter().zip(&scores) {
        pool.push(id, s);
    }
    Ok(SearchResult {
        items: scored_items(&pool.top()),
        stats: SearchStats {
            algorithm: "brute_force".into(),
            k_parallel: 1,
            nodes_visited: items.len(),
            metric_evaluations: items.len(),
            eval_calls: 1,
            hops_to_best: 0,
            wall_time_secs: start.elapsed().as_secs_f64(),
            layers: vec![LayerStats {
                layer: 0,
                evaluations: items.len(),
                expansions: 0,
                rounds: 0,
            }],
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Cand {
    s: Scored,
    node: NodeId,
}

/// Score bookkeeping shared by one query: guarantees one evaluation per item.
#[derive(Default)]
struct ScoreBook {
    scores: HashMap<NodeId, f64>,
    discovered: HashMap<NodeId, usize>,
    evaluations: usize,
    calls: usize,
}

impl ScoreBook {
    fn record(&mut self, nodes: &[NodeId], scores: &[f64], round: usize) {
        self.calls += 1;
        self.evaluations += nodes.len();
        for (&n, &s) in nodes.iter().zip(scores) {
            let fresh = self.scores.insert(n, s).is_none();
            debug_assert!(fresh, "node {n} scored twice");
            self.discovered.insert(n, round);
        }
    }

    fn cand(&self, index: &GraphIndex, node: NodeId) -> Cand {
        Cand {
            s: Scored {
                item: index.item_of(node),
                score: self.scores[&node],
            },
            node,
        }
    }
}

fn evaluate_nodes(index: &GraphIndex, eval: &dyn MetricEval, nodes: &[NodeId]) -> Result<Vec<f64>> {
    let items: Vec<ItemId> = nodes.iter().map(|&n| index.item_of(n)).collect();
    checked_scores(&items, eval.evaluate(&items)?)
}

fn finish(
    index: &GraphIndex,
    book: &ScoreBook,
    top: Vec<Scored>,
    algorithm: &str,
    k_parallel: usize,
    layers: Vec<LayerStats>,
    start: Instant,
) -> SearchResult {
    let hops_to_best = top
        .first()
        .and_then(|b| index.node(b.item))
        .and_then(|n| book.discovered.get(&n).copied())
        .unwrap_or(0);
    SearchResult {
        items: scored_items(&top),
        stats: SearchStats {
            algorithm: algorithm.into(),
            k_parallel,
            nodes_visited: book.scores.len(),
            metric_evaluations: book.evaluations,
            eval_calls: book.calls,
            hops_to_best,
            wall_time_secs: start.elapsed().as_secs_f64(),
            layers,
        },
    }
}

fn entry_or_err(index: &GraphIndex) -> Result<NodeId> {
    index
        .entry_node()
        .ok_or_else(|| Error::invalid("cannot search an empty index"))
}

/// Layered best-first descent from the entry point with an ef-wide result
/// set per layer; `k_parallel` is ignored.
pub fn greedy_search(index: &GraphIndex, eval: &dyn MetricEval, params: &SearchParams) -> Result<SearchResult> {
    params.validate()?;
    let entry = entry_or_err(index)?;
    let start = Instant::now();
    let ef = params.ef.max(params.k);
    let mut book = ScoreBook::default();
    let mut round = 0;
    let s = evaluate_nodes(index, eval, &[entry])?;
    book.record(&[entry], &s, round);

    let mut seeds = vec![book.cand(index, entry)];
    let mut layers = Vec::with_capacity(index.layer_count());
    for layer in (0..index.layer_count()).rev() {
        let mut ls = LayerStats {
            layer,
            ..LayerStats::default()
        };
        let before = book.evaluations;
        let mut seen: HashSet<NodeId> = seeds.iter().map(|c| c.node).collect();
        let mut frontier: BinaryHeap<Cand> = seeds.iter().copied().collect();
        let mut best: BinaryHeap<std::cmp::Reverse<Cand>> =
            seeds.iter().copied().map(std::cmp::Reverse).collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(c) = frontier.pop() {
            let worst = best.peek().expect("nonempty").0;
            if best.len() >= ef && c < worst {
                break;
            }
            round += 1;
            ls.rounds += 1;
            ls.expansions += 1;
            let fresh: Vec<NodeId> = index
                .links(c.node, layer)
                .iter()
                .copied()
                .filter(|&n| seen.insert(n))
                .collect();
            let unscored: Vec<NodeId> = fresh
                .iter()
                .copied()
                .filter(|n| !book.scores.contains_key(n))
                .collect();
            if !unscored.is_empty() {
                let s = evaluate_nodes(index, eval, &unscored)?;
                book.record(&unscored, &s, round);
            }
            for n in fresh {
                let cand = book.cand(index, n);
                let worst = best.peek().expect("nonempty").0;
                if best.len() < ef || cand > worst {
                    frontier.push(cand);
                    best.push(std::cmp::Reverse(cand));
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        ls.evaluations = book.evaluations - before;
        layers.push(ls);
        let mut next: Vec<Cand> = best.into_iter().map(|r| r.0).collect();
        next.sort_by(|a, b| b.cmp(a));
        seeds = next;
    }
    let top: Vec<Scored> = seeds.iter().take(params.k).map(|c| c.s).collect();
    Ok(finish(index, &book, top, "greedy", 1, layers, start))
}

/// Entry point followed by its nearest top-layer neighbors (by embedding
/// distance), padded with the entry point up to `count`.
fn top_layer_seeds(index: &GraphIndex, entry: NodeId, count: usize) -> Vec<NodeId> {
    let top = index.layer_count() - 1;
    let origin = index.vector(entry);
    let mut ns: Vec<(f64, ItemId, NodeId)> = index
        .links(entry, top)
        .iter()
        .map(|&n| (squared_euclidean(origin, index.vector(n)), index.item_of(n), n))
        .collect();
    ns.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut seeds = vec![entry];
    seeds.extend(ns.into_iter().take(count - 1).map(|x| x.2));
    seeds.resize(count, entry);
    seeds
}

/// Unexpanded neighbors of a frontier on `layer`, in discovery order.
fn proposals(index: &GraphIndex, frontier: &[NodeId], layer: usize, expanded: &HashSet<NodeId>) -> Vec<NodeId> {
    let mut local = HashSet::new();
    let mut out = Vec::new();
    for &f in frontier {
        for &n in index.links(f, layer) {
            if !expanded.contains(&n) && local.insert(n) {
                out.push(n);
            }
        }
    }
    out
}

/// Breadth-parallel layered search: `k_parallel` seeds per layer, each
/// expanded for `hops` rounds with an ef-pruned frontier, all feeding one
/// shared top-`k` pool. Each item is scored at most once per query.
pub fn c_hipanns(index: &GraphIndex, eval: &dyn MetricEval, params: &SearchParams) -> Result<SearchResult> {
    params.validate()?;
    let entry = entry_or_err(index)?;
    let start = Instant::now();
    let pool = CandidatePool::new(params.k);
    let mut book = ScoreBook::default();

    let initial = top_layer_seeds(index, entry, params.k_parallel);
    let mut unique = Vec::new();
    for &s in &initial {
        if !unique.contains(&s) {
            unique.push(s);
        }
    }
    let s = evaluate_nodes(index, eval, &unique)?;
    book.record(&unique, &s, 0);
    for &n in &unique {
        let c = book.cand(index, n);
        pool.push(c.s.item, c.s.score);
    }

    let mut round = 0;
    let mut layers = Vec::with_capacity(index.layer_count());
    for layer in (0..index.layer_count()).rev() {
        let seeds: Vec<NodeId> = if layer + 1 == index.layer_count() {
            initial.clone()
        } else {
            let mut s: Vec<NodeId> = pool
                .top()
                .iter()
                .take(params.k_parallel)
                .map(|x| index.node(x.item).expect("pooled items are indexed"))
                .collect();
            let pad = s[0];
            s.resize(params.k_parallel, pad);
            s
        };
        let ls = if params.deterministic {
            lockstep_layer(index, eval, params, layer, &seeds, &pool, &mut book, &mut round)?
        } else {
            free_layer(index, eval, params, layer, &seeds, &pool, &mut book, &mut round)?
        };
        layers.push(ls);
    }
    let top = pool.top();
    Ok(finish(index, &book, top, "c_hipanns", params.k_parallel, layers, start))
}

/// Seed-indexed frontiers, with duplicate seeds collapsed onto the first.
fn initial_frontiers(seeds: &[NodeId], expanded: &mut HashSet<NodeId>) -> Vec<Vec<NodeId>> {
    seeds
        .iter()
        .map(|&s| if expanded.insert(s) { vec![s] } else { Vec::new() })
        .collect()
}

/// Best `ef` scored candidates not yet expanded, marked expanded.
fn next_frontier(
    index: &GraphIndex,
    book: &ScoreBook,
    candidates: &[NodeId],
    ef: usize,
    expanded: &mut HashSet<NodeId>,
) -> Vec<NodeId> {
    let mut cs: Vec<Cand> = candidates
        .iter()
        .filter(|n| !expanded.contains(n) && book.scores.contains_key(n))
        .map(|&n| book.cand(index, n))
        .collect();
    cs.sort_by(|a, b| b.cmp(a));
    cs.truncate(ef);
    cs.iter()
        .map(|c| {
            expanded.insert(c.node);
            c.node
        })
        .collect()
}

/// Evaluates each searcher's batch, spreading calls over up to `threads` threads.
fn evaluate_groups(
    index: &GraphIndex,
    eval: &dyn MetricEval,
    groups: &[Vec<NodeId>],
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let active = groups.iter().filter(|g| !g.is_empty()).count();
    if threads <= 1 || active <= 1 {
        return groups
            .iter()
            .map(|g| if g.is_empty() { Ok(Vec::new()) } else { evaluate_nodes(index, eval, g) })
            .collect();
    }
    let workers = threads.min(active);
    let mut out: Vec<Option<Result<Vec<f64>>>> = (0..groups.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..groups.len())
                        .step_by(workers)
                        .map(|i| {
                            let g = &groups[i];
                            let r = if g.is_empty() { Ok(Vec::new()) } else { evaluate_nodes(index, eval, g) };
                            (i, r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("search worker panicked") {
                out[i] = Some(r);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every group evaluated")).collect()
}

/// Lock-step hops: claims and merges happen in seed order, so the outcome
/// does not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
fn lockstep_layer(
    index: &GraphIndex,
    eval: &dyn MetricEval,
    params: &SearchParams,
    layer: usize,
    seeds: &[NodeId],
    pool: &CandidatePool,
    book: &mut ScoreBook,
    round: &mut usize,
) -> Result<LayerStats> {
    let mut ls = LayerStats {
        layer,
        ..LayerStats::default()
    };
    let before = book.evaluations;
    let mut expanded = HashSet::new();
    let mut frontiers = initial_frontiers(seeds, &mut expanded);
    for _ in 0..params.hops {
        if frontiers.iter().all(Vec::is_empty) {
            break;
        }
        *round += 1;
        ls.rounds += 1;
        ls.expansions += frontiers.iter().map(Vec::len).sum::<usize>();
        let props: Vec<Vec<NodeId>> = frontiers
            .iter()
            .map(|f| proposals(index, f, layer, &expanded))
            .collect();
        let mut claimed = HashSet::new();
        let groups: Vec<Vec<NodeId>> = props
            .iter()
            .map(|p| {
                p.iter()
                    .copied()
                    .filter(|n| !book.scores.contains_key(n) && claimed.insert(*n))
                    .collect()
            })
            .collect();
        let results = evaluate_groups(index, eval, &groups, params.threads)?;
        for (g, s) in groups.iter().zip(&results) {
            if g.is_empty() {
                continue;
            }
            book.record(g, s, *round);
            for (&n, &score) in g.iter().zip(s) {
                pool.push(index.item_of(n), score);
            }
        }
        frontiers = props
            .iter()
            .map(|p| next_frontier(index, book, p, params.ef, &mut expanded))
            .collect();
    }
    ls.evaluations = book.evaluations - before;
    Ok(ls)
}

struct FreeState {
    book: ScoreBook,
    claimed: HashSet<NodeId>,
    expanded: HashSet<NodeId>,
    max_round: usize,
}

/// Searchers run concurrently and merge as they finish each hop.
#[allow(clippy::too_many_arguments)]
fn free_layer(
    index: &GraphIndex,
    eval: &dyn MetricEval,
    params: &SearchParams,
    layer: usize,
    seeds: &[NodeId],
    pool: &CandidatePool,
    book: &mut ScoreBook,
    round: &mut usize,
) -> Result<LayerStats> {
    let before = book.evaluations;
    let mut expanded = HashSet::new();
    let frontiers = initial_frontiers(seeds, &mut expanded);
    let state = Mutex::new(FreeState {
        book: std::mem::take(book),
        claimed: HashSet::new(),
        expanded,
        max_round: *round,
    });
    let base_round = *round;
    let expansions = std::sync::atomic::AtomicUsize::new(0);

    let run = |mut frontier: Vec<NodeId>| -> Result<()> {
        for hop in 1..=params.hops {
            if frontier.is_empty() {
                break;
            }
            expansions.fetch_add(frontier.len(), std::sync::atomic::Ordering::Relaxed);
            let r = base_round + hop;
            let (props, mine) = {
                let mut st = state.lock();
                let props = proposals(index, &frontier, layer, &st.expanded);
                let FreeState { book, claimed, .. } = &mut *st;
                let mine: Vec<NodeId> = props
                    .iter()
                    .copied()
                    .filter(|n| !book.scores.contains_key(n) && claimed.insert(*n))
                    .collect();
                st.max_round = st.max_round.max(r);
                (props, mine)
            };
            if !mine.is_empty() {
                let s = evaluate_nodes(index, eval, &mine)?;
                for (&n, &score) in mine.iter().zip(&s) {
                    pool.push(index.item_of(n), score);
                }
                state.lock().book.record(&mine, &s, r);
            }
            let mut st = state.lock();
            let FreeState { book, expanded, .. } = &mut *st;
            frontier = next_frontier(index, book, &props, params.ef, expanded);
        }
        Ok(())
    };

    let workers = params.threads.min(frontiers.len()).max(1);
    let results: Vec<Result<()>> = if workers == 1 {
        frontiers.into_iter().map(&run).collect()
    } else {
        let mut buckets: Vec<Vec<Vec<NodeId>>> = vec![Vec::new(); workers];
        for (i, f) in frontiers.into_iter().enumerate() {
            buckets[i % workers].push(f);
        }
        std::thread::scope(|scope| {
            let run = &run;
            let handles: Vec<_> = buckets
                .into_iter()
                .map(|b| scope.spawn(move || b.into_iter().map(run).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("search worker panicked"))
                .collect()
        })
    };
    let st = state.into_inner();
    *book = st.book;
    *round = st.max_round;
    results.into_iter().collect::<Result<()>>()?;
    let rounds = *round - base_round;
    Ok(LayerStats {
        layer,
        evaluations: book.evaluations - before,
        expansions: expansions.into_inner(),
        rounds,
    })
}
