//! Aggregation of irregular relevance-evaluation requests into fixed-size
//! engine batches.
//!
//! Producers [`BatchQueue::submit`] requests of (user, item) pairs and wait on
//! the returned [`Completion`]. One dispatcher ([`BatchQueue::run_dispatcher`])
//! drains the FIFO into batches of exactly `batch_size` pairs, splitting a
//! request that straddles a batch boundary and putting its remainder back at
//! the head of the queue. A partial batch is dispatched when the flush
//! timeout elapses or on shutdown.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::metric::MetricModel;
use crate::search::MetricEval;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub user: Arc<[f64]>,
    pub item: ItemId,
}

/// Batched scorer. Scores must not depend on batch composition.
pub trait BatchEngine: Send + Sync {
    fn batch_size(&self) -> usize;
    fn evaluate(&self, pairs: &[EvalPair]) -> Result<Vec<f64>>;
}

/// Learned relevance over projected item embeddings indexed by item id.
pub struct ModelEngine {
    model: Arc<MetricModel>,
    items: Arc<Vec<Vec<f64>>>,
    batch_size: usize,
}

impl ModelEngine {
    pub fn new(model: Arc<MetricModel>, items: Arc<Vec<Vec<f64>>>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if let Some(v) = items.iter().find(|v| v.len() != model.d_h()) {
            return Err(Error::invalid(format!(
                "item embedding dim {} does not match model d_h {}",
                v.len(),
                model.d_h()
            )));
        }
        Ok(ModelEngine {
            model,
            items,
            batch_size,
        })
    }
}

impl BatchEngine for ModelEngine {
    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn evaluate(&self, pairs: &[EvalPair]) -> Result<Vec<f64>> {
        if pairs.len() > self.batch_size {
            return Err(Error::Engine(format!(
                "batch of {} exceeds engine capacity {}",
                pairs.len(),
                self.batch_size
            )));
        }
        pairs
            .iter()
            .map(|p| {
                let v = self
                    .items
                    .get(p.item as usize)
                    .ok_or_else(|| Error::Engine(format!("unknown item {}", p.item)))?;
                self.model.relevance(&p.user, v)
            })
            .collect()
    }
}

/// Wraps an engine with a simulated cost of `per_invocation + per_pair * n`
/// seconds per call, accumulated and optionally slept.
pub struct SimulatedEngine<E> {
    inner: E,
    pub per_invocation_secs: f64,
    pub per_pair_secs: f64,
    pub sleep: bool,
    simulated_ns: AtomicU64,
}

impl<E: BatchEngine> SimulatedEngine<E> {
    pub fn new(inner: E, per_invocation_secs: f64, per_pair_secs: f64, sleep: bool) -> Self {
        SimulatedEngine {
            inner,
            per_invocation_secs,
            per_pair_secs,
            sleep,
            simulated_ns: AtomicU64::new(0),
        }
    }

    pub fn cost(&self, pairs: usize) -> f64 {
        self.per_invocation_secs + self.per_pair_secs * pairs as f64
    }

    pub fn simulated_secs(&self) -> f64 {
        self.simulated_ns.load(Ordering::Relaxed) as f64 * 1e-9
    }
}

impl<E: BatchEngine> BatchEngine for SimulatedEngine<E> {
    fn batch_size(&self) -> usize {
        self.inner.batch_size()
    }

    fn evaluate(&self, pairs: &[EvalPair]) -> Result<Vec<f64>> {
        let cost = self.cost(pairs.len());
        self.simulated_ns
            .fetch_add((cost * 1e9).round() as u64, Ordering::Relaxed);
        if self.sleep {
            std::thread::sleep(Duration::from_secs_f64(cost));
        }
        self.inner.evaluate(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub flush_timeout: Duration,
    /// Submit blocks while this many pairs are queued (an empty queue always admits).
    pub max_pending_pairs: usize,
    /// Overlap assembly of the next batch with execution of the current one.
    pub pipelining: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 256,
            flush_timeout: Duration::from_millis(1),
            max_pending_pairs: 1 << 20,
            pipelining: false,
        }
    }
}

impl BatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_pending_pairs == 0 {
            return Err(Error::invalid("batch_size and max_pending_pairs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DispatchReport {
    pub invocations: usize,
    pub total_pairs: usize,
    /// Mean of batch size / capacity over invocations.
    pub mean_fill: f64,
    pub timeout_flushes: usize,
    pub requests_completed: usize,
    pub requests_failed: usize,
    pub mean_latency_secs: f64,
    pub p99_latency_secs: f64,
    pub max_latency_secs: f64,
    /// Pairs per dispatched batch, in dispatch order.
    pub batch_sizes: Vec<usize>,
}

impl DispatchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Default)]
struct SlotState {
    scores: Vec<f64>,
    filled: usize,
    outcome: Option<Result<()>>,
}

struct Slot {
    id: u64,
    pairs: Vec<EvalPair>,
    submitted: Instant,
    state: Mutex<SlotState>,
    done: Condvar,
}

impl Slot {
    fn finished(&self) -> bool {
        self.state.lock().outcome.is_some()
    }
}

/// Waitable result of one submitted request; resolves exactly once.
pub struct Completion {
    slot: Arc<Slot>,
}

impl Completion {
    pub fn request_id(&self) -> u64 {
        self.slot.id
    }

    pub fn is_done(&self) -> bool {
        self.slot.finished()
    }

    /// Blocks until the scores (in pair order) or the failure arrive.
    pub fn wait(self) -> Result<Vec<f64>> {
        let mut st = self.slot.state.lock();
        while st.outcome.is_none() {
            self.slot.done.wait(&mut st);
        }
        match st.outcome.take().expect("set") {
            Ok(()) => Ok(std::mem::take(&mut st.scores)),
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone)]
struct Fragment {
    slot: Arc<Slot>,
    start: usize,
    end: usize,
}

impl Fragment {
    fn len(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Default)]
struct QueueState {
    fifo: VecDeque<Fragment>,
    pending_pairs: usize,
    shutdown: bool,
    next_id: u64,
}

#[derive(Default)]
struct StatsAcc {
    batch_sizes: Vec<usize>,
    timeout_flushes: usize,
    completed: usize,
    failed: usize,
    latencies: Vec<f64>,
}

struct Shared {
    config: BatchConfig,
    state: Mutex<QueueState>,
    arrived: Condvar,
    space: Condvar,
    stats: Mutex<StatsAcc>,
}

/// Multi-producer, single-dispatcher aggregation queue. Cloning shares the queue.
#[derive(Clone)]
pub struct BatchQueue {
    shared: Arc<Shared>,
}

struct Batch {
    fragments: Vec<Fragment>,
    pairs: Vec<EvalPair>,
}

impl BatchQueue {
    pub fn new(config: BatchConfig) -> Result<Self> {
        config.validate()?;
        Ok(BatchQueue {
            shared: Arc::new(Shared {
                config,
                state: Mutex::new(QueueState::default()),
                arrived: Condvar::new(),
                space: Condvar::new(),
                stats: Mutex::new(StatsAcc::default()),
            }),
        })
    }

    pub fn config(&self) -> &BatchConfig {
        &self.shared.config
    }

    /// Enqueues a request; blocks under backpressure.
    pub fn submit(&self, pairs: Vec<EvalPair>) -> Result<Completion> {
        if pairs.is_empty() {
            return Err(Error::invalid("evaluation request has no pairs"));
        }
        let mut st = self.shared.state.lock();
        loop {
            if st.shutdown {
                return Err(Error::Rejected("queue is shut down".into()));
            }
            if st.pending_pairs == 0 || st.pending_pairs < self.shared.config.max_pending_pairs {
                break;
            }
            self.shared.space.wait(&mut st);
        }
        let id = st.next_id;
        st.next_id += 1;
        let n = pairs.len();
        let slot = Arc::new(Slot {
            id,
            pairs,
            submitted: Instant::now(),
            state: Mutex::new(SlotState {
                scores: vec![0.0; n],
                ..SlotState::default()
            }),
            done: Condvar::new(),
        });
        st.fifo.push_back(Fragment {
            slot: slot.clone(),
            start: 0,
            end: n,
        });
        st.pending_pairs += n;
        drop(st);
        self.shared.arrived.notify_all();
        Ok(Completion { slot })
    }

    /// Stops admission; the dispatcher drains what is queued, then returns.
    pub fn shutdown(&self) {
        self.shared.state.lock().shutdown = true;
        self.shared.arrived.notify_all();
        self.shared.space.notify_all();
    }

    pub fn is_shut_down(&self) -> bool {
        self.shared.state.lock().shutdown
    }

    pub fn pending_pairs(&self) -> usize {
        self.shared.state.lock().pending_pairs
    }

    /// Next batch, or `None` once shut down and drained.
    fn next_batch(&self) -> Option<Batch> {
        let cap = self.shared.config.batch_size;
        let mut st = self.shared.state.lock();
        let mut fragments: Vec<Fragment> = Vec::new();
        let mut fill = 0;
        let mut deadline: Option<Instant> = None;
        let mut timed_out = false;
        loop {
            while fill < cap {
                let Some(front) = st.fifo.front_mut() else { break };
                let room = cap - fill;
                if front.len() <= room {
                    let f = st.fifo.pop_front().expect("front exists");
                    fill += f.len();
                    fragments.push(f);
                } else {
                    let head = Fragment {
                        slot: front.slot.clone(),
                        start: front.start,
                        end: front.start + room,
                    };
                    front.start += room;
                    fill += room;
                    fragments.push(head);
                }
                deadline.get_or_insert_with(|| Instant::now() + self.shared.config.flush_timeout);
            }
            if fill == cap || st.shutdown {
                break;
            }
            match deadline {
                None => self.shared.arrived.wait(&mut st),
                Some(d) => {
                    if self.shared.arrived.wait_until(&mut st, d).timed_out() && st.fifo.is_empty() {
                        timed_out = true;
                        break;
                    }
                }
            }
        }
        if fill == 0 {
            debug_assert!(st.shutdown && st.fifo.is_empty());
            return None;
        }
        st.pending_pairs -= fill;
        drop(st);
        self.shared.space.notify_all();
        if timed_out {
            self.shared.stats.lock().timeout_flushes += 1;
        }
        let mut pairs = Vec::with_capacity(fill);
        for f in &fragments {
            pairs.extend_from_slice(&f.slot.pairs[f.start..f.end]);
        }
        Some(Batch { fragments, pairs })
    }

    fn execute(&self, engine: &dyn BatchEngine, batch: Batch) {
        self.shared.stats.lock().batch_sizes.push(batch.pairs.len());
        let outcome = engine.evaluate(&batch.pairs).and_then(|s| {
            if s.len() == batch.pairs.len() {
                Ok(s)
            } else {
                Err(Error::Engine(format!(
                    "engine returned {} scores for {} pairs",
                    s.len(),
                    batch.pairs.len()
                )))
            }
        });
        let mut offset = 0;
        for f in &batch.fragments {
            let n = f.len();
            match &outcome {
                Ok(scores) => self.deliver(f, Ok(&scores[offset..offset + n])),
                Err(e) => self.deliver(f, Err(Error::Engine(e.to_string()))),
            }
            offset += n;
        }
    }

    fn deliver(&self, f: &Fragment, scores: Result<&[f64]>) {
        let mut st = f.slot.state.lock();
        if st.outcome.is_some() {
            return;
        }
        let finished = match scores {
            Ok(s) => {
                st.scores[f.start..f.end].copy_from_slice(s);
                st.filled += s.len();
                if st.filled == f.slot.pairs.len() {
                    st.outcome = Some(Ok(()));
                    Some(true)
                } else {
                    None
                }
            }
            Err(e) => {
                st.outcome = Some(Err(e));
                Some(false)
            }
        };
        drop(st);
        if let Some(ok) = finished {
            let latency = f.slot.submitted.elapsed().as_secs_f64();
            let mut stats = self.shared.stats.lock();
            if ok {
                stats.completed += 1;
            } else {
                stats.failed += 1;
            }
            stats.latencies.push(latency);
            drop(stats);
            f.slot.done.notify_all();
        }
    }

    /// Serves batches until shutdown, then drains the queue and returns.
    /// Engine failures fail the affected requests; dispatch continues.
    pub fn run_dispatcher(&self, engine: &dyn BatchEngine) -> Result<()> {
        if engine.batch_size() != self.shared.config.batch_size {
            return Err(Error::invalid(format!(
                "engine batch size {} differs from queue capacity {}",
                engine.batch_size(),
                self.shared.config.batch_size
            )));
        }
        if !self.shared.config.pipelining {
            while let Some(b) = self.next_batch() {
                self.execute(engine, b);
            }
            return Ok(());
        }
        let (tx, rx) = mpsc::sync_channel::<Batch>(1);
        std::thread::scope(|s| {
            s.spawn(move || {
                for b in rx {
                    self.execute(engine, b);
                }
            });
            while let Some(b) = self.next_batch() {
                if tx.send(b).is_err() {
                    break;
                }
            }
            drop(tx);
        });
        Ok(())
    }

    /// Runs [`Self::run_dispatcher`] on a new thread.
    pub fn spawn_dispatcher<E: BatchEngine + 'static>(&self, engine: Arc<E>) -> std::thread::JoinHandle<Result<()>> {
        let queue = self.clone();
        std::thread::spawn(move || queue.run_dispatcher(engine.as_ref()))
    }

    pub fn stats(&self) -> DispatchReport {
        let acc = self.shared.stats.lock();
        let cap = self.shared.config.batch_size as f64;
        let invocations = acc.batch_sizes.len();
        let total_pairs: usize = acc.batch_sizes.iter().sum();
        let mean_fill = if invocations == 0 {
            0.0
        } else {
            acc.batch_sizes.iter().map(|&n| n as f64 / cap).sum::<f64>() / invocations as f64
        };
        let mut lat = acc.latencies.clone();
        lat.sort_by(f64::total_cmp);
        let mean_latency_secs = if lat.is_empty() {
            0.0
        } else {
            lat.iter().sum::<f64>() / lat.len() as f64
        };
        let p99_latency_secs = if lat.is_empty() {
            0.0
        } else {
            lat[((lat.len() as f64 * 0.99).ceil() as usize).clamp(1, lat.len()) - 1]
        };
        DispatchReport {
            invocations,
            total_pairs,
            mean_fill,
            timeout_flushes: acc.timeout_flushes,
            requests_completed: acc.completed,
            requests_failed: acc.failed,
            mean_latency_secs,
            p99_latency_secs,
            max_latency_secs: lat.last().copied().unwrap_or(0.0),
            batch_sizes: acc.batch_sizes.clone(),
        }
    }
}

/// [`MetricEval`] for one user that routes every call through a queue.
/// A dispatcher must be running elsewhere.
pub struct QueueEval<'a> {
    pub queue: &'a BatchQueue,
    pub user: Arc<[f64]>,
}

impl MetricEval for QueueEval<'_> {
    fn evaluate(&self, items: &[ItemId]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let pairs = items
            .iter()
            .map(|&item| EvalPair {
                user: self.user.clone(),
                item,
            })
            .collect();
        self.queue.submit(pairs)?.wait()
    }
}
