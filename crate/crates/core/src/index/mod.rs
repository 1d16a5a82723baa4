//! Layered navigable small-world graph over item embeddings.
//!
//! Layer 0 holds every item; each higher layer holds the items whose drawn
//! level reaches it. Edges are undirected (stored on both endpoints) and
//! built with Euclidean distance between item embeddings. Building is a fold
//! of [`GraphIndex::insert`], so stream updates and offline builds produce
//! the same structure for the same insertion order.
//!
//! Writers need `&mut GraphIndex`; readers share `&GraphIndex`. Wrapping the
//! index in an `Arc` and mutating through `Arc::make_mut` gives snapshot
//! semantics: searches holding the old `Arc` keep seeing the old graph.

mod io;
pub mod update;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, ItemId};
use crate::error::{Error, Result};
use crate::metric::squared_euclidean;

pub use update::{flush_pending, ActivityEvent, ActivityLog, PendingItem, UpdatePolicy};

/// Internal node handle (insertion order).
pub(crate) type NodeId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    /// Neighbor cap per node on layers >= 1; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    /// Probability of promoting a node one more layer up.
    pub level_prob: f64,
    /// Cap on the number of layers.
    pub max_layers: usize,
    pub seed: u64,
    /// Prune candidates already covered by a closer selected neighbor.
    pub diversity_heuristic: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            m: 16,
            ef_construction: 100,
            level_prob: 1.0 / 17.0,
            max_layers: 4,
            seed: 0,
            diversity_heuristic: false,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::invalid("M must be at least 2"));
        }
        if self.ef_construction == 0 {
            return Err(Error::invalid("ef_construction must be positive"));
        }
        if !(self.level_prob > 0.0 && self.level_prob < 1.0) {
            return Err(Error::invalid("level_prob must lie in (0, 1)"));
        }
        if self.max_layers == 0 || self.max_layers > u8::MAX as usize {
            return Err(Error::invalid("max_layers must lie in [1, 255]"));
        }
        Ok(())
    }

    pub fn degree_cap(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }
}

/// Distance-ordered candidate; ties go to the lower item id.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Near {
    pub dist: f64,
    pub item: ItemId,
    pub node: NodeId,
}

impl PartialEq for Near {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Near {}

impl PartialOrd for Near {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Near {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.item.cmp(&other.item))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphIndex {
    config: IndexConfig,
    dim: usize,
    vectors: Vec<f64>,
    item_ids: Vec<ItemId>,
    node_of: HashMap<ItemId, NodeId>,
    levels: Vec<u8>,
    /// `links[node][layer]` for `layer <= levels[node]`.
    links: Vec<Vec<Vec<NodeId>>>,
    entry_point: Option<NodeId>,
}

impl GraphIndex {
    pub fn new(config: IndexConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        Ok(GraphIndex {
            config,
            dim,
            vectors: Vec::new(),
            item_ids: Vec::new(),
            node_of: HashMap::new(),
            levels: Vec::new(),
            links: Vec::new(),
            entry_point: None,
        })
    }

    /// Inserts `(item id, embedding)` pairs in order.
    pub fn build<'a, I>(config: IndexConfig, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (ItemId, &'a [f64])>,
    {
        let mut iter = items.into_iter().peekable();
        let dim = iter
            .peek()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::invalid("cannot build an index over zero items"))?;
        let mut index = GraphIndex::new(config, dim)?;
        for (id, v) in iter {
            index.insert(id, v)?;
        }
        Ok(index)
    }

    /// Builds over dense ids `0..embeddings.len()`.
    pub fn build_dense(config: IndexConfig, embeddings: &[Vec<f64>]) -> Result<Self> {
        Self::build(
            config,
            embeddings
                .iter()
                .enumerate()
                .map(|(i, v)| (i as ItemId, v.as_slice())),
        )
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    /// Number of layers currently populated.
    pub fn layer_count(&self) -> usize {
        self.entry_point
            .map(|e| self.levels[e as usize] as usize + 1)
            .unwrap_or(0)
    }

    /// Node count per layer, base layer first.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.layer_count()];
        for &l in &self.levels {
            for s in sizes.iter_mut().take(l as usize + 1) {
                *s += 1;
            }
        }
        sizes
    }

    pub fn entry_point(&self) -> Option<ItemId> {
        self.entry_point.map(|n| self.item_ids[n as usize])
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.node_of.contains_key(&item)
    }

    pub fn level_of(&self, item: ItemId) -> Option<usize> {
        self.node_of.get(&item).map(|&n| self.levels[n as usize] as usize)
    }

    pub fn item_ids(&self) -> &[ItemId] {
        &self.item_ids
    }

    pub fn embedding(&self, item: ItemId) -> Option<&[f64]> {
        self.node_of.get(&item).map(|&n| self.vector(n))
    }

    /// Neighbors of `item` on `layer`, or `None` if the item is absent there.
    pub fn neighbors(&self, item: ItemId, layer: usize) -> Option<Vec<ItemId>> {
        let &n = self.node_of.get(&item)?;
        self.links[n as usize]
            .get(layer)
            .map(|ns| ns.iter().map(|&x| self.item_ids[x as usize]).collect())
    }

    pub(crate) fn node(&self, item: ItemId) -> Option<NodeId> {
        self.node_of.get(&item).copied()
    }

    pub(crate) fn item_of(&self, node: NodeId) -> ItemId {
        self.item_ids[node as usize]
    }

    pub(crate) fn node_level(&self, node: NodeId) -> usize {
        self.levels[node as usize] as usize
    }

    pub(crate) fn links(&self, node: NodeId, layer: usize) -> &[NodeId] {
        self.links[node as usize]
            .get(layer)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub(crate) fn entry_node(&self) -> Option<NodeId> {
        self.entry_point
    }

    #[inline]
    pub(crate) fn vector(&self, node: NodeId) -> &[f64] {
        let start = node as usize * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Level drawn for an item: the number of consecutive successes of a
    /// Bernoulli(level_prob) draw, capped at `max_layers - 1`. Depends only on
    /// the seed and the item id.
    pub fn draw_level(config: &IndexConfig, item: ItemId) -> usize {
        let mut rng = stream_rng(config.seed, item as u64);
        let mut level = 0;
        while level + 1 < config.max_layers && rng.random::<f64>() < config.level_prob {
            level += 1;
        }
        level
    }

    #[inline]
    fn dist_to(&self, query: &[f64], node: NodeId) -> f64 {
        squared_euclidean(query, self.vector(node))
    }

    fn near(&self, query: &[f64], node: NodeId) -> Near {
        Near {
            dist: self.dist_to(query, node),
            item: self.item_of(node),
            node,
        }
    }

    /// Best-first search on one layer; returns up to `ef` nodes, closest first.
    pub(crate) fn search_layer(
        &self,
        query: &[f64],
        entry: &[Near],
        ef: usize,
        layer: usize,
    ) -> Vec<Near> {
        let mut visited: HashSet<NodeId> = entry.iter().map(|e| e.node).collect();
        let mut frontier: BinaryHeap<std::cmp::Reverse<Near>> =
            entry.iter().copied().map(std::cmp::Reverse).collect();
        let mut best: BinaryHeap<Near> = entry.iter().copied().collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            if best.len() >= ef && c > *best.peek().expect("nonempty") {
                break;
            }
            for &n in self.links(c.node, layer) {
                if !visited.insert(n) {
                    continue;
                }
                let cand = self.near(query, n);
                if best.len() < ef || cand < *best.peek().expect("nonempty") {
                    frontier.push(std::cmp::Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    fn select_neighbors(&self, candidates: &[Near], cap: usize) -> Vec<Near> {
        if !self.config.diversity_heuristic {
            return candidates.iter().take(cap).copied().collect();
        }
        let mut chosen: Vec<Near> = Vec::with_capacity(cap);
        for c in candidates {
            if chosen.len() >= cap {
                break;
            }
            let dominated = chosen.iter().any(|s| {
                squared_euclidean(self.vector(c.node), self.vector(s.node)) < c.dist
            });
            if !dominated {
                chosen.push(*c);
            }
        }
        chosen
    }

    fn connect(&mut self, a: NodeId, b: NodeId, layer: usize) {
        self.links[a as usize][layer].push(b);
        self.links[b as usize][layer].push(a);
    }

    fn disconnect(&mut self, a: NodeId, b: NodeId, layer: usize) {
        self.links[a as usize][layer].retain(|&x| x != b);
        self.links[b as usize][layer].retain(|&x| x != a);
    }

    /// Re-selects `node`'s neighbors on `layer` if it exceeds the degree cap,
    /// dropping the reverse edges of the neighbors it lets go.
    fn shrink(&mut self, node: NodeId, layer: usize) {
        let cap = self.config.degree_cap(layer);
        if self.links[node as usize][layer].len() <= cap {
            return;
        }
        let base = self.vector(node).to_vec();
        let mut cands: Vec<Near> = self.links[node as usize][layer]
            .iter()
            .map(|&n| self.near(&base, n))
            .collect();
        cands.sort();
        let keep: HashSet<NodeId> = self
            .select_neighbors(&cands, cap)
            .into_iter()
            .map(|n| n.node)
            .collect();
        for c in cands {
            if !keep.contains(&c.node) {
                self.disconnect(node, c.node, layer);
            }
        }
    }

    /// Adds one item. Existing neighbor lists that overflow are re-selected
    /// down to the cap, keeping adjacency symmetric.
    pub fn insert(&mut self, item: ItemId, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding has dim {}, index expects {}",
                embedding.len(),
                self.dim
            )));
        }
        if self.node_of.contains_key(&item) {
            return Err(Error::invalid(format!("item {item} is already indexed")));
        }
        if self.item_ids.len() >= NodeId::MAX as usize {
            return Err(Error::invalid("index is full"));
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("item {item} has a non-finite embedding")));
        }
        let level = Self::draw_level(&self.config, item);
        let node = self.item_ids.len() as NodeId;
        self.vectors.extend_from_slice(embedding);
        self.item_ids.push(item);
        self.node_of.insert(item, node);
        self.levels.push(level as u8);
        self.links.push(vec![Vec::new(); level + 1]);

        let Some(entry) = self.entry_point else {
            self.entry_point = Some(node);
            return Ok(());
        };
        let top = self.node_level(entry);
        let mut eps = vec![self.near(embedding, entry)];
        for layer in (level + 1..=top).rev() {
            eps = self.search_layer(embedding, &eps, 1, layer);
        }
        for layer in (0..=level.min(top)).rev() {
            let cands = self.search_layer(embedding, &eps, self.config.ef_construction, layer);
            let chosen = self.select_neighbors(&cands, self.config.m);
            for c in &chosen {
                self.connect(node, c.node, layer);
            }
            for c in &chosen {
                self.shrink(c.node, layer);
            }
            eps = cands;
        }
        if level > top {
            self.entry_point = Some(node);
        }
        Ok(())
    }

    /// Builds an index from explicit per-layer edge lists (layer 0 first).
    /// Levels are taken from the highest layer each item appears in; every
    /// item must be listed in `items`. Used for hand-constructed graphs.
    pub fn from_edges(
        config: IndexConfig,
        items: &[(ItemId, Vec<f64>)],
        levels: &[usize],
        edges: &[Vec<(ItemId, ItemId)>],
        entry_point: ItemId,
    ) -> Result<Self> {
        if items.is_empty() || items.len() != levels.len() {
            return Err(Error::invalid("items and levels must be nonempty and aligned"));
        }
        let mut index = GraphIndex::new(config, items[0].1.len())?;
        for ((id, v), &level) in items.iter().zip(levels) {
            if v.len() != index.dim {
                return Err(Error::invalid("inconsistent embedding dims"));
            }
            if index.node_of.contains_key(id) {
                return Err(Error::invalid(format!("item {id} is listed twice")));
            }
            let node = index.item_ids.len() as NodeId;
            index.vectors.extend_from_slice(v);
            index.item_ids.push(*id);
            index.node_of.insert(*id, node);
            index.levels.push(level as u8);
            index.links.push(vec![Vec::new(); level + 1]);
        }
        for (layer, list) in edges.iter().enumerate() {
            for &(a, b) in list {
                let (Some(na), Some(nb)) = (index.node(a), index.node(b)) else {
                    return Err(Error::invalid(format!("edge ({a}, {b}) names unknown item")));
                };
                if index.node_level(na) < layer || index.node_level(nb) < layer {
                    return Err(Error::invalid(format!(
                        "edge ({a}, {b}) on layer {layer} above an endpoint's level"
                    )));
                }
                if a != b && !index.links[na as usize][layer].contains(&nb) {
                    index.connect(na, nb, layer);
                }
            }
        }
        index.entry_point = Some(
            index
                .node(entry_point)
                .ok_or_else(|| Error::invalid("entry point is not an item"))?,
        );
        index.validate()?;
        Ok(index)
    }

    /// Checks layer nesting, symmetry, degree caps and the entry point.
    pub fn validate(&self) -> Result<()> {
        let n = self.item_ids.len();
        if self.levels.len() != n || self.links.len() != n || self.vectors.len() != n * self.dim
        {
            return Err(Error::invalid("index arrays disagree in length"));
        }
        if n == 0 {
            return match self.entry_point {
                None => Ok(()),
                Some(_) => Err(Error::invalid("empty index with an entry point")),
            };
        }
        let entry = self
            .entry_point
            .ok_or_else(|| Error::invalid("nonempty index without entry point"))?;
        let top = *self.levels.iter().max().expect("nonempty");
        if self.levels[entry as usize] != top {
            return Err(Error::invalid(format!(
                "entry point has level {}, top layer is {top}",
                self.levels[entry as usize]
            )));
        }
        for node in 0..n {
            let level = self.levels[node] as usize;
            if level >= self.config.max_layers {
                return Err(Error::invalid(format!("node {node} exceeds max_layers")));
            }
            if self.links[node].len() != level + 1 {
                return Err(Error::invalid(format!("node {node} has wrong layer count")));
            }
            if self.node_of.get(&self.item_ids[node]) != Some(&(node as NodeId)) {
                return Err(Error::invalid(format!("node {node} missing from id map")));
            }
            for (layer, ns) in self.links[node].iter().enumerate() {
                if ns.len() > self.config.degree_cap(layer) {
                    return Err(Error::invalid(format!(
                        "item {} has degree {} on layer {layer} (cap {})",
                        self.item_ids[node],
                        ns.len(),
                        self.config.degree_cap(layer)
                    )));
                }
                let mut seen = HashSet::with_capacity(ns.len());
                for &m in ns {
                    if m as usize >= n || m as usize == node || !seen.insert(m) {
                        return Err(Error::invalid(format!(
                            "item {} has an invalid or repeated neighbor on layer {layer}",
                            self.item_ids[node]
                        )));
                    }
                    let back = self.links[m as usize].get(layer);
                    if !back.is_some_and(|b| b.contains(&(node as NodeId))) {
                        return Err(Error::invalid(format!(
                            "edge {} -> {} on layer {layer} is not symmetric",
                            self.item_ids[node], self.item_ids[m as usize]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Number of base-layer connected components.
    pub fn base_components(&self) -> usize {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            let mut stack = vec![start as NodeId];
            seen[start] = true;
            while let Some(x) = stack.pop() {
                for &y in self.links(x, 0) {
                    if !seen[y as usize] {
                        seen[y as usize] = true;
                        stack.push(y);
                    }
                }
            }
        }
        components
    }
}
