//! Binary persistence for [`GraphIndex`].
//!
//! Layout (little-endian): magic `NANN-IDX`, version, layer count, M,
//! level_prob, entry item id, then the remaining config fields, node count,
//! embedding dim, item ids, node levels, one CSR block per layer (row offsets
//! then neighbor node indices, rows in node order restricted to that layer),
//! and finally the embeddings as f64.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GraphIndex, IndexConfig, NodeId};
use crate::error::{Error, Result};
use crate::metric::Reader;

const INDEX_MAGIC: &[u8] = b"NANN-IDX";
const INDEX_VERSION: u32 = 1;
const NO_ENTRY: u32 = u32::MAX;

impl GraphIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let put_u32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
        out.extend_from_slice(INDEX_MAGIC);
        put_u32(&mut out, INDEX_VERSION);
        put_u32(&mut out, self.layer_count() as u32);
        put_u32(&mut out, self.config.m as u32);
        out.extend_from_slice(&self.config.level_prob.to_le_bytes());
        put_u32(&mut out, self.entry_point().unwrap_or(NO_ENTRY));
        put_u32(&mut out, self.config.ef_construction as u32);
        put_u32(&mut out, self.config.max_layers as u32);
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.push(self.config.diversity_heuristic as u8);
        put_u32(&mut out, self.len() as u32);
        put_u32(&mut out, self.dim as u32);
        for &id in &self.item_ids {
            put_u32(&mut out, id);
        }
        out.extend_from_slice(&self.levels);
        for layer in 0..self.layer_count() {
            let rows: Vec<usize> = (0..self.len())
                .filter(|&n| self.levels[n] as usize >= layer)
                .collect();
            let mut offset = 0u32;
            put_u32(&mut out, offset);
            for &n in &rows {
                offset += self.links[n][layer].len() as u32;
                put_u32(&mut out, offset);
            }
            for &n in &rows {
                for &m in &self.links[n][layer] {
                    put_u32(&mut out, m);
                }
            }
        }
        for &x in &self.vectors {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(INDEX_MAGIC.len())? != INDEX_MAGIC {
            return Err(r.err("bad magic, not an index file"));
        }
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::Version {
                what: "index",
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let layers = r.u32()? as usize;
        let m = r.u32()? as usize;
        let level_prob = r.f64()?;
        let entry = r.u32()?;
        let ef_construction = r.u32()? as usize;
        let max_layers = r.u32()? as usize;
        let seed = r.u64()?;
        let diversity_heuristic = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(r.err("bad heuristic flag")),
        };
        let config = IndexConfig {
            m,
            ef_construction,
            level_prob,
            max_layers,
            seed,
            diversity_heuristic,
        };
        config
            .validate()
            .map_err(|e| r.err(&format!("bad config: {e}")))?;
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(r.err("zero embedding dimension"));
        }
        if n.saturating_mul(4) > r.remaining() {
            return Err(r.err("node count exceeds file size"));
        }
        let mut item_ids = Vec::with_capacity(n);
        for _ in 0..n {
            item_ids.push(r.u32()?);
        }
        let levels = r.take(n)?.to_vec();
        let mut links: Vec<Vec<Vec<NodeId>>> = levels
            .iter()
            .map(|&l| vec![Vec::new(); l as usize + 1])
            .collect();
        for layer in 0..layers {
            let rows: Vec<usize> = (0..n).filter(|&i| levels[i] as usize >= layer).collect();
            let mut offsets = Vec::with_capacity(rows.len() + 1);
            for _ in 0..=rows.len() {
                offsets.push(r.u32()? as usize);
            }
            if offsets[0] != 0 || offsets.windows(2).any(|w| w[0] > w[1]) {
                return Err(r.err("non-monotone CSR offsets"));
            }
            for (k, &node) in rows.iter().enumerate() {
                let count = offsets[k + 1] - offsets[k];
                let mut ns = Vec::with_capacity(count);
                for _ in 0..count {
                    ns.push(r.u32()?);
                }
                links[node][layer] = ns;
            }
        }
        let mut vectors = Vec::with_capacity(n * dim);
        for _ in 0..n * dim {
            vectors.push(r.f64()?);
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after index"));
        }
        let node_of: HashMap<_, _> = item_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as NodeId))
            .collect();
        let entry_point = if entry == NO_ENTRY {
            None
        } else {
            Some(
                *node_of
                    .get(&entry)
                    .ok_or_else(|| r.err("entry point is not an indexed item"))?,
            )
        };
        let index = GraphIndex {
            config,
            dim,
            vectors,
            item_ids,
            node_of,
            levels,
            links,
            entry_point,
        };
        if index.layer_count() != layers {
            return Err(r.err("layer count disagrees with node levels"));
        }
        index.validate()?;
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
