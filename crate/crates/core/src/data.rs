//! Users, items, interaction records and the synthetic dataset generator.
//!
//! The on-disk format is line-oriented text: a version line, a header block of
//! `key<TAB>value` counts, then one record per line (`user`, `item`, `x`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type UserId = u32;
pub type ItemId = u32;

const DATA_MAGIC: &str = "NANN-DATA v1";

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: UserId,
    pub raw_features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: ItemId,
    pub raw_features: Vec<f64>,
}

/// One observed behavior of a user on an item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionRecord {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub behavior_type: usize,
    pub value: f64,
}

/// Per-pair stack of behavior strengths, one slot per behavior type.
/// Unobserved behaviors hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionVector(pub Vec<f64>);

impl InteractionVector {
    pub fn zeros(z_dim: usize) -> Self {
        InteractionVector(vec![0.0; z_dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub users: Vec<UserRecord>,
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<InteractionRecord>,
    pub z_dim: usize,
}

impl Dataset {
    /// Assembles a dataset, checking every structural invariant.
    pub fn new(
        users: Vec<UserRecord>,
        items: Vec<ItemRecord>,
        interactions: Vec<InteractionRecord>,
        z_dim: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            users,
            items,
            interactions,
            z_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_dim(&self) -> usize {
        self.users
            .first()
            .map(|u| u.raw_features.len())
            .or_else(|| self.items.first().map(|i| i.raw_features.len()))
            .unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0 {
            return Err(Error::invalid("z_dim must be positive"));
        }
        let d_x = self.feature_dim();
        let mut user_ids = HashSet::with_capacity(self.users.len());
        for u in &self.users {
            if u.raw_features.len() != d_x {
                return Err(Error::invalid(format!(
                    "user {} has {} features, expected {d_x}",
                    u.user_id,
                    u.raw_features.len()
                )));
            }
            if !user_ids.insert(u.user_id) {
                return Err(Error::invalid(format!("duplicate user id {}", u.user_id)));
            }
        }
        for (pos, it) in self.items.iter().enumerate() {
            if it.item_id as usize != pos {
                return Err(Error::invalid(format!(
                    "item ids must be dense: position {pos} holds id {}",
                    it.item_id
                )));
            }
            if it.raw_features.len() != d_x {
                return Err(Error::invalid(format!(
                    "item {} has {} features, expected {d_x}",
                    it.item_id,
                    it.raw_features.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(self.interactions.len());
        for r in &self.interactions {
            if !user_ids.contains(&r.user_id) {
                return Err(Error::invalid(format!(
                    "interaction references unknown user {}",
                    r.user_id
                )));
            }
            if r.item_id as usize >= self.items.len() {
                return Err(Error::invalid(format!(
                    "interaction references unknown item {}",
                    r.item_id
                )));
            }
            if r.behavior_type >= self.z_dim {
                return Err(Error::invalid(format!(
                    "behavior type {} out of range (z_dim {})",
                    r.behavior_type, self.z_dim
                )));
            }
            if !(r.value.is_finite() && r.value >= 0.0) {
                return Err(Error::invalid(format!(
                    "interaction value {} must be finite and nonnegative",
                    r.value
                )));
            }
            if !seen.insert((r.user_id, r.item_id, r.behavior_type)) {
                return Err(Error::invalid(format!(
                    "duplicate interaction ({}, {}, {})",
                    r.user_id, r.item_id, r.behavior_type
                )));
            }
        }
        Ok(())
    }

    /// Position of each user id in `users`.
    pub fn user_index(&self) -> BTreeMap<UserId, usize> {
        self.users
            .iter()
            .enumerate()
            .map(|(i, u)| (u.user_id, i))
            .collect()
    }

    /// Observed (user position, item id) pairs with their stacked interaction
    /// vectors, in ascending pair order.
    pub fn interaction_vectors(&self) -> BTreeMap<(usize, ItemId), InteractionVector> {
        let index = self.user_index();
        let mut out: BTreeMap<(usize, ItemId), InteractionVector> = BTreeMap::new();
        for r in &self.interactions {
            let key = (index[&r.user_id], r.item_id);
            out.entry(key)
                .or_insert_with(|| InteractionVector::zeros(self.z_dim))
                .0[r.behavior_type] = r.value;
        }
        out
    }

    /// Copy of the dataset keeping a single behavior type, renumbered to 0.
    pub fn single_behavior(&self, behavior_type: usize) -> Result<Dataset> {
        if behavior_type >= self.z_dim {
            return Err(Error::invalid(format!(
                "behavior type {behavior_type} out of range (z_dim {})",
                self.z_dim
            )));
        }
        let interactions = self
            .interactions
            .iter()
            .filter(|r| r.behavior_type == behavior_type)
            .map(|r| InteractionRecord {
                behavior_type: 0,
                ..*r
            })
            .collect();
        Ok(Dataset {
            users: self.users.clone(),
            items: self.items.clone(),
            interactions,
            z_dim: 1,
        })
    }
}

/// Parameters of the planted-affinity generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub d_x: usize,
    pub z_dim: usize,
    pub density: f64,
}

const CLUSTERS: usize = 16;
const AFFINITY_SCALE: f64 = 2.0;
const VALUE_NOISE: f64 = 0.3;
const FEATURE_NOISE: f64 = 0.05;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws a dataset with planted user/item structure.
///
/// Users and items get latent vectors around a shared set of cluster centers;
/// raw features are a fixed random linear mix of the latent plus small noise.
/// Every (user, item, type) triple gets the value
/// `sigmoid(scale * affinity + offset[type] + noise)` and the highest-valued
/// `floor(density * n_users * n_items * z_dim)` triples become records, ties
/// broken by triple order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        seed,
        n_users,
        n_items,
        d_x,
        z_dim,
        density,
    } = *spec;
    if n_users == 0 || n_items == 0 || d_x == 0 || z_dim == 0 {
        return Err(Error::invalid("all counts must be positive"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!(
            "density must lie in (0, 1], got {density}"
        )));
    }
    if n_items > ItemId::MAX as usize || n_users > UserId::MAX as usize {
        return Err(Error::invalid("too many users or items for 32-bit ids"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = d_x.div_ceil(2).clamp(1, 8);

    let centers: Vec<Vec<f64>> = (0..CLUSTERS)
        .map(|_| (0..latent).map(|_| normal(&mut rng)).collect())
        .collect();
    let draw_latent = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let c = &centers[rng.random_range(0..CLUSTERS)];
        c.iter().map(|x| x + 0.5 * normal(rng)).collect()
    };
    let user_latent: Vec<Vec<f64>> = (0..n_users).map(|_| draw_latent(&mut rng)).collect();
    let item_latent: Vec<Vec<f64>> = (0..n_items).map(|_| draw_latent(&mut rng)).collect();

    let mixing: Vec<Vec<f64>> = (0..d_x)
        .map(|_| {
            (0..latent)
                .map(|_| normal(&mut rng) / (latent as f64).sqrt())
                .collect()
        })
        .collect();
    let to_features = |z: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        mixing
            .iter()
            .map(|row| {
                row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + FEATURE_NOISE * normal(rng)
            })
            .collect()
    };
    let users: Vec<UserRecord> = user_latent
        .iter()
        .enumerate()
        .map(|(i, z)| UserRecord {
            user_id: i as UserId,
            raw_features: to_features(z, &mut rng),
        })
        .collect();
    let items: Vec<ItemRecord> = item_latent
        .iter()
        .enumerate()
        .map(|(i, z)| ItemRecord {
            item_id: i as ItemId,
            raw_features: to_features(z, &mut rng),
        })
        .collect();

    let offsets: Vec<f64> = (0..z_dim).map(|t| -0.5 * t as f64).collect();
    let norm = (latent as f64).sqrt();
    let total = n_users * n_items * z_dim;
    let mut values = Vec::with_capacity(total);
    for u in &user_latent {
        for v in &item_latent {
            let affinity = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
            for off in &offsets {
                values.push(sigmoid(
                    AFFINITY_SCALE * affinity + off + VALUE_NOISE * normal(&mut rng),
                ));
            }
        }
    }

    let count = ((density * total as f64) + 1e-9).floor() as usize;
    let count = count.min(total);
    let mut order: Vec<usize> = (0..total).collect();
    let by_value = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    if count < total && count > 0 {
        order.select_nth_unstable_by(count - 1, by_value);
    }
    order.truncate(count);
    order.sort_unstable();

    let interactions = order
        .into_iter()
        .map(|flat| {
            let t = flat % z_dim;
            let pair = flat / z_dim;
            InteractionRecord {
                user_id: (pair / n_items) as UserId,
                item_id: (pair % n_items) as ItemId,
                behavior_type: t,
                value: values[flat],
            }
        })
        .collect();

    Ok(Dataset {
        users,
        items,
        interactions,
        z_dim,
    })
}

fn write_row(out: &mut impl Write, tag: &str, id: u32, xs: &[f64]) -> std::io::Result<()> {
    write!(out, "{tag}\t{id}")?;
    for x in xs {
        write!(out, "\t{x}")?;
    }
    writeln!(out)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    writeln!(out, "{DATA_MAGIC}")?;
    writeln!(out, "n_users\t{}", ds.users.len())?;
    writeln!(out, "n_items\t{}", ds.items.len())?;
    writeln!(out, "d_x\t{}", ds.feature_dim())?;
    writeln!(out, "z_dim\t{}", ds.z_dim)?;
    writeln!(out, "n_interactions\t{}", ds.interactions.len())?;
    for u in &ds.users {
        write_row(out, "user", u.user_id, &u.raw_features)?;
    }
    for i in &ds.items {
        write_row(out, "item", i.item_id, &i.raw_features)?;
    }
    for r in &ds.interactions {
        writeln!(
            out,
            "x\t{}\t{}\t{}\t{}",
            r.user_id, r.item_id, r.behavior_type, r.value
        )?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, expect: &str) -> Result<(usize, Vec<&'a str>)> {
        match self.inner.next() {
            Some((i, line)) => {
                self.last = i + 1;
                Ok((i + 1, line.split('\t').collect()))
            }
            None => Err(Error::Parse {
                line: self.last + 1,
                message: format!("unexpected end of file, expected {expect}"),
            }),
        }
    }
}

fn field<T: std::str::FromStr>(line: usize, fields: &[&str], idx: usize, what: &str) -> Result<T> {
    let raw = fields.get(idx).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field {what}"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} from {raw:?}"),
    })
}

fn header(lines: &mut Lines<'_>, key: &str) -> Result<usize> {
    let (line, f) = lines.next_line(key)?;
    if f.len() != 2 || f[0] != key {
        return Err(Error::Parse {
            line,
            message: format!("expected header `{key}<TAB>count`"),
        });
    }
    field(line, &f, 1, key)
}

fn feature_row<'a>(
    lines: &mut Lines<'a>,
    tag: &str,
    d_x: usize,
) -> Result<(usize, u32, Vec<f64>)> {
    let (line, f) = lines.next_line(tag)?;
    if f[0] != tag {
        return Err(Error::Parse {
            line,
            message: format!("expected `{tag}` record, found `{}`", f[0]),
        });
    }
    if f.len() != d_x + 2 {
        return Err(Error::Parse {
            line,
            message: format!("expected {} fields, found {}", d_x + 2, f.len()),
        });
    }
    let id = field(line, &f, 1, "id")?;
    let xs = (0..d_x)
        .map(|k| field(line, &f, k + 2, "feature"))
        .collect::<Result<Vec<f64>>>()?;
    Ok((line, id, xs))
}

/// Parses the text format produced by [`write_dataset`].
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (line, magic) = lines.next_line("version header")?;
    if magic.join("\t") != DATA_MAGIC {
        return Err(Error::Parse {
            line,
            message: format!("expected `{DATA_MAGIC}`"),
        });
    }
    let n_users = header(&mut lines, "n_users")?;
    let n_items = header(&mut lines, "n_items")?;
    let d_x = header(&mut lines, "d_x")?;
    let z_dim = header(&mut lines, "z_dim")?;
    let n_inter = header(&mut lines, "n_interactions")?;

    let mut users = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let (_, user_id, raw_features) = feature_row(&mut lines, "user", d_x)?;
        users.push(UserRecord {
            user_id,
            raw_features,
        });
    }
    let mut items = Vec::with_capacity(n_items);
    for _ in 0..n_items {
        let (_, item_id, raw_features) = feature_row(&mut lines, "item", d_x)?;
        items.push(ItemRecord {
            item_id,
            raw_features,
        });
    }
    let mut interactions = Vec::with_capacity(n_inter);
    for _ in 0..n_inter {
        let (line, f) = lines.next_line("interaction")?;
        if f[0] != "x" || f.len() != 5 {
            return Err(Error::Parse {
                line,
                message: "expected `x<TAB>user<TAB>item<TAB>type<TAB>value`".into(),
            });
        }
        interactions.push(InteractionRecord {
            user_id: field(line, &f, 1, "user id")?,
            item_id: field(line, &f, 2, "item id")?,
            behavior_type: field(line, &f, 3, "behavior type")?,
            value: field(line, &f, 4, "value")?,
        });
    }
    if let Some((i, extra)) = lines.inner.next() {
        if !extra.trim().is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                message: "trailing content after declared records".into(),
            });
        }
    }
    Dataset::new(users, items, interactions, z_dim).map_err(|e| match e {
        Error::InvalidArgument(message) => Error::Parse {
            line: lines.last,
            message,
        },
        other => other,
    })
}

/// Deterministic RNG for a named stream derived from a base seed.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
