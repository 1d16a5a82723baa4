//! The learned user-item relevance metric.
//!
//! Raw features are mapped into a shared embedding space by two affine
//! projectors. The metric concatenates `h_u + noise` with `h_v`, runs an MLP
//! whose last layer emits one predicted strength per behavior type, and
//! collapses that vector with an attention vector into one relevance score.

use std::fs;
use std::io::Write;
use std::path::Path;

use half::f16;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::InteractionVector;
use crate::error::{Error, Result};

/// Higher is more relevant.
pub type RelevanceScore = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::Fp32 => 0,
            Precision::Fp16 => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::Fp32),
            1 => Some(Precision::Fp16),
            _ => None,
        }
    }

    pub fn bytes_per_weight(self) -> usize {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }
}

/// Nonlinearity applied between hidden layers. The output layer is always linear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    pub(crate) fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Affine map `y = W x + b` with `W` stored row-major as `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    fn random(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = (2.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = (0..in_dim * out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
            .collect();
        Dense {
            in_dim,
            out_dim,
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    /// Writes `W x + b` into `out`; no dimension checks.
    #[inline]
    pub(crate) fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weight.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.apply_into(x, &mut out);
        out
    }
}

/// User or item feature projector (`H_u` / `H_v`).
pub type Projector = Dense;

impl Projector {
    /// Maps raw features into the embedding space.
    pub fn project(&self, raw_features: &[f64]) -> Result<Vec<f64>> {
        if raw_features.len() != self.in_dim {
            return Err(Error::invalid(format!(
                "projector expects {} features, got {}",
                self.in_dim,
                raw_features.len()
            )));
        }
        Ok(self.apply(raw_features))
    }
}

/// Dimensions of a metric model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_x: usize,
    pub d_h: usize,
    pub hidden: Vec<usize>,
    pub z_dim: usize,
    pub activation: Activation,
}

impl ModelShape {
    pub fn new(d_x: usize, d_h: usize, hidden: Vec<usize>, z_dim: usize) -> Self {
        ModelShape {
            d_x,
            d_h,
            hidden,
            z_dim,
            activation: Activation::Relu,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 || self.z_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("zero dimension in {self:?}")));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = 2 * self.d_h;
        for &h in self.hidden.iter().chain(std::iter::once(&self.z_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub user_projector: Projector,
    pub item_projector: Projector,
    pub layers: Vec<Dense>,
    pub attention: Vec<f64>,
    pub serendipity_sigma: f64,
    pub activation: Activation,
    pub precision: Precision,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    /// Input to each layer (`inputs[0]` is the concatenation).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pub pre: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("model has at least one layer")
    }
}

impl MetricModel {
    /// All-zero weights with uniform attention.
    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        shape.validate()?;
        Ok(MetricModel {
            user_projector: Dense::zeros(shape.d_x, shape.d_h),
            item_projector: Dense::zeros(shape.d_x, shape.d_h),
            layers: shape
                .layer_dims()
                .into_iter()
                .map(|(i, o)| Dense::zeros(i, o))
                .collect(),
            attention: vec![1.0 / shape.z_dim as f64; shape.z_dim],
            serendipity_sigma: 1.0,
            activation: shape.activation,
            precision: Precision::Fp32,
        })
    }

    /// Glorot-normal weights, zero biases, uniform attention; every value is
    /// rounded to single precision.
    pub fn random(shape: &ModelShape, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let user_projector = Dense::random(shape.d_x, shape.d_h, rng);
        let item_projector = Dense::random(shape.d_x, shape.d_h, rng);
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::random(i, o, rng))
            .collect();
        let mut model = MetricModel {
            user_projector,
            item_projector,
            layers,
            attention: vec![1.0 / shape.z_dim as f64; shape.z_dim],
            serendipity_sigma: 1.0,
            activation: shape.activation,
            precision: Precision::Fp32,
        };
        model.round_to_storage();
        Ok(model)
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_x: self.user_projector.in_dim,
            d_h: self.user_projector.out_dim,
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.out_dim)
                .collect(),
            z_dim: self.z_dim(),
            activation: self.activation,
        }
    }

    pub fn d_h(&self) -> usize {
        self.user_projector.out_dim
    }

    pub fn z_dim(&self) -> usize {
        self.attention.len()
    }

    /// Checks the dimension chain linking projectors, layers and attention.
    pub fn validate(&self) -> Result<()> {
        let d_h = self.d_h();
        let up = &self.user_projector;
        let ip = &self.item_projector;
        if ip.out_dim != d_h || ip.in_dim != up.in_dim {
            return Err(Error::invalid("user and item projectors disagree on dims"));
        }
        for p in [up, ip] {
            if p.weight.len() != p.in_dim * p.out_dim || p.bias.len() != p.out_dim {
                return Err(Error::invalid("projector block sizes inconsistent"));
            }
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("model needs at least one layer"));
        }
        let mut prev = 2 * d_h;
        for (m, l) in self.layers.iter().enumerate() {
            if l.in_dim != prev || l.weight.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim
            {
                return Err(Error::invalid(format!("layer {m} has inconsistent dims")));
            }
            prev = l.out_dim;
        }
        if prev != self.attention.len() {
            return Err(Error::invalid(format!(
                "final layer emits {prev} values but attention has {}",
                self.attention.len()
            )));
        }
        if !(self.serendipity_sigma >= 0.0) {
            return Err(Error::invalid("serendipity sigma must be nonnegative"));
        }
        Ok(())
    }

    /// Parameter blocks in canonical order with stable names.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("user_projector.weight".into(), &self.user_projector.weight),
            ("user_projector.bias".into(), &self.user_projector.bias),
            ("item_projector.weight".into(), &self.item_projector.weight),
            ("item_projector.bias".into(), &self.item_projector.bias),
        ];
        for (m, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{m}.weight"), &l.weight));
            out.push((format!("layer{m}.bias"), &l.bias));
        }
        out.push(("attention".into(), &self.attention));
        out
    }

    /// Mutable parameter blocks, same order as [`MetricModel::blocks`].
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.user_projector.weight,
            &mut self.user_projector.bias,
            &mut self.item_projector.weight,
            &mut self.item_projector.bias,
        ];
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.attention);
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .into_iter()
            .flat_map(|(_, b)| b.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut rest = flat;
        for block in self.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// A model of the same shape with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    /// Rounds every parameter to the storage precision of this model.
    pub fn round_to_storage(&mut self) {
        let precision = self.precision;
        for b in self.blocks_mut() {
            for w in b.iter_mut() {
                *w = match precision {
                    Precision::Fp32 => *w as f32 as f64,
                    Precision::Fp16 => f16::from_f64(*w).to_f64(),
                };
            }
        }
    }

    pub fn project_user(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.user_projector.project(raw)
    }

    pub fn project_item(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.item_projector.project(raw)
    }

    fn check_embeddings(&self, h_u: &[f64], h_v: &[f64], noise: Option<&[f64]>) -> Result<()> {
        let d_h = self.d_h();
        if h_u.len() != d_h || h_v.len() != d_h {
            return Err(Error::invalid(format!(
                "embeddings must have dim {d_h}, got {} and {}",
                h_u.len(),
                h_v.len()
            )));
        }
        if let Some(n) = noise {
            if n.len() != d_h {
                return Err(Error::invalid(format!(
                    "serendipity vector must have dim {d_h}, got {}",
                    n.len()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn trace(&self, h_u: &[f64], h_v: &[f64], noise: Option<&[f64]>) -> ForwardTrace {
        let d_h = self.d_h();
        let mut x = Vec::with_capacity(2 * d_h);
        match noise {
            Some(n) => x.extend(h_u.iter().zip(n).map(|(a, b)| a + b)),
            None => x.extend_from_slice(h_u),
        }
        x.extend_from_slice(h_v);
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (m, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&x);
            let next = if m == last {
                Vec::new()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut x, next));
            pre.push(z);
        }
        ForwardTrace { inputs, pre }
    }

    /// Predicted interaction vector for a user/item embedding pair.
    ///
    /// `serendipity` is added to the user embedding; `None` is the
    /// deterministic inference mode.
    pub fn forward(
        &self,
        h_u: &[f64],
        h_v: &[f64],
        serendipity: Option<&[f64]>,
    ) -> Result<InteractionVector> {
        self.check_embeddings(h_u, h_v, serendipity)?;
        let out = self.forward_unchecked(h_u, h_v, serendipity);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite interaction prediction {out:?}"
            )));
        }
        Ok(InteractionVector(out))
    }

    pub(crate) fn forward_unchecked(
        &self,
        h_u: &[f64],
        h_v: &[f64],
        serendipity: Option<&[f64]>,
    ) -> Vec<f64> {
        // Two ping-pong buffers instead of a full trace.
        let d_h = self.d_h();
        let mut a = Vec::with_capacity(2 * d_h);
        match serendipity {
            Some(n) => a.extend(h_u.iter().zip(n).map(|(x, y)| x + y)),
            None => a.extend_from_slice(h_u),
        }
        a.extend_from_slice(h_v);
        let last = self.layers.len() - 1;
        let mut b = Vec::new();
        for (m, layer) in self.layers.iter().enumerate() {
            b.resize(layer.out_dim, 0.0);
            layer.apply_into(&a, &mut b);
            if m != last {
                for v in &mut b {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut a, &mut b);
        }
        a
    }

    /// `A . forward(h_u, h_v)` in inference mode.
    pub fn relevance(&self, h_u: &[f64], h_v: &[f64]) -> Result<RelevanceScore> {
        self.check_embeddings(h_u, h_v, None)?;
        let score = self.relevance_unchecked(h_u, h_v);
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite relevance {score}")));
        }
        Ok(score)
    }

    #[inline]
    pub(crate) fn relevance_unchecked(&self, h_u: &[f64], h_v: &[f64]) -> f64 {
        let z = self.forward_unchecked(h_u, h_v, None);
        dot(&self.attention, &z)
    }

    /// Draws a serendipity vector `N(0, sigma^2 I)`.
    pub fn sample_serendipity(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.d_h())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * self.serendipity_sigma
            })
            .collect()
    }

    /// Rounds every parameter into IEEE binary16 (nearest, ties to even).
    ///
    /// Fails if any magnitude exceeds the largest finite half-precision value.
    /// Applying it to an already-quantized model leaves the weights unchanged.
    pub fn quantize(&self) -> Result<MetricModel> {
        let limit = f16::MAX.to_f64();
        for (name, block) in self.blocks() {
            if let Some(&w) = block.iter().find(|w| !(w.abs() <= limit)) {
                return Err(Error::Overflow {
                    block: name,
                    value: w,
                });
            }
        }
        let mut q = self.clone();
        q.precision = Precision::Fp16;
        q.round_to_storage();
        Ok(q)
    }

    /// Encoded size of the model file in bytes.
    pub fn encoded_len(&self) -> usize {
        header_len(self.layers.len()) + self.param_count() * self.precision.bytes_per_weight()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(self.precision.tag());
        out.push(self.activation.tag());
        for d in [
            self.user_projector.in_dim,
            self.d_h(),
            self.z_dim(),
            self.layers.len(),
        ] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in &self.layers {
            out.extend_from_slice(&(l.out_dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.serendipity_sigma.to_le_bytes());
        for (_, block) in self.blocks() {
            for &w in block {
                match self.precision {
                    Precision::Fp32 => out.extend_from_slice(&(w as f32).to_le_bytes()),
                    Precision::Fp16 => out.extend_from_slice(&f16::from_f64(w).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(MODEL_MAGIC.len())?;
        if magic != MODEL_MAGIC {
            return Err(r.err("bad magic, not a model file"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                what: "model",
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let precision = Precision::from_tag(r.u8()?).ok_or_else(|| r.err("bad precision tag"))?;
        let activation =
            Activation::from_tag(r.u8()?).ok_or_else(|| r.err("bad activation tag"))?;
        let d_x = r.u32()? as usize;
        let d_h = r.u32()? as usize;
        let z_dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(r.err("implausible layer count"));
        }
        let mut outs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            outs.push(r.u32()? as usize);
        }
        if *outs.last().unwrap() != z_dim {
            return Err(r.err("final layer width does not match z_dim"));
        }
        let shape = ModelShape {
            d_x,
            d_h,
            hidden: outs[..n_layers - 1].to_vec(),
            z_dim,
            activation,
        };
        shape
            .validate()
            .map_err(|_| r.err("zero dimension in header"))?;
        let serendipity_sigma = r.f64()?;
        let mut model = MetricModel::zeros(&shape)?;
        model.serendipity_sigma = serendipity_sigma;
        model.precision = precision;
        for block in model.blocks_mut() {
            for w in block.iter_mut() {
                *w = match precision {
                    Precision::Fp32 => f32::from_le_bytes(r.array()?) as f64,
                    Precision::Fp16 => f16::from_le_bytes(r.array()?).to_f64(),
                };
            }
        }
        if r.remaining() != 0 {
            return Err(r.err("trailing bytes after weights"));
        }
        model.validate()?;
        Ok(model)
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

const MODEL_MAGIC: &[u8] = b"NANN-MODEL";
const MODEL_VERSION: u32 = 1;

fn header_len(n_layers: usize) -> usize {
    MODEL_MAGIC.len() + 4 + 1 + 1 + 4 * 4 + 4 * n_layers + 8
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn err(&self, message: &str) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(&format!(
                "truncated: need {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(squared_euclidean(a, b).sqrt())
}

/// Cosine similarity; defined as 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn shape() -> ModelShape {
        ModelShape::new(5, 4, vec![6, 5], 3)
    }

    // Naive matrix-vector product indexed by (row, col).
    fn naive_affine(w: &[f64], b: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = b[r];
            for c in 0..cols {
                acc += w[r * cols + c] * x[c];
            }
            y[r] = acc;
        }
        y
    }

    #[test]
    fn zero_projector_gives_zero_embedding() {
        let p = Projector::zeros(4, 3);
        assert_eq!(p.project(&[1.0, -2.0, 3.0, 4.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_projector_is_identity() {
        let mut p = Projector::zeros(3, 3);
        for i in 0..3 {
            p.weight[i * 3 + i] = 1.0;
        }
        let x = [0.25, -7.0, 3.5];
        assert_eq!(p.project(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn projector_matches_naive_product() {
        let mut r = rng(11);
        let p = Dense::random(4, 4, &mut r);
        let p = Projector {
            bias: (0..4).map(|i| 0.1 * i as f64).collect(),
            ..p
        };
        let x: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = p.project(&x).unwrap();
        let want = naive_affine(&p.weight, &p.bias, 4, 4, &x);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn projector_rejects_wrong_dim() {
        let p = Projector::zeros(4, 3);
        assert!(matches!(p.project(&[1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_model_predicts_zero() {
        let m = MetricModel::zeros(&shape()).unwrap();
        let z = m.forward(&[1.0; 4], &[2.0; 4], None).unwrap();
        assert_eq!(z.0, vec![0.0; 3]);
        assert_eq!(m.relevance(&[1.0; 4], &[-1.0; 4]).unwrap(), 0.0);
    }

    #[test]
    fn single_linear_layer_matches_hand_product() {
        let mut r = rng(3);
        let s = ModelShape::new(2, 3, vec![], 2);
        let mut m = MetricModel::random(&s, &mut r).unwrap();
        m.layers[0].bias = vec![0.5, -0.25];
        let hu = [0.3, -0.7, 1.1];
        let hv = [2.0, 0.1, -0.4];
        let cat: Vec<f64> = hu.iter().chain(&hv).copied().collect();
        let want = naive_affine(&m.layers[0].weight, &m.layers[0].bias, 2, 6, &cat);
        let got = m.forward(&hu, &hv, None).unwrap();
        for (g, w) in got.0.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12);
        }
    }

    #[test]
    fn serendipity_shifts_user_half_only() {
        let s = ModelShape::new(2, 2, vec![], 1);
        let mut m = MetricModel::zeros(&s).unwrap();
        m.layers[0].weight = vec![1.0, 10.0, 100.0, 1000.0];
        let z = m.forward(&[1.0, 1.0], &[1.0, 1.0], Some(&[0.5, -0.5])).unwrap();
        assert_eq!(z.0, vec![1.5 + 10.0 * 0.5 + 100.0 + 1000.0]);
    }

    #[test]
    fn inference_is_deterministic() {
        let m = MetricModel::random(&shape(), &mut rng(9)).unwrap();
        let a = m.forward(&[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0, -1.0, 0.5], None).unwrap();
        let b = m.forward(&[0.1, 0.2, 0.3, 0.4], &[1.0, 0.0, -1.0, 0.5], None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let m = MetricModel::random(&shape(), &mut rng(9)).unwrap();
        assert!(m.forward(&[0.0; 3], &[0.0; 4], None).is_err());
        assert!(m.forward(&[0.0; 4], &[0.0; 4], Some(&[0.0; 2])).is_err());
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let mut m = MetricModel::random(&shape(), &mut rng(1)).unwrap();
        m.layers[1].bias[0] = f64::INFINITY;
        assert!(matches!(
            m.forward(&[0.0; 4], &[0.0; 4], None),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(m.relevance(&[0.0; 4], &[0.0; 4]), Err(Error::Numeric(_))));
    }

    #[test]
    fn one_hot_attention_selects_component() {
        let mut m = MetricModel::random(&shape(), &mut rng(4)).unwrap();
        let hu = [0.5, -0.5, 0.25, 1.0];
        let hv = [-1.0, 0.3, 0.7, 0.0];
        let z = m.forward(&hu, &hv, None).unwrap();
        for t in 0..3 {
            m.attention = vec![0.0; 3];
            m.attention[t] = 1.0;
            assert_eq!(m.relevance(&hu, &hv).unwrap(), z.0[t]);
        }
    }

    #[test]
    fn relevance_matches_scalar_oracle() {
        let mut r = rng(21);
        let m = MetricModel::random(&shape(), &mut r).unwrap();
        for _ in 0..20 {
            let hu: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
            let hv: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
            // Oracle: layer-by-layer naive products with ReLU between layers.
            let mut x: Vec<f64> = hu.iter().chain(&hv).copied().collect();
            for (i, l) in m.layers.iter().enumerate() {
                x = naive_affine(&l.weight, &l.bias, l.out_dim, l.in_dim, &x);
                if i + 1 < m.layers.len() {
                    x.iter_mut().for_each(|v| *v = v.max(0.0));
                }
            }
            let mut want = 0.0;
            for t in 0..3 {
                want += m.attention[t] * x[t];
            }
            let got = m.relevance(&hu, &hv).unwrap();
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn attention_starts_uniform() {
        let m = MetricModel::random(&ModelShape::new(3, 3, vec![4], 4), &mut rng(0)).unwrap();
        assert_eq!(m.attention.iter().sum::<f64>(), 1.0);
        assert!(m.attention.iter().all(|&a| a == 0.25));
        // 1/5 is stored at single precision.
        let m = MetricModel::random(&ModelShape::new(3, 3, vec![4], 5), &mut rng(0)).unwrap();
        assert!((m.attention.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(m.attention.iter().all(|&a| a == m.attention[0]));
        let z = MetricModel::zeros(&ModelShape::new(3, 3, vec![4], 5)).unwrap();
        assert!((z.attention.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_linear_in_attention() {
        let mut m = MetricModel::random(&shape(), &mut rng(8)).unwrap();
        let hu = [0.1, 0.9, -0.3, 0.2];
        let hv = [0.4, -0.6, 0.0, 1.2];
        let a1 = vec![0.2, -0.5, 1.0];
        let a2 = vec![1.5, 0.25, -0.75];
        m.attention = a1.clone();
        let d1 = m.relevance(&hu, &hv).unwrap();
        m.attention = a2.clone();
        let d2 = m.relevance(&hu, &hv).unwrap();
        m.attention = a1.iter().zip(&a2).map(|(x, y)| 2.0 * x - 3.0 * y).collect();
        let d = m.relevance(&hu, &hv).unwrap();
        assert!((d - (2.0 * d1 - 3.0 * d2)).abs() < 1e-12);
    }

    #[test]
    fn distance_basics() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(euclidean_distance(&[1.5, -2.0], &[1.5, -2.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn quantize_exact_and_rounded_values() {
        let s = ModelShape::new(1, 1, vec![], 1);
        let mut m = MetricModel::zeros(&s).unwrap();
        m.layers[0].weight = vec![0.5, 1.0 / 3.0];
        let q = m.quantize().unwrap();
        assert_eq!(q.precision, Precision::Fp16);
        assert_eq!(q.layers[0].weight[0], 0.5);
        let third = 1.0 / 3.0;
        let err = (q.layers[0].weight[1] - third).abs();
        assert!(err > 0.0);
        assert!(err <= 2f64.powi(-12) * third * (1.0 + 1e-12), "err {err}");
    }

    #[test]
    fn quantize_is_idempotent() {
        let m = MetricModel::random(&shape(), &mut rng(5)).unwrap();
        let q1 = m.quantize().unwrap();
        let q2 = q1.quantize().unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn quantize_overflow_names_block() {
        let mut m = MetricModel::random(&shape(), &mut rng(5)).unwrap();
        m.layers[1].weight[2] = 1.0e5;
        match m.quantize() {
            Err(Error::Overflow { block, .. }) => assert_eq!(block, "layer1.weight"),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn model_bytes_round_trip_and_halve() {
        let mut m = MetricModel::random(&shape(), &mut rng(6)).unwrap();
        m.serendipity_sigma = 0.75;
        let bytes = m.to_bytes();
        assert_eq!(bytes.len(), m.encoded_len());
        assert_eq!(MetricModel::from_bytes(&bytes).unwrap(), m);

        let q = m.quantize().unwrap();
        let qb = q.to_bytes();
        assert_eq!(MetricModel::from_bytes(&qb).unwrap(), q);
        let half = bytes.len() as i64 / 2;
        assert!((qb.len() as i64 - half).abs() <= 64);
    }

    #[test]
    fn model_bytes_reject_corruption() {
        let m = MetricModel::random(&shape(), &mut rng(6)).unwrap();
        let bytes = m.to_bytes();
        assert!(matches!(
            MetricModel::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut bad = bytes.clone();
        bad[10] = 9;
        assert!(matches!(
            MetricModel::from_bytes(&bad),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(MetricModel::from_bytes(b"NOT-A-MODEL").is_err());
    }
}
