//! Joint training of the projectors and the relevance metric.
//!
//! The objective is a multi-behavior regression term (mean L2 norm of the
//! interaction-vector residual) plus a weighted rank-alignment term
//! `1 / (rho + 1 + eps)`, where `rho` is the Pearson correlation between the
//! metric's relevance values and the negated Euclidean embedding distances on
//! a random sample of user-item pairs. Gradients are derived by hand.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Dataset};
use crate::error::{Error, Result};
use crate::metric::{dot, Activation, Dense, ForwardTrace, MetricModel, ModelShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Pairs sampled per step for the rank-alignment term.
    pub n_l: usize,
    pub lambda_scl: f64,
    /// Unobserved pairs drawn per observed pair each epoch.
    pub negative_ratio: usize,
    pub epsilon_rho: f64,
    pub rng_seed: u64,
    pub optimizer: Optimizer,
    pub train_attention: bool,
    pub d_h: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Standard deviation of the serendipity noise during training; 0 disables it.
    pub serendipity_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 1e-3,
            n_l: 64,
            lambda_scl: 1.0,
            negative_ratio: 1,
            epsilon_rho: 1e-3,
            rng_seed: 0,
            optimizer: Optimizer::Adam,
            train_attention: false,
            d_h: 16,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            serendipity_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_l < 2 {
            return Err(Error::invalid("n_l must be at least 2"));
        }
        if !(self.epsilon_rho > 0.0) {
            return Err(Error::invalid("epsilon_rho must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lambda_scl >= 0.0) || !(self.serendipity_sigma >= 0.0) {
            return Err(Error::invalid("lambda_scl and serendipity_sigma must be nonnegative"));
        }
        Ok(())
    }
}

/// Raw feature rows addressed by user position and item id.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub users: Vec<Vec<f64>>,
    pub items: Vec<Vec<f64>>,
}

impl FeatureTable {
    pub fn from_dataset(ds: &Dataset) -> Self {
        FeatureTable {
            users: ds.users.iter().map(|u| u.raw_features.clone()).collect(),
            items: ds.items.iter().map(|i| i.raw_features.clone()).collect(),
        }
    }
}

/// A (user, item) pair with its target interaction vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub user: usize,
    pub item: usize,
    pub target: Vec<f64>,
}

/// Per-term loss values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prediction: f64,
    pub scl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub prediction: f64,
    pub scl: f64,
    pub total: f64,
}

/// Pearson correlation with the root-sum-of-squares normalisation.
pub fn pearson_correlation(xs: &[f64], ys: &[f64]) -> Result<f64> {
    Ok(PearsonParts::new(xs, ys)?.rho)
}

struct PearsonParts {
    a: Vec<f64>,
    b: Vec<f64>,
    sa: f64,
    sb: f64,
    rho: f64,
}

impl PearsonParts {
    fn new(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() != ys.len() {
            return Err(Error::invalid(format!(
                "correlation inputs differ in length: {} vs {}",
                xs.len(),
                ys.len()
            )));
        }
        if xs.len() < 2 {
            return Err(Error::invalid("correlation needs at least two values"));
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let a: Vec<f64> = xs.iter().map(|x| x - mx).collect();
        let b: Vec<f64> = ys.iter().map(|y| y - my).collect();
        let sa = dot(&a, &a).sqrt();
        let sb = dot(&b, &b).sqrt();
        if sa == 0.0 {
            return Err(Error::DegenerateVariance("first"));
        }
        if sb == 0.0 {
            return Err(Error::DegenerateVariance("second"));
        }
        let rho = (dot(&a, &b) / (sa * sb)).clamp(-1.0, 1.0);
        Ok(PearsonParts { a, b, sa, sb, rho })
    }

    fn d_rho_dx(&self, k: usize) -> f64 {
        self.b[k] / (self.sa * self.sb) - self.rho * self.a[k] / (self.sa * self.sa)
    }

    fn d_rho_dy(&self, k: usize) -> f64 {
        self.a[k] / (self.sa * self.sb) - self.rho * self.b[k] / (self.sb * self.sb)
    }
}

fn check_pairs(table: &FeatureTable, pairs: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    for (u, v) in pairs {
        if u >= table.users.len() || v >= table.items.len() {
            return Err(Error::invalid(format!("pair ({u}, {v}) out of range")));
        }
    }
    Ok(())
}

/// Relevance values and Euclidean distances over the same pairs.
pub fn relevance_and_distance(
    model: &MetricModel,
    table: &FeatureTable,
    pairs: &[(usize, usize)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pairs(table, pairs.iter().copied())?;
    let mut rel = Vec::with_capacity(pairs.len());
    let mut dist = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        let hu = model.project_user(&table.users[u])?;
        let hv = model.project_item(&table.items[v])?;
        rel.push(model.relevance(&hu, &hv)?);
        dist.push(crate::metric::euclidean_distance(&hu, &hv)?);
    }
    Ok((rel, dist))
}

/// Pearson correlation between relevance and negated embedding distance.
pub fn rank_alignment(
    model: &MetricModel,
    table: &FeatureTable,
    pairs: &[(usize, usize)],
) -> Result<f64> {
    let (rel, dist) = relevance_and_distance(model, table, pairs)?;
    let neg: Vec<f64> = dist.iter().map(|d| -d).collect();
    pearson_correlation(&rel, &neg)
}

/// `1 / (rho + 1 + epsilon_rho)` over the sampled pairs.
pub fn scl_loss(
    model: &MetricModel,
    table: &FeatureTable,
    pairs: &[(usize, usize)],
    epsilon_rho: f64,
) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::invalid("rank-alignment loss needs at least two pairs"));
    }
    let rho = rank_alignment(model, table, pairs)?;
    Ok(1.0 / (rho + 1.0 + epsilon_rho))
}

/// Mean over the batch of `||Z - Z_hat||_2`. `noise`, when given, holds one
/// serendipity vector per batch entry.
pub fn prediction_loss(
    model: &MetricModel,
    table: &FeatureTable,
    batch: &[LabeledPair],
    noise: Option<&[Vec<f64>]>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("prediction loss needs a nonempty batch"));
    }
    check_pairs(table, batch.iter().map(|p| (p.user, p.item)))?;
    let mut sum = 0.0;
    for (i, p) in batch.iter().enumerate() {
        if p.target.len() != model.z_dim() {
            return Err(Error::invalid(format!(
                "target has {} slots, model predicts {}",
                p.target.len(),
                model.z_dim()
            )));
        }
        let hu = model.project_user(&table.users[p.user])?;
        let hv = model.project_item(&table.items[p.item])?;
        let z = model.forward(&hu, &hv, noise.map(|n| n[i].as_slice()))?;
        sum += residual_norm(&p.target, &z.0);
    }
    Ok(sum / batch.len() as f64)
}

fn residual_norm(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        .sqrt()
}

/// `prediction + lambda_scl * scl`.
pub fn total_loss(
    model: &MetricModel,
    table: &FeatureTable,
    batch: &[LabeledPair],
    noise: Option<&[Vec<f64>]>,
    scl_pairs: &[(usize, usize)],
    lambda_scl: f64,
    epsilon_rho: f64,
) -> Result<LossBreakdown> {
    let prediction = prediction_loss(model, table, batch, noise)?;
    let scl = if lambda_scl == 0.0 {
        0.0
    } else {
        scl_loss(model, table, scl_pairs, epsilon_rho)?
    };
    Ok(LossBreakdown {
        prediction,
        scl,
        total: prediction + lambda_scl * scl,
    })
}

/// Accumulates layer gradients for one trace given `dL/d(output)` and returns
/// `dL/d(input of layer 0)`.
fn backprop_layers(
    model: &MetricModel,
    trace: &ForwardTrace,
    grad_out: &[f64],
    grads: &mut [Dense],
) -> Vec<f64> {
    let mut g = grad_out.to_vec();
    for m in (0..model.layers.len()).rev() {
        let layer = &model.layers[m];
        let input = &trace.inputs[m];
        let gl = &mut grads[m];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            gl.bias[r] += gr;
            let row = &mut gl.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (w, x) in row.iter_mut().zip(input) {
                *w += gr * x;
            }
        }
        let mut g_in = vec![0.0; layer.in_dim];
        for (r, &gr) in g.iter().enumerate() {
            if gr == 0.0 {
                continue;
            }
            let row = &layer.weight[r * layer.in_dim..(r + 1) * layer.in_dim];
            for (gi, w) in g_in.iter_mut().zip(row) {
                *gi += gr * w;
            }
        }
        if m > 0 {
            for (gi, &pre) in g_in.iter_mut().zip(&trace.pre[m - 1]) {
                *gi *= model.activation.derivative(pre);
            }
        }
        g = g_in;
    }
    g
}

fn accumulate_projector(grad: &mut Dense, g: &[f64], x: &[f64]) {
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        grad.bias[r] += gr;
        for (w, xi) in grad.weight[r * grad.in_dim..(r + 1) * grad.in_dim]
            .iter_mut()
            .zip(x)
        {
            *w += gr * xi;
        }
    }
}

/// Objective value and its gradient with respect to every parameter
/// (projectors, layers and attention), returned as a model-shaped tensor.
pub fn loss_and_gradient(
    model: &MetricModel,
    table: &FeatureTable,
    batch: &[LabeledPair],
    noise: Option<&[Vec<f64>]>,
    scl_pairs: &[(usize, usize)],
    lambda_scl: f64,
    epsilon_rho: f64,
) -> Result<(LossBreakdown, MetricModel)> {
    if batch.is_empty() {
        return Err(Error::invalid("prediction loss needs a nonempty batch"));
    }
    check_pairs(table, batch.iter().map(|p| (p.user, p.item)))?;
    check_pairs(table, scl_pairs.iter().copied())?;
    let d_h = model.d_h();
    let mut grad = model.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;

    let mut prediction = 0.0;
    for (i, p) in batch.iter().enumerate() {
        if p.target.len() != model.z_dim() {
            return Err(Error::invalid("target length does not match z_dim"));
        }
        let xu = &table.users[p.user];
        let xv = &table.items[p.item];
        let hu = model.project_user(xu)?;
        let hv = model.project_item(xv)?;
        let trace = model.trace(&hu, &hv, noise.map(|n| n[i].as_slice()));
        let out = trace.output();
        let norm = residual_norm(&p.target, out);
        prediction += norm * inv_b;
        if norm == 0.0 {
            continue;
        }
        let g_out: Vec<f64> = out
            .iter()
            .zip(&p.target)
            .map(|(o, t)| (o - t) / norm * inv_b)
            .collect();
        let g_in = backprop_layers(model, &trace, &g_out, &mut grad.layers);
        accumulate_projector(&mut grad.user_projector, &g_in[..d_h], xu);
        accumulate_projector(&mut grad.item_projector, &g_in[d_h..], xv);
    }

    let mut scl = 0.0;
    if lambda_scl != 0.0 {
        if scl_pairs.len() < 2 {
            return Err(Error::invalid("rank-alignment loss needs at least two pairs"));
        }
        let mut traces = Vec::with_capacity(scl_pairs.len());
        let mut rel = Vec::with_capacity(scl_pairs.len());
        let mut neg_dist = Vec::with_capacity(scl_pairs.len());
        for &(u, v) in scl_pairs {
            let hu = model.project_user(&table.users[u])?;
            let hv = model.project_item(&table.items[v])?;
            let trace = model.trace(&hu, &hv, None);
            rel.push(dot(&model.attention, trace.output()));
            let dist = crate::metric::squared_euclidean(&hu, &hv).sqrt();
            neg_dist.push(-dist);
            traces.push((trace, hu, hv, dist));
        }
        let parts = PearsonParts::new(&rel, &neg_dist)?;
        let denom = parts.rho + 1.0 + epsilon_rho;
        scl = 1.0 / denom;
        let dl_drho = -lambda_scl / (denom * denom);
        for (k, (trace, hu, hv, dist)) in traces.iter().enumerate() {
            let (u, v) = scl_pairs[k];
            let g_rel = dl_drho * parts.d_rho_dx(k);
            // y = -dist, so dL/d(dist) = -dL/dy.
            let g_dist = -dl_drho * parts.d_rho_dy(k);
            for (ga, z) in grad.attention.iter_mut().zip(trace.output()) {
                *ga += g_rel * z;
            }
            let g_out: Vec<f64> = model.attention.iter().map(|a| a * g_rel).collect();
            let mut g_in = backprop_layers(model, trace, &g_out, &mut grad.layers);
            if *dist > 0.0 {
                for j in 0..d_h {
                    let dd = (hu[j] - hv[j]) / dist * g_dist;
                    g_in[j] += dd;
                    g_in[d_h + j] -= dd;
                }
            }
            accumulate_projector(&mut grad.user_projector, &g_in[..d_h], &table.users[u]);
            accumulate_projector(&mut grad.item_projector, &g_in[d_h..], &table.items[v]);
        }
    }

    let breakdown = LossBreakdown {
        prediction,
        scl,
        total: prediction + lambda_scl * scl,
    };
    Ok((breakdown, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: Optimizer,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: Optimizer, n: usize) -> Self {
        let moments = match kind {
            Optimizer::Adam => n,
            Optimizer::Sgd => 0,
        };
        OptimizerState {
            kind,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    params[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: MetricModel,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    /// Steps whose rank-alignment sample was degenerate twice and fell back to
    /// the prediction term alone.
    pub skipped_scl_steps: usize,
}

impl TrainState {
    /// Mean total loss over the first and last `window` steps.
    pub fn smoothed_total(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }

    /// The trained model with weights rounded to single-precision storage.
    pub fn export_model(&self) -> MetricModel {
        let mut m = self.model.clone();
        m.round_to_storage();
        m
    }
}

fn sample_pairs(rng: &mut ChaCha8Rng, n_users: usize, n_items: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| (rng.random_range(0..n_users), rng.random_range(0..n_items)))
        .collect()
}

/// Uniform random user-item pairs, for held-out alignment measurements.
pub fn sample_uniform_pairs(seed: u64, n_users: usize, n_items: usize, n: usize) -> Vec<(usize, usize)> {
    let mut rng = stream_rng(seed, 0x5ca1_ab1e);
    sample_pairs(&mut rng, n_users, n_items, n)
}

/// Trains projectors and metric on observed interactions plus sampled
/// unobserved pairs (target zero).
pub fn fit(ds: &Dataset, config: &TrainConfig) -> Result<TrainState> {
    config.validate()?;
    if ds.users.is_empty() || ds.items.is_empty() || ds.interactions.is_empty() {
        return Err(Error::invalid("training needs users, items and interactions"));
    }
    let table = FeatureTable::from_dataset(ds);
    let n_users = table.users.len();
    let n_items = table.items.len();
    let observed: Vec<LabeledPair> = ds
        .interaction_vectors()
        .into_iter()
        .map(|((u, v), z)| LabeledPair {
            user: u,
            item: v as usize,
            target: z.0,
        })
        .collect();
    let observed_set: HashSet<(usize, usize)> = observed.iter().map(|p| (p.user, p.item)).collect();
    let can_sample_negatives = observed_set.len() < n_users * n_items;

    let mut init_rng = stream_rng(config.rng_seed, 1);
    let shape = ModelShape {
        d_x: ds.feature_dim(),
        d_h: config.d_h,
        hidden: config.hidden.clone(),
        z_dim: ds.z_dim,
        activation: config.activation,
    };
    let mut model = MetricModel::random(&shape, &mut init_rng)?;
    model.serendipity_sigma = config.serendipity_sigma;
    let n_params = model.param_count();
    let attention_range = n_params - model.z_dim()..n_params;

    let mut state = TrainState {
        optimizer: OptimizerState::new(config.optimizer, n_params),
        model,
        epoch: 0,
        history: Vec::new(),
        skipped_scl_steps: 0,
    };
    let mut rng = stream_rng(config.rng_seed, 2);
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut examples = observed.clone();
        if can_sample_negatives {
            for _ in 0..observed.len() * config.negative_ratio {
                let (u, v) = loop {
                    let pair = (rng.random_range(0..n_users), rng.random_range(0..n_items));
                    if !observed_set.contains(&pair) {
                        break pair;
                    }
                };
                examples.push(LabeledPair {
                    user: u,
                    item: v,
                    target: vec![0.0; ds.z_dim],
                });
            }
        }
        examples.shuffle(&mut rng);

        for batch in examples.chunks(config.batch_size) {
            let noise: Option<Vec<Vec<f64>>> = (config.serendipity_sigma > 0.0).then(|| {
                batch
                    .iter()
                    .map(|_| state.model.sample_serendipity(&mut rng))
                    .collect()
            });
            let mut scl_pairs = sample_pairs(&mut rng, n_users, n_items, config.n_l);
            let mut lambda = config.lambda_scl;
            let attempt = |pairs: &[(usize, usize)], lambda: f64, model: &MetricModel| {
                loss_and_gradient(
                    model,
                    &table,
                    batch,
                    noise.as_deref(),
                    pairs,
                    lambda,
                    config.epsilon_rho,
                )
            };
            let result = match attempt(&scl_pairs, lambda, &state.model) {
                Err(Error::DegenerateVariance(_)) => {
                    scl_pairs = sample_pairs(&mut rng, n_users, n_items, config.n_l);
                    match attempt(&scl_pairs, lambda, &state.model) {
                        Err(Error::DegenerateVariance(_)) => {
                            state.skipped_scl_steps += 1;
                            lambda = 0.0;
                            attempt(&scl_pairs, lambda, &state.model)
                        }
                        other => other,
                    }
                }
                other => other,
            };
            let (loss, grad) = result?;
            let mut grad_flat = grad.to_flat();
            if !config.train_attention {
                grad_flat[attention_range.clone()].fill(0.0);
            }
            if !loss.total.is_finite() || grad_flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    message: format!("non-finite loss or gradient: {loss:?}"),
                    last_state: Box::new(state),
                });
            }
            let mut params = state.model.to_flat();
            let before = params.clone();
            state
                .optimizer
                .apply(&mut params, &grad_flat, config.learning_rate);
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    message: "parameter update produced non-finite values".into(),
                    last_state: Box::new(state),
                });
            }
            if params != before {
                state.model.set_flat(&params)?;
            }
            state.history.push(LossRecord {
                step,
                epoch,
                prediction: loss.prediction,
                scl: loss.scl,
                total: loss.total,
            });
            step += 1;
        }
        state.epoch = epoch + 1;
    }
    Ok(state)
}

/// Writes the loss history as tab-separated `step pred_loss scl_loss total`.
pub fn write_loss_log(history: &[LossRecord], out: &mut impl std::io::Write) -> std::io::Result<()> {
    writeln!(out, "step\tpred_loss\tscl_loss\ttotal")?;
    for r in history {
        writeln!(out, "{}\t{}\t{}\t{}", r.step, r.prediction, r.scl, r.total)?;
    }
    Ok(())
}
