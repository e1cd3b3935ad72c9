//! Mini-batch Adam training for PRR models and factored-softmax policies.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{accumulate_gradient, GradientBuffer};
use crate::numeric::{dot, log_sum_exp, stream_rng, Matrix, SimRng};
use crate::policy::{factored_propensity, topk_multiplier, PropensityMode, SoftmaxPolicyParams};
use crate::types::{LogRecord, ModelDims, ModelParams, Variant};
use crate::{Error, Result};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Importance-weight clipping threshold for policy objectives.
    pub clip_m: Option<f64>,
    pub propensity_mode: PropensityMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epochs: 100,
            batch_size: 516,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            clip_m: Some(100.0),
            propensity_mode: PropensityMode::PlainProduct,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        if let Some(m) = self.clip_m {
            if !(m > 0.0) {
                return Err(Error::Config(format!("clip_m must be > 0, got {m}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
///
/// Parameters are organized in named blocks. Blocks updated through
/// [`Adam::update_rows`] only advance the moments of the rows present in the
/// step (lazy Adam), so a step costs time proportional to the rows touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    names: Vec<&'static str>,
    /// `(m, v)` per coordinate, interleaved so a row update walks one
    /// contiguous region.
    moments: Vec<Vec<[f64; 2]>>,
}

/// Zeroed moments with every page written up front, so the first epoch does
/// not pay for faulting them in.
fn written_zeros(len: usize) -> Vec<[f64; 2]> {
    let mut v = Vec::with_capacity(len);
    v.extend((0..len).map(|_| std::hint::black_box([0.0; 2])));
    v
}

impl Adam {
    pub fn new(config: &TrainConfig, blocks: &[(&'static str, usize)]) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            names: blocks.iter().map(|(n, _)| *n).collect(),
            moments: blocks.iter().map(|(_, len)| written_zeros(*len)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Starts a new optimizer step; call once before the block updates.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn check(&self, block: usize, grads: &[f64], offset: usize) -> Result<()> {
        match grads.iter().position(|g| !g.is_finite()) {
            Some(i) => Err(Error::NonFiniteGradient {
                path: format!("{}[{}]", self.names[block], offset + i),
            }),
            None => Ok(()),
        }
    }

    fn corrections(&self) -> (f64, f64) {
        let t = self.step.max(1) as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }

    fn apply(&mut self, block: usize, params: &mut [f64], moments_at: usize, grads: &[f64]) {
        let (c1, c2) = self.corrections();
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let moments = &mut self.moments[block][moments_at..moments_at + grads.len()];
        for ((p, mv), &g) in params.iter_mut().zip(moments).zip(grads) {
            mv[0] = b1 * mv[0] + (1.0 - b1) * g;
            mv[1] = b2 * mv[1] + (1.0 - b2) * g * g;
            *p -= lr * (mv[0] / c1) / ((mv[1] / c2).sqrt() + eps);
        }
    }

    /// Descends along `grads` for a whole block.
    pub fn update_dense(&mut self, block: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.check(block, grads, 0)?;
        self.apply(block, params, 0, grads);
        Ok(())
    }

    /// Descends along the listed rows of a row-major block; `grads` holds the
    /// gradients of `rows`, concatenated in the same order.
    pub fn update_rows(
        &mut self,
        block: usize,
        params: &mut [f64],
        rows: &[usize],
        grads: &[f64],
        row_len: usize,
    ) -> Result<()> {
        if grads.len() != rows.len() * row_len {
            return Err(Error::DimensionMismatch {
                what: "row gradients",
                expected: rows.len() * row_len,
                got: grads.len(),
            });
        }
        for (&r, g) in rows.iter().zip(grads.chunks(row_len)) {
            self.check(block, g, r * row_len)?;
        }
        for (&r, g) in rows.iter().zip(grads.chunks(row_len)) {
            let at = r * row_len;
            self.apply(block, &mut params[at..at + row_len], at, g);
        }
        Ok(())
    }
}

/// One Adam step over a single dense block.
pub fn adam_step(adam: &mut Adam, params: &mut [f64], grads: &[f64]) -> Result<()> {
    adam.begin_step();
    adam.update_dense(0, params, grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub trace: Vec<EpochStats>,
    /// Records actually used (after rank-only filtering).
    pub num_records: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub params: SoftmaxPolicyParams,
    pub trace: Vec<EpochStats>,
    pub num_records: usize,
}

fn init_normal(rng: &mut SimRng, xs: &mut [f64]) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    xs.iter_mut().for_each(|x| *x = dist.sample(rng));
}

/// Small random initialization: embeddings `N(0, 0.01²)`, biases zero.
pub fn init_model(dims: ModelDims, variant: Variant, seed: u64) -> ModelParams {
    let mut rng = stream_rng(seed, INIT_STREAM);
    let mut p = ModelParams::zeros(dims, variant);
    if matches!(variant, Variant::Full | Variant::RewardOnly) {
        init_normal(&mut rng, &mut p.engagement);
    }
    init_normal(&mut rng, &mut p.interest_map.data);
    init_normal(&mut rng, &mut p.item_embeddings.data);
    p
}

pub fn init_policy(num_items: usize, embedding_dim: usize, interest_dim: usize, seed: u64) -> SoftmaxPolicyParams {
    let mut rng = stream_rng(seed, INIT_STREAM);
    let mut p = SoftmaxPolicyParams::zeros(num_items, embedding_dim, interest_dim);
    init_normal(&mut rng, &mut p.interest_map.data);
    init_normal(&mut rng, &mut p.item_embeddings.data);
    p
}

fn check_records(dims: &ModelDims, logs: &[LogRecord]) -> Result<()> {
    for (i, r) in logs.iter().enumerate() {
        dims.check_context(&r.context)
            .and_then(|_| r.validate())
            .map_err(|e| Error::Data(format!("record {i}: {e}")))?;
        if let Some(&a) = r.slate.items().iter().find(|&&a| a >= dims.num_items) {
            return Err(Error::Data(format!("record {i}: item {a} outside catalog of {}", dims.num_items)));
        }
    }
    Ok(())
}

/// Fits a PRR variant by maximum likelihood.
pub fn train_prr(logs: &[LogRecord], dims: ModelDims, variant: Variant, config: &TrainConfig) -> Result<TrainedModel> {
    train_prr_with(logs, dims, variant, config, &mut |_, _| Ok(()))
}

/// [`train_prr`] with a callback after every epoch.
pub fn train_prr_with(
    logs: &[LogRecord],
    dims: ModelDims,
    variant: Variant,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &ModelParams) -> Result<()>,
) -> Result<TrainedModel> {
    config.validate()?;
    let data: Vec<&LogRecord> = match variant {
        Variant::RankOnly => logs.iter().filter(|r| r.feedback.is_success()).collect(),
        _ => logs.iter().collect(),
    };
    if data.is_empty() {
        return Err(match variant {
            Variant::RankOnly => Error::Data("rank-only training needs at least one successful record".into()),
            _ => Error::Data("no training records".into()),
        });
    }
    check_records(&dims, logs)?;

    let mut params = init_model(dims, variant, config.seed);
    let mut buf = GradientBuffer::new(&params);
    let mut adam = Adam::new(
        config,
        &[
            ("engagement", params.engagement.len()),
            ("interest_map", params.interest_map.data.len()),
            ("item_embeddings", params.item_embeddings.data.len()),
            ("position_mult", params.position_mult.len()),
            ("position_add", params.position_add.len()),
            ("bias_scalar", 1),
        ],
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut trace = Vec::with_capacity(config.epochs);
    let d = dims.embedding_dim;

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total_ll = 0.0;
        for batch in order.chunks(config.batch_size) {
            buf.reset();
            // negated so that Adam descends the mean negative log-likelihood
            let scale = -1.0 / batch.len() as f64;
            for &i in batch {
                total_ll += accumulate_gradient(&params, data[i], scale, &mut buf)?;
            }
            adam.begin_step();
            adam.update_dense(0, &mut params.engagement, &buf.engagement)?;
            adam.update_dense(1, &mut params.interest_map.data, &buf.interest_map.data)?;
            adam.update_rows(2, &mut params.item_embeddings.data, buf.touched_rows(), buf.touched_gradients(), d)?;
            adam.update_dense(3, &mut params.position_mult, &buf.position_mult)?;
            adam.update_dense(4, &mut params.position_add, &buf.position_add)?;
            adam.update_dense(5, std::slice::from_mut(&mut params.bias_scalar), &[buf.bias_scalar])?;
        }
        let loss = -total_ll / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&stats, &params)?;
        trace.push(stats);
    }
    Ok(TrainedModel {
        params,
        trace,
        num_records: data.len(),
    })
}

/// Off-policy objective maximized by [`train_policy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyObjective {
    Ips,
    Iips,
    TopKIips,
}

impl PolicyObjective {
    pub fn name(self) -> &'static str {
        match self {
            PolicyObjective::Ips => "ips",
            PolicyObjective::Iips => "iips",
            PolicyObjective::TopKIips => "topk-iips",
        }
    }
}

/// Shape of a softmax policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDims {
    pub num_items: usize,
    pub embedding_dim: usize,
    pub interest_dim: usize,
}

/// Reusable per-record buffers for policy gradients.
struct PolicyScratch {
    logits: Vec<f64>,
    user: Vec<f64>,
    user_grad: Vec<f64>,
    mean_item: Vec<f64>,
}

/// Adds `scale · ∇ term(record)` into the gradient buffers and returns the
/// record's estimator term. Records with no reward are skipped without
/// touching the softmax.
fn accumulate_policy_gradient(
    params: &SoftmaxPolicyParams,
    record: &LogRecord,
    objective: PolicyObjective,
    config: &TrainConfig,
    scale: f64,
    grad_map: &mut Matrix,
    grad_items: &mut Matrix,
    scratch: &mut PolicyScratch,
) -> Result<f64> {
    let Some(clicked) = record.feedback.clicked_position() else {
        return Ok(0.0);
    };
    let items = record.slate.items();
    let k = items.len();
    let z = &record.context.z;

    // p(· | z) over the catalog
    for (r, u) in scratch.user.iter_mut().enumerate() {
        *u = dot(params.interest_map.row(r), z);
    }
    for (a, l) in scratch.logits.iter_mut().enumerate() {
        *l = dot(&scratch.user, params.item_embeddings.row(a));
    }
    let lse = log_sum_exp(&scratch.logits);
    let prob = |logit: f64| (logit - lse).exp();

    let clip = config.clip_m.unwrap_or(f64::INFINITY);
    // (weight on ∇ log p(s_ℓ)) per slate position
    let mut coef = vec![0.0; k];
    let term = match objective {
        PolicyObjective::Ips => {
            let probs: Vec<f64> = items.iter().map(|&a| prob(scratch.logits[a])).collect();
            let (pi, shares) = match config.propensity_mode {
                PropensityMode::PlainProduct => {
                    let log_pi: f64 = items.iter().map(|&a| scratch.logits[a] - lse).sum();
                    (log_pi.exp(), vec![1.0; k])
                }
                PropensityMode::Renormalized => {
                    let local: Vec<usize> = (0..k).collect();
                    let pi = factored_propensity(&probs, &local, PropensityMode::Renormalized);
                    // log π = Σℓ log p(sℓ) − log(1 − S_ℓ), S_ℓ = Σ_{j<ℓ} p(s_j), so the
                    // weight on ∇ log p(s_j) is 1 + p(s_j) Σ_{ℓ>j} 1/(1 − S_ℓ)
                    let mut used = 0.0;
                    let mut inv_rest = vec![0.0; k];
                    for l in 0..k {
                        inv_rest[l] = if l == 0 { 0.0 } else { 1.0 / (1.0 - used) };
                        used += probs[l];
                    }
                    let mut tail = 0.0;
                    let mut shares = vec![0.0; k];
                    for j in (0..k).rev() {
                        shares[j] = 1.0 + probs[j] * tail;
                        tail += inv_rest[j];
                    }
                    (pi, shares)
                }
            };
            let w = pi / record.slate_propensity;
            if w < clip {
                for (c, s) in coef.iter_mut().zip(&shares) {
                    *c = w * s;
                }
                w
            } else {
                clip
            }
        }
        PolicyObjective::Iips | PolicyObjective::TopKIips => {
            let a = items[clicked];
            let p = prob(scratch.logits[a]);
            let w = p / record.marginal_propensities[clicked];
            if w < clip {
                coef[clicked] = match objective {
                    PolicyObjective::TopKIips => w * topk_multiplier(p, k),
                    _ => w,
                };
                w
            } else {
                clip
            }
        }
    };
    let total: f64 = coef.iter().sum();
    if total == 0.0 {
        return Ok(term);
    }
    // ∂/∂logit_b = Σℓ coefℓ (δ_{b,sℓ} − p_b)
    scratch.user_grad.iter_mut().for_each(|x| *x = 0.0);
    scratch.mean_item.iter_mut().for_each(|x| *x = 0.0);
    for b in 0..scratch.logits.len() {
        let p = prob(scratch.logits[b]);
        crate::numeric::axpy(p, params.item_embeddings.row(b), &mut scratch.mean_item);
        crate::numeric::axpy(-scale * total * p, &scratch.user, grad_items.row_mut(b));
    }
    for (pos, &a) in items.iter().enumerate() {
        if coef[pos] != 0.0 {
            crate::numeric::axpy(scale * coef[pos], &scratch.user, grad_items.row_mut(a));
            crate::numeric::axpy(coef[pos], params.item_embeddings.row(a), &mut scratch.user_grad);
        }
    }
    crate::numeric::axpy(-total, &scratch.mean_item, &mut scratch.user_grad);
    grad_map.add_outer(scale, &scratch.user_grad, z);
    Ok(term)
}

/// Learns a factored softmax policy by gradient ascent on an IPS-family
/// estimator, with the logged propensities held fixed.
pub fn train_policy(
    logs: &[LogRecord],
    dims: PolicyDims,
    objective: PolicyObjective,
    config: &TrainConfig,
) -> Result<TrainedPolicy> {
    train_policy_with(logs, dims, objective, config, &mut |_, _| Ok(()))
}

pub fn train_policy_with(
    logs: &[LogRecord],
    dims: PolicyDims,
    objective: PolicyObjective,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats, &SoftmaxPolicyParams) -> Result<()>,
) -> Result<TrainedPolicy> {
    config.validate()?;
    if logs.is_empty() {
        return Err(Error::Data("no training records".into()));
    }
    for (i, r) in logs.iter().enumerate() {
        r.validate().map_err(|e| match e {
            Error::SupportViolation(m) => Error::SupportViolation(format!("record {i}: {m}")),
            other => Error::Data(format!("record {i}: {other}")),
        })?;
        if r.context.z.len() != dims.interest_dim {
            return Err(Error::Data(format!("record {i}: interest features have length {}", r.context.z.len())));
        }
        if let Some(&a) = r.slate.items().iter().find(|&&a| a >= dims.num_items) {
            return Err(Error::Data(format!("record {i}: item {a} outside catalog of {}", dims.num_items)));
        }
    }

    let mut params = init_policy(dims.num_items, dims.embedding_dim, dims.interest_dim, config.seed);
    let mut grad_map = Matrix::zeros(dims.embedding_dim, dims.interest_dim);
    let mut grad_items = Matrix::zeros(dims.num_items, dims.embedding_dim);
    let mut scratch = PolicyScratch {
        logits: vec![0.0; dims.num_items],
        user: vec![0.0; dims.embedding_dim],
        user_grad: vec![0.0; dims.embedding_dim],
        mean_item: vec![0.0; dims.embedding_dim],
    };
    let mut adam = Adam::new(
        config,
        &[
            ("interest_map", grad_map.data.len()),
            ("item_embeddings", grad_items.data.len()),
        ],
    );
    let mut order: Vec<usize> = (0..logs.len()).collect();
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            grad_map.data.iter_mut().for_each(|x| *x = 0.0);
            grad_items.data.iter_mut().for_each(|x| *x = 0.0);
            // ascent on the estimator = descent on its negation
            let scale = -1.0 / batch.len() as f64;
            for &i in batch {
                total += accumulate_policy_gradient(
                    &params,
                    &logs[i],
                    objective,
                    config,
                    scale,
                    &mut grad_map,
                    &mut grad_items,
                    &mut scratch,
                )?;
            }
            adam.begin_step();
            adam.update_dense(0, &mut params.interest_map.data, &grad_map.data)?;
            adam.update_dense(1, &mut params.item_embeddings.data, &grad_items.data)?;
        }
        let loss = -total / logs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("policy objective at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&stats, &params)?;
        trace.push(stats);
    }
    Ok(TrainedPolicy {
        params,
        trace,
        num_records: logs.len(),
    })
}
