//! Slate policies and IPS-family estimators.
//!
//! Logging policies are the two non-personalized samplers (uniform and
//! popularity-weighted, both without replacement). Learning policies are
//! factored softmaxes `p(a | z) ∝ exp(f_Ξ(z)ᵀβ_a)` whose slate probability
//! is the plain product `Πℓ p(sℓ | z)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{dot, softmax_in_place, Matrix};
use crate::types::{LogRecord, Slate};
use crate::{Error, Result};

/// Parameters of a factored softmax policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicyParams {
    /// `Ξ`, `d × d_z`; `f_Ξ(z) = Ξz`.
    pub interest_map: Matrix,
    /// `β`, `P × d`.
    pub item_embeddings: Matrix,
}

impl SoftmaxPolicyParams {
    pub fn zeros(num_items: usize, embedding_dim: usize, interest_dim: usize) -> Self {
        Self {
            interest_map: Matrix::zeros(embedding_dim, interest_dim),
            item_embeddings: Matrix::zeros(num_items, embedding_dim),
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows
    }

    pub fn validate(&self) -> Result<()> {
        if self.interest_map.rows != self.item_embeddings.cols {
            return Err(Error::DimensionMismatch {
                what: "policy interest map rows",
                expected: self.item_embeddings.cols,
                got: self.interest_map.rows,
            });
        }
        if !self.interest_map.is_finite() || !self.item_embeddings.is_finite() {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(())
    }

    /// `f_Ξ(z)`
    pub fn user_embedding(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.interest_map.mul_vec(z)
    }

    /// Logits `f_Ξ(z)ᵀβ_a` for every item.
    pub fn logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        let user = self.user_embedding(z)?;
        Ok(self.logits_for(&user))
    }

    pub(crate) fn logits_for(&self, user: &[f64]) -> Vec<f64> {
        (0..self.item_embeddings.rows)
            .map(|a| dot(user, self.item_embeddings.row(a)))
            .collect()
    }
}

/// `p_{Ξ,β}(· | z)` over the whole catalog.
pub fn softmax_item_probs(params: &SoftmaxPolicyParams, z: &[f64]) -> Result<Vec<f64>> {
    let mut p = params.logits(z)?;
    softmax_in_place(&mut p)?;
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Uniform,
    TopKPop,
    FactoredSoftmax,
    TopKSoftmax,
}

/// How the slate probability of a factored softmax is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityMode {
    /// `Πℓ p(sℓ | z)`
    #[default]
    PlainProduct,
    /// `Πℓ p(sℓ | z) / (1 − Σ_{j<ℓ} p(s_j | z))`, the without-replacement law.
    Renormalized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub num_items: usize,
    pub params: Option<SoftmaxPolicyParams>,
    pub popularity_weights: Option<Vec<f64>>,
}

impl PolicySpec {
    pub fn uniform(num_items: usize) -> Self {
        Self {
            kind: PolicyKind::Uniform,
            num_items,
            params: None,
            popularity_weights: None,
        }
    }

    pub fn top_k_pop(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Config(format!("popularity weight {w} is not a finite non-negative number")));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::ZeroWeights);
        }
        Ok(Self {
            kind: PolicyKind::TopKPop,
            num_items: weights.len(),
            params: None,
            popularity_weights: Some(weights),
        })
    }

    pub fn factored_softmax(params: SoftmaxPolicyParams) -> Self {
        Self {
            kind: PolicyKind::FactoredSoftmax,
            num_items: params.num_items(),
            params: Some(params),
            popularity_weights: None,
        }
    }

    pub fn top_k_softmax(params: SoftmaxPolicyParams) -> Self {
        Self {
            kind: PolicyKind::TopKSoftmax,
            ..Self::factored_softmax(params)
        }
    }

    fn softmax_params(&self) -> Result<&SoftmaxPolicyParams> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{:?} policy needs softmax parameters", self.kind)))
    }

    fn weights(&self) -> Result<&[f64]> {
        self.popularity_weights
            .as_deref()
            .ok_or_else(|| Error::Config("top-K pop policy needs popularity weights".into()))
    }

    /// Per-item marginal probabilities `π(a, ℓ | z)`, identical for every position.
    ///
    /// Exact for uniform and softmax policies; the popularity policy uses the
    /// first-draw probability `w_a / Σ w` as its approximation.
    pub fn item_marginals(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            PolicyKind::Uniform => Ok(vec![1.0 / self.num_items as f64; self.num_items]),
            PolicyKind::TopKPop => {
                let w = self.weights()?;
                let total: f64 = w.iter().sum();
                Ok(w.iter().map(|x| x / total).collect())
            }
            PolicyKind::FactoredSoftmax | PolicyKind::TopKSoftmax => softmax_item_probs(self.softmax_params()?, z),
        }
    }

    /// `π(s | z)`.
    pub fn slate_propensity(&self, z: &[f64], slate: &Slate, mode: PropensityMode) -> Result<f64> {
        check_items(slate.items(), self.num_items)?;
        match self.kind {
            PolicyKind::Uniform => Ok(uniform_slate_propensity(self.num_items, slate.len())),
            PolicyKind::TopKPop => sequential_propensity(self.weights()?, slate.items()),
            PolicyKind::FactoredSoftmax | PolicyKind::TopKSoftmax => {
                let p = softmax_item_probs(self.softmax_params()?, z)?;
                Ok(factored_propensity(&p, slate.items(), mode))
            }
        }
    }
}

fn check_items(items: &[usize], num_items: usize) -> Result<()> {
    match items.iter().find(|&&a| a >= num_items) {
        Some(&a) => Err(Error::IndexOutOfRange {
            what: "item",
            index: a,
            limit: num_items,
        }),
        None => Ok(()),
    }
}

/// `1 / (P (P−1) ⋯ (P−K+1))`
pub fn uniform_slate_propensity(num_items: usize, k: usize) -> f64 {
    (0..k).map(|j| 1.0 / (num_items - j) as f64).product()
}

/// Probability of drawing `items` in order, without replacement, with
/// probability proportional to `weights`.
fn sequential_propensity(weights: &[f64], items: &[usize]) -> Result<f64> {
    let mut remaining: f64 = weights.iter().sum();
    let mut prob = 1.0;
    for &a in items {
        prob *= weights[a] / remaining;
        remaining -= weights[a];
    }
    if !(prob > 0.0) {
        return Err(Error::SupportViolation("slate has zero probability under the popularity policy".into()));
    }
    Ok(prob)
}

pub(crate) fn factored_propensity(probs: &[f64], items: &[usize], mode: PropensityMode) -> f64 {
    match mode {
        PropensityMode::PlainProduct => items.iter().map(|&a| probs[a]).product(),
        PropensityMode::Renormalized => {
            let mut used = 0.0;
            let mut prob = 1.0;
            for &a in items {
                prob *= probs[a] / (1.0 - used);
                used += probs[a];
            }
            prob
        }
    }
}

/// A drawn slate with the propensities the logging side records.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSlate {
    pub slate: Slate,
    pub slate_propensity: f64,
    pub marginal_propensities: Vec<f64>,
}

/// Draws a slate of size `k` from `policy`.
pub fn sample_slate<R: Rng + ?Sized>(policy: &PolicySpec, z: &[f64], k: usize, rng: &mut R) -> Result<SampledSlate> {
    sample_slate_with(policy, z, k, PropensityMode::default(), rng)
}

pub fn sample_slate_with<R: Rng + ?Sized>(
    policy: &PolicySpec,
    z: &[f64],
    k: usize,
    mode: PropensityMode,
    rng: &mut R,
) -> Result<SampledSlate> {
    let p = policy.num_items;
    if k > p {
        return Err(Error::SlateTooLarge { k, p });
    }
    if k == 0 {
        return Err(Error::InvalidSlate("slate size must be positive".into()));
    }
    match policy.kind {
        PolicyKind::Uniform => {
            let items = sample_uniform_distinct(p, k, rng);
            Ok(SampledSlate {
                slate: Slate::new(items)?,
                slate_propensity: uniform_slate_propensity(p, k),
                marginal_propensities: vec![1.0 / p as f64; k],
            })
        }
        PolicyKind::TopKPop => {
            let weights = policy.weights()?;
            let sampler = WeightedSampler::new(weights)?;
            let items = sampler.sample_distinct(k, rng)?;
            let total = sampler.total();
            let marginals = items.iter().map(|&a| weights[a] / total).collect();
            let prop = sequential_propensity(weights, &items)?;
            Ok(SampledSlate {
                slate: Slate::new(items)?,
                slate_propensity: prop,
                marginal_propensities: marginals,
            })
        }
        PolicyKind::FactoredSoftmax | PolicyKind::TopKSoftmax => {
            let probs = softmax_item_probs(policy.softmax_params()?, z)?;
            let items = WeightedSampler::new(&probs)?.sample_distinct(k, rng)?;
            let prop = factored_propensity(&probs, &items, mode);
            let marginals = items.iter().map(|&a| probs[a]).collect();
            Ok(SampledSlate {
                slate: Slate::new(items)?,
                slate_propensity: prop,
                marginal_propensities: marginals,
            })
        }
    }
}

/// `k` distinct items drawn uniformly, in draw order.
pub fn sample_uniform_distinct<R: Rng + ?Sized>(num_items: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if 2 * k <= num_items {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let a = rng.random_range(0..num_items);
            if !out.contains(&a) {
                out.push(a);
            }
        }
        out
    } else {
        // partial Fisher-Yates
        let mut pool: Vec<usize> = (0..num_items).collect();
        for i in 0..k {
            let j = rng.random_range(i..num_items);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Sequential weighted sampling without replacement.
///
/// Draws use the full cumulative table with rejection of already chosen
/// items, which is exactly the renormalized law; when the chosen items hold
/// most of the mass it falls back to a linear scan over the remainder.
#[derive(Debug, Clone)]
pub struct WeightedSampler<'a> {
    weights: &'a [f64],
    cumulative: Vec<f64>,
}

impl<'a> WeightedSampler<'a> {
    pub fn new(weights: &'a [f64]) -> Result<Self> {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        for &w in weights {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidProbabilities(format!("weight {w}")));
            }
            acc += w;
            cumulative.push(acc);
        }
        if acc <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Ok(Self { weights, cumulative })
    }

    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    fn draw_full<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.total();
        let i = self.cumulative.partition_point(|&c| c <= u);
        let mut i = i.min(self.weights.len() - 1);
        // never return a zero-weight item at a flat stretch of the table
        while self.weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        i
    }

    pub fn sample_distinct<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<Vec<usize>> {
        let positive = self.weights.iter().filter(|&&w| w > 0.0).count();
        if k > positive {
            return Err(Error::SupportViolation(format!(
                "cannot draw {k} distinct items from {positive} with positive weight"
            )));
        }
        let total = self.total();
        let mut chosen = Vec::with_capacity(k);
        let mut used = 0.0;
        while chosen.len() < k {
            if used < 0.5 * total {
                let a = self.draw_full(rng);
                if !chosen.contains(&a) {
                    used += self.weights[a];
                    chosen.push(a);
                }
            } else {
                let remaining: f64 = self
                    .weights
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !chosen.contains(i))
                    .map(|(_, w)| w)
                    .sum();
                let u = rng.random::<f64>() * remaining;
                let mut acc = 0.0;
                let mut pick = None;
                for (i, &w) in self.weights.iter().enumerate() {
                    if w > 0.0 && !chosen.contains(&i) {
                        acc += w;
                        pick = Some(i);
                        if u < acc {
                            break;
                        }
                    }
                }
                let a = pick.expect("positive mass remains");
                used += self.weights[a];
                chosen.push(a);
            }
        }
        Ok(chosen)
    }
}

/// Top-K multiplier `λ_K(a) = K (1 − p(a))^{K−1}`.
pub fn topk_correction(item_probs: &[f64], k: usize) -> Vec<f64> {
    item_probs.iter().map(|&p| topk_multiplier(p, k)).collect()
}

pub fn topk_multiplier(p: f64, k: usize) -> f64 {
    let k = k.max(1);
    k as f64 * (1.0 - p).powi(k as i32 - 1)
}

/// Knobs shared by the estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    /// Importance weights are clipped at `M` when set; defaults to 100.
    pub clip: Option<f64>,
    /// Divide by the mean weight instead of `n`.
    pub self_normalized: bool,
    pub propensity_mode: PropensityMode,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            clip: Some(DEFAULT_CLIP),
            self_normalized: false,
            propensity_mode: PropensityMode::PlainProduct,
        }
    }
}

pub const DEFAULT_CLIP: f64 = 100.0;

impl EstimatorOptions {
    /// No clipping, plain normalization.
    pub fn unclipped() -> Self {
        Self {
            clip: None,
            ..Self::default()
        }
    }

    fn clip(&self, w: f64) -> f64 {
        match self.clip {
            Some(m) => w.min(m),
            None => w,
        }
    }
}

fn check_support(p: f64, what: &str) -> Result<()> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(Error::SupportViolation(format!("{what} propensity {p}")))
    }
}

/// Per-record IPS weights `π(s_i | z_i) / π0(s_i | z_i)` (after clipping).
pub fn ips_weights(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<Vec<f64>> {
    logs.iter()
        .map(|r| {
            check_support(r.slate_propensity, "slate")?;
            let pi = policy.slate_propensity(&r.context.z, &r.slate, opts.propensity_mode)?;
            Ok(opts.clip(pi / r.slate_propensity))
        })
        .collect()
}

/// Per-record IPS terms `R_i · w_i`.
pub fn ips_terms(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<Vec<f64>> {
    let w = ips_weights(policy, logs, opts)?;
    Ok(logs.iter().zip(w).map(|(r, w)| r.feedback.reward() * w).collect())
}

/// Slate-level IPS estimate of the value of `policy`.
pub fn estimate_ips(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::Data("no logged records".into()));
    }
    let weights = ips_weights(policy, logs, opts)?;
    let num: f64 = logs.iter().zip(&weights).map(|(r, w)| r.feedback.reward() * w).sum();
    let den = if opts.self_normalized {
        weights.iter().sum::<f64>()
    } else {
        logs.len() as f64
    };
    Ok(num / den)
}

/// Per-record IIPS terms `Σℓ r_{i,ℓ} π(s_{i,ℓ}, ℓ | z_i) / π0(s_{i,ℓ}, ℓ | z_i)`,
/// together with the mean per-position weight of each record.
fn iips_parts(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<Vec<(f64, f64)>> {
    logs.iter()
        .map(|r| {
            if r.marginal_propensities.len() != r.slate.len() {
                return Err(Error::DimensionMismatch {
                    what: "marginal propensities",
                    expected: r.slate.len(),
                    got: r.marginal_propensities.len(),
                });
            }
            for &p in &r.marginal_propensities {
                check_support(p, "marginal")?;
            }
            let marg = policy.item_marginals(&r.context.z)?;
            let mut term = 0.0;
            let mut weight_sum = 0.0;
            for (pos, &a) in r.slate.items().iter().enumerate() {
                if a >= marg.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "item",
                        index: a,
                        limit: marg.len(),
                    });
                }
                let w = opts.clip(marg[a] / r.marginal_propensities[pos]);
                term += r.feedback.rank(pos) * w;
                weight_sum += w;
            }
            Ok((term, weight_sum / r.slate.len() as f64))
        })
        .collect()
}

pub fn iips_terms(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<Vec<f64>> {
    Ok(iips_parts(policy, logs, opts)?.into_iter().map(|(t, _)| t).collect())
}

/// Item-level IPS estimate of the value of `policy`.
pub fn estimate_iips(policy: &PolicySpec, logs: &[LogRecord], opts: &EstimatorOptions) -> Result<f64> {
    if logs.is_empty() {
        return Err(Error::Data("no logged records".into()));
    }
    let parts = iips_parts(policy, logs, opts)?;
    let num: f64 = parts.iter().map(|(t, _)| t).sum();
    let den = if opts.self_normalized {
        parts.iter().map(|(_, w)| w).sum::<f64>()
    } else {
        logs.len() as f64
    };
    Ok(num / den)
}
