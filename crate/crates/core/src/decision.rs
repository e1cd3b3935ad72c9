//! Serving-time slate construction.
//!
//! Maximizing `P(R = 1 | x, s)` over slates reduces to maximizing
//! `Σℓ exp(g_Γ(z)ᵀΨ_{sℓ}) exp(γℓ)`, since `θ0` and the additive biases do
//! not depend on `s`. By the rearrangement inequality the maximizer pairs the
//! top-K items by `g_Γ(z)ᵀΨ_a` with positions sorted by `γ`, so a slate is a
//! top-K inner-product query plus a fixed permutation.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numeric::{dot, l2_norm, softmax_in_place, stream_rng, Matrix, SimRng};
use crate::policy::{sample_slate, PolicySpec, SoftmaxPolicyParams, WeightedSampler};
use crate::types::{Context, ModelParams, Slate};
use crate::{Error, Result};

/// Top-k inner-product retrieval over a fixed set of rows.
pub trait MipsIndex: Send + Sync {
    /// Up to `k` `(row, score)` pairs in descending score order; equal
    /// scores are ordered by ascending row.
    fn top_k(&self, query: &[f64], k: usize) -> Vec<(usize, f64)>;

    /// Declared recall@k; `1.0` for exact indexes.
    fn recall_target(&self) -> f64;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn by_score_then_index(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Best `k` of `scored` under [`by_score_then_index`], sorted.
fn select_top(mut scored: Vec<(usize, f64)>, k: usize) -> Vec<(usize, f64)> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_score_then_index);
        scored.truncate(k);
    }
    scored.sort_by(by_score_then_index);
    scored
}

/// Linear scan with partial selection, `O(P d + P + k log k)` per query.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    rows: Arc<Matrix>,
}

impl ExactIndex {
    pub fn new(rows: Matrix) -> Self {
        Self { rows: Arc::new(rows) }
    }
}

impl MipsIndex for ExactIndex {
    fn top_k(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let scored = (0..self.rows.rows).map(|a| (a, dot(query, self.rows.row(a)))).collect();
        select_top(scored, k)
    }

    fn recall_target(&self) -> f64 {
        1.0
    }

    fn len(&self) -> usize {
        self.rows.rows
    }
}

#[derive(Debug, Clone)]
struct Bucket {
    center: Vec<f64>,
    /// `max ‖x − center‖` over members.
    radius: f64,
    members: Vec<usize>,
}

/// Clustered inner-product index.
///
/// Rows are grouped by spherical k-means. For a query `q` every bucket has
/// the upper bound `qᵀc + r‖q‖` on its members' scores; buckets are probed
/// in bound order and the search stops early once the k-th best score beats
/// the next bound (then the answer is exact) or the probe budget is spent.
/// The budget is calibrated at build time so that recall@k on random
/// queries meets the declared target.
#[derive(Debug, Clone)]
pub struct BucketIndex {
    rows: Arc<Matrix>,
    buckets: Vec<Bucket>,
    max_probes: usize,
    recall_target: f64,
}

impl BucketIndex {
    /// Builds an index whose measured recall@`calibration_k` on
    /// `calibration_queries` Gaussian queries is at least `recall_target`.
    pub fn build(rows: Matrix, recall_target: f64, calibration_k: usize, seed: u64) -> Result<Self> {
        if !(recall_target > 0.0 && recall_target <= 1.0) {
            return Err(Error::Config(format!("recall target must lie in (0, 1], got {recall_target}")));
        }
        let n = rows.rows;
        if n == 0 {
            return Err(Error::Config("cannot index an empty matrix".into()));
        }
        let num_buckets = ((n as f64).sqrt().ceil() as usize).clamp(1, n);
        let mut rng = stream_rng(seed, 0);
        let dim = rows.cols;

        // spherical k-means on normalized rows, seeded by distinct random rows
        let unit = |v: &[f64]| {
            let nrm = l2_norm(v);
            if nrm > 0.0 {
                v.iter().map(|x| x / nrm).collect::<Vec<_>>()
            } else {
                v.to_vec()
            }
        };
        let seeds = crate::policy::sample_uniform_distinct(n, num_buckets, &mut rng);
        let mut dirs: Vec<Vec<f64>> = seeds.iter().map(|&a| unit(rows.row(a))).collect();
        let mut assign = vec![0usize; n];
        for _ in 0..8 {
            for (a, slot) in assign.iter_mut().enumerate() {
                let r = rows.row(a);
                let mut best = (0, f64::NEG_INFINITY);
                for (c, d) in dirs.iter().enumerate() {
                    let s = dot(r, d);
                    if s > best.1 {
                        best = (c, s);
                    }
                }
                *slot = best.0;
            }
            let mut sums = vec![vec![0.0; dim]; num_buckets];
            for (a, &c) in assign.iter().enumerate() {
                crate::numeric::axpy(1.0, &unit(rows.row(a)), &mut sums[c]);
            }
            for (d, s) in dirs.iter_mut().zip(sums) {
                if l2_norm(&s) > 0.0 {
                    *d = unit(&s);
                }
            }
        }
        let mut buckets: Vec<Bucket> = (0..num_buckets)
            .map(|_| Bucket {
                center: vec![0.0; dim],
                radius: 0.0,
                members: Vec::new(),
            })
            .collect();
        for (a, &c) in assign.iter().enumerate() {
            buckets[c].members.push(a);
        }
        buckets.retain(|b| !b.members.is_empty());
        for b in &mut buckets {
            for &a in &b.members {
                crate::numeric::axpy(1.0 / b.members.len() as f64, rows.row(a), &mut b.center);
            }
            b.radius = b
                .members
                .iter()
                .map(|&a| {
                    let diff: Vec<f64> = rows.row(a).iter().zip(&b.center).map(|(x, c)| x - c).collect();
                    l2_norm(&diff)
                })
                .fold(0.0, f64::max);
        }

        let mut index = Self {
            rows: Arc::new(rows),
            max_probes: buckets.len(),
            buckets,
            recall_target,
        };
        index.calibrate(calibration_k.max(1), 200, &mut rng);
        Ok(index)
    }

    fn calibrate<R: Rng>(&mut self, k: usize, queries: usize, rng: &mut R) {
        let exact = ExactIndex {
            rows: Arc::clone(&self.rows),
        };
        let dim = self.rows.cols;
        let qs: Vec<Vec<f64>> = (0..queries)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let truth: Vec<Vec<usize>> = qs.iter().map(|q| exact.top_k(q, k).into_iter().map(|(a, _)| a).collect()).collect();
        // aim halfway between the target and perfect recall to leave room for
        // query distributions that differ from the calibration draw
        let aim = self.recall_target + 0.5 * (1.0 - self.recall_target);
        let total = self.buckets.len();
        for probes in 1..=total {
            self.max_probes = probes;
            let recall = mean_recall(self, &qs, &truth, k);
            if recall >= aim {
                return;
            }
        }
        self.max_probes = total;
    }

    pub fn max_probes(&self) -> usize {
        self.max_probes
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }
}

/// Mean recall@k of `index` against known top-k sets.
pub fn mean_recall(index: &dyn MipsIndex, queries: &[Vec<f64>], truth: &[Vec<usize>], k: usize) -> f64 {
    let mut total = 0.0;
    for (q, t) in queries.iter().zip(truth) {
        let got = index.top_k(q, k);
        let hits = got.iter().filter(|(a, _)| t.contains(a)).count();
        total += hits as f64 / t.len().max(1) as f64;
    }
    total / queries.len().max(1) as f64
}

impl MipsIndex for BucketIndex {
    fn top_k(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let qn = l2_norm(query);
        let mut order: Vec<(usize, f64)> = self
            .buckets
            .iter()
            .enumerate()
            .map(|(i, b)| (i, dot(query, &b.center) + b.radius * qn))
            .collect();
        order.sort_by(by_score_then_index);
        let mut found: Vec<(usize, f64)> = Vec::new();
        for (probed, &(bi, bound)) in order.iter().enumerate() {
            if probed >= self.max_probes && found.len() >= k {
                break;
            }
            if found.len() >= k {
                let kth = found[k - 1].1;
                if kth > bound {
                    break;
                }
            }
            for &a in &self.buckets[bi].members {
                found.push((a, dot(query, self.rows.row(a))));
            }
            found = select_top(found, k);
        }
        found
    }

    fn recall_target(&self) -> f64 {
        self.recall_target
    }

    fn len(&self) -> usize {
        self.rows.rows
    }
}

/// Which index backs retrieval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexKind {
    Exact,
    Approx { recall: f64 },
}

pub fn build_index(rows: Matrix, kind: IndexKind, calibration_k: usize, seed: u64) -> Result<Box<dyn MipsIndex>> {
    Ok(match kind {
        IndexKind::Exact => Box::new(ExactIndex::new(rows)),
        IndexKind::Approx { recall } => Box::new(BucketIndex::build(rows, recall, calibration_k, seed)?),
    })
}

/// Positions `0..k` ordered by descending `γ`, ties by lower position.
pub fn position_order(gamma: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > gamma.len() {
        return Err(Error::IndexOutOfRange {
            what: "slate size",
            index: k,
            limit: gamma.len(),
        });
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| gamma[b].partial_cmp(&gamma[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    Ok(order)
}

fn distinct_top(index: &dyn MipsIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    let hits = index.top_k(query, k);
    let mut items: Vec<usize> = Vec::with_capacity(k);
    for (a, _) in hits {
        if !items.contains(&a) {
            items.push(a);
        }
    }
    if items.len() < k {
        return Err(Error::IndexShortfall { got: items.len(), needed: k });
    }
    Ok(items)
}

/// Places the j-th best item (by `g_Γ(z)ᵀΨ_a`) at the j-th best position (by `γ`).
pub fn build_slate(params: &ModelParams, z: &[f64], k: usize, index: &dyn MipsIndex) -> Result<Slate> {
    let order = position_order(&params.position_mult, k)?;
    build_slate_with_order(params, z, &order, index)
}

fn build_slate_with_order(params: &ModelParams, z: &[f64], order: &[usize], index: &dyn MipsIndex) -> Result<Slate> {
    let k = order.len();
    if k > index.len() {
        return Err(Error::SlateTooLarge { k, p: index.len() });
    }
    let user = params.user_embedding(z)?;
    let top = distinct_top(index, &user, k)?;
    let mut slate = vec![0; k];
    for (rank, &pos) in order.iter().enumerate() {
        slate[pos] = top[rank];
    }
    Slate::new(slate)
}

/// A PRR model ready to serve: item index plus cached position orders.
pub struct PrrRecommender {
    params: ModelParams,
    index: Box<dyn MipsIndex>,
    orders: Vec<Vec<usize>>,
}

impl PrrRecommender {
    pub fn new(params: ModelParams, kind: IndexKind, seed: u64) -> Result<Self> {
        params.validate()?;
        let k_max = params.position_mult.len();
        let index = build_index(params.item_embeddings.clone(), kind, k_max, seed)?;
        let orders = (0..=k_max).map(|k| position_order(&params.position_mult, k)).collect::<Result<_>>()?;
        Ok(Self { params, index, orders })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn recommend(&self, context: &Context) -> Result<Slate> {
        let k = context.slate_size;
        let order = self.orders.get(k).ok_or(Error::IndexOutOfRange {
            what: "slate size",
            index: k,
            limit: self.orders.len(),
        })?;
        build_slate_with_order(&self.params, &context.z, order, self.index.as_ref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionMode {
    Greedy,
    Sample,
}

/// Greedy: top-k by `f_Ξ(z)ᵀβ_a` in descending order. Sample: sequential
/// draws without replacement from the renormalized softmax.
pub fn policy_decide<R: Rng + ?Sized>(
    params: &SoftmaxPolicyParams,
    z: &[f64],
    k: usize,
    index: &dyn MipsIndex,
    mode: DecisionMode,
    rng: &mut R,
) -> Result<Slate> {
    if k > params.num_items() {
        return Err(Error::SlateTooLarge {
            k,
            p: params.num_items(),
        });
    }
    match mode {
        DecisionMode::Greedy => {
            let user = params.user_embedding(z)?;
            Slate::new(distinct_top(index, &user, k)?)
        }
        DecisionMode::Sample => {
            let mut probs = params.logits(z)?;
            softmax_in_place(&mut probs)?;
            Slate::new(WeightedSampler::new(&probs)?.sample_distinct(k, rng)?)
        }
    }
}

/// A softmax policy ready to serve.
pub struct PolicyRecommender {
    params: SoftmaxPolicyParams,
    index: Box<dyn MipsIndex>,
    pub mode: DecisionMode,
}

impl PolicyRecommender {
    pub fn new(params: SoftmaxPolicyParams, kind: IndexKind, mode: DecisionMode, calibration_k: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        let index = build_index(params.item_embeddings.clone(), kind, calibration_k, seed)?;
        Ok(Self { params, index, mode })
    }

    pub fn params(&self) -> &SoftmaxPolicyParams {
        &self.params
    }

    pub fn recommend<R: Rng + ?Sized>(&self, context: &Context, rng: &mut R) -> Result<Slate> {
        policy_decide(&self.params, &context.z, context.slate_size, self.index.as_ref(), self.mode, rng)
    }
}

/// Anything that can fill a slate for a context during an A/B test.
pub trait DecisionRule: Send + Sync {
    fn decide(&self, context: &Context, rng: &mut SimRng) -> Result<Slate>;
}

impl DecisionRule for PrrRecommender {
    fn decide(&self, context: &Context, _rng: &mut SimRng) -> Result<Slate> {
        self.recommend(context)
    }
}

impl DecisionRule for PolicyRecommender {
    fn decide(&self, context: &Context, rng: &mut SimRng) -> Result<Slate> {
        self.recommend(context, rng)
    }
}

/// Draws slates from a stochastic policy, e.g. the logging policy itself.
pub struct SamplingRule(pub PolicySpec);

impl DecisionRule for SamplingRule {
    fn decide(&self, context: &Context, rng: &mut SimRng) -> Result<Slate> {
        Ok(sample_slate(&self.0, &context.z, context.slate_size, rng)?.slate)
    }
}
