//! PRR scoring, likelihood and analytic gradients.
//!
//! For a slate `s` of size `K` the model is a categorical over
//! `(R̄, r_1, …, r_K)` with log-scores
//!
//! ```text
//! log θ0 = yᵀφ
//! log θℓ = log( exp(g_Γ(z)ᵀΨ_{sℓ} + γℓ) + exp(αℓ) )
//! ```
//!
//! The ablations change which categories exist: `RewardOnly` merges all item
//! categories into one, `RankOnly` drops `θ0`, `BiasOnly` replaces `yᵀφ` by a
//! learned scalar. Everything stays in log-space; `Z` is never formed.

use crate::numeric::{dot, log_add_exp, log_sum_exp, softmax_in_place, Matrix};
use crate::types::{Context, LogRecord, ModelParams, Slate, Variant};
use crate::{Error, Result};

/// Log-scores of the categories a variant models.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    /// Entry 0 is `log θ0` unless the variant is `RankOnly`.
    pub log_theta: Vec<f64>,
    pub variant: Variant,
}

impl ScoreVector {
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let mut p = self.log_theta.clone();
        softmax_in_place(&mut p)?;
        Ok(p)
    }
}

/// `log θ0` for the context.
pub fn score_no_interaction(params: &ModelParams, context: &Context) -> Result<f64> {
    match params.variant {
        Variant::RankOnly => Err(Error::Config("rank-only model has no no-interaction score".into())),
        Variant::BiasOnly => Ok(params.bias_scalar),
        Variant::Full | Variant::RewardOnly => {
            if context.y.len() != params.engagement.len() {
                return Err(Error::DimensionMismatch {
                    what: "engagement features",
                    expected: params.engagement.len(),
                    got: context.y.len(),
                });
            }
            Ok(dot(&context.y, &params.engagement))
        }
    }
}

/// `log θℓ` for `item` shown at 0-based `position`.
pub fn score_item(params: &ModelParams, z: &[f64], item: usize, position: usize) -> Result<f64> {
    let h = params.user_embedding(z)?;
    score_item_with_embedding(params, &h, item, position)
}

fn check_item_position(params: &ModelParams, item: usize, position: usize) -> Result<()> {
    if item >= params.item_embeddings.rows {
        return Err(Error::IndexOutOfRange {
            what: "item",
            index: item,
            limit: params.item_embeddings.rows,
        });
    }
    if position >= params.position_mult.len() {
        return Err(Error::IndexOutOfRange {
            what: "position",
            index: position,
            limit: params.position_mult.len(),
        });
    }
    Ok(())
}

/// [`score_item`] with a precomputed `g_Γ(z)`.
pub fn score_item_with_embedding(
    params: &ModelParams,
    user: &[f64],
    item: usize,
    position: usize,
) -> Result<f64> {
    check_item_position(params, item, position)?;
    let relevance = dot(user, params.item_embeddings.row(item));
    Ok(log_add_exp(
        relevance + params.position_mult[position],
        params.position_add[position],
    ))
}

/// Context-level quantities shared by every slate scored for one user.
#[derive(Debug, Clone)]
pub struct ContextScorer<'a> {
    params: &'a ModelParams,
    user: Vec<f64>,
    no_interaction: Option<f64>,
}

impl<'a> ContextScorer<'a> {
    pub fn new(params: &'a ModelParams, context: &Context) -> Result<Self> {
        let user = params.user_embedding(&context.z)?;
        let no_interaction = match params.variant {
            Variant::RankOnly => None,
            _ => Some(score_no_interaction(params, context)?),
        };
        Ok(Self {
            params,
            user,
            no_interaction,
        })
    }

    pub fn user_embedding(&self) -> &[f64] {
        &self.user
    }

    pub fn item_score(&self, item: usize, position: usize) -> Result<f64> {
        score_item_with_embedding(self.params, &self.user, item, position)
    }

    /// `P(R = 1 | x, s) = 1 − θ0 / Z`, with `Z` over `θ0, θ1, …, θK`.
    pub fn interaction_probability(&self, slate: &Slate) -> Result<f64> {
        let s0 = self
            .no_interaction
            .ok_or_else(|| Error::Config("rank-only model cannot predict reward".into()))?;
        if slate.len() > self.params.position_mult.len() {
            return Err(Error::InvalidSlate(format!(
                "slate of length {} exceeds K_max {}",
                slate.len(),
                self.params.position_mult.len()
            )));
        }
        let mut scores = Vec::with_capacity(slate.len() + 1);
        scores.push(s0);
        for (pos, &item) in slate.items().iter().enumerate() {
            scores.push(self.item_score(item, pos)?);
        }
        let log_no_click = s0 - log_sum_exp(&scores);
        // 1 − e^x computed without cancellation
        Ok(-log_no_click.exp_m1())
    }
}

/// Log-scores of every category the variant models for this slate.
pub fn score_slate(params: &ModelParams, context: &Context, slate: &Slate) -> Result<ScoreVector> {
    if slate.len() != context.slate_size {
        return Err(Error::InvalidSlate(format!(
            "slate has {} items, context expects {}",
            slate.len(),
            context.slate_size
        )));
    }
    let scorer = ContextScorer::new(params, context)?;
    let mut items = Vec::with_capacity(slate.len());
    for (pos, &item) in slate.items().iter().enumerate() {
        items.push(scorer.item_score(item, pos)?);
    }
    let log_theta = match params.variant {
        Variant::Full | Variant::BiasOnly => {
            let mut v = Vec::with_capacity(items.len() + 1);
            v.push(scorer.no_interaction.expect("has θ0"));
            v.extend(items);
            v
        }
        Variant::RewardOnly => vec![scorer.no_interaction.expect("has θ0"), log_sum_exp(&items)],
        Variant::RankOnly => items,
    };
    Ok(ScoreVector {
        log_theta,
        variant: params.variant,
    })
}

/// Category probabilities under `params`.
pub fn category_probabilities(params: &ModelParams, context: &Context, slate: &Slate) -> Result<Vec<f64>> {
    score_slate(params, context, slate)?.probabilities()
}

/// Log-probability of the record's observed outcome.
pub fn log_likelihood(params: &ModelParams, record: &LogRecord) -> Result<f64> {
    evaluate(params, record, None)
}

/// Gradient of [`log_likelihood`] with respect to every parameter block.
///
/// Blocks a variant does not use are `None`. Item rows outside the slate
/// are implicitly zero and are not listed.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub engagement: Option<Vec<f64>>,
    pub interest_map: Matrix,
    /// `(item, ∂/∂Ψ_item)`, sorted by item.
    pub item_rows: Vec<(usize, Vec<f64>)>,
    pub position_mult: Vec<f64>,
    pub position_add: Vec<f64>,
    pub bias_scalar: Option<f64>,
}

pub fn grad_log_likelihood(params: &ModelParams, record: &LogRecord) -> Result<Gradient> {
    let mut buf = GradientBuffer::new(params);
    evaluate(params, record, Some((&mut buf, 1.0)))?;
    Ok(buf.to_gradient(params.variant))
}

/// Accumulator for mini-batch gradients.
///
/// Item rows are stored compactly in first-touch order, so resetting and
/// reading the buffer costs time proportional to the rows actually touched
/// and the memory walked per batch does not grow with the catalog.
#[derive(Debug, Clone)]
pub struct GradientBuffer {
    pub engagement: Vec<f64>,
    pub interest_map: Matrix,
    pub position_mult: Vec<f64>,
    pub position_add: Vec<f64>,
    pub bias_scalar: f64,
    embedding_dim: usize,
    touched: Vec<usize>,
    /// Compact row of each item, `u32::MAX` when untouched.
    slot: Vec<u32>,
    rows: Vec<f64>,
    scratch: Vec<f64>,
}

const UNTOUCHED: u32 = u32::MAX;

impl GradientBuffer {
    pub fn new(params: &ModelParams) -> Self {
        let dims = params.dims();
        Self {
            engagement: vec![0.0; dims.engagement_dim],
            interest_map: Matrix::zeros(dims.embedding_dim, dims.interest_dim),
            position_mult: vec![0.0; dims.k_max],
            position_add: vec![0.0; dims.k_max],
            bias_scalar: 0.0,
            embedding_dim: dims.embedding_dim,
            touched: Vec::new(),
            slot: vec![UNTOUCHED; dims.num_items],
            rows: Vec::new(),
            scratch: vec![0.0; dims.embedding_dim],
        }
    }

    pub fn reset(&mut self) {
        self.engagement.iter_mut().for_each(|x| *x = 0.0);
        self.interest_map.data.iter_mut().for_each(|x| *x = 0.0);
        self.position_mult.iter_mut().for_each(|x| *x = 0.0);
        self.position_add.iter_mut().for_each(|x| *x = 0.0);
        self.bias_scalar = 0.0;
        for &a in &self.touched {
            self.slot[a] = UNTOUCHED;
        }
        self.touched.clear();
        self.rows.clear();
    }

    /// Item rows with (possibly) non-zero gradient, in first-touch order.
    pub fn touched_rows(&self) -> &[usize] {
        &self.touched
    }

    /// Gradients of [`Self::touched_rows`], concatenated in the same order.
    pub fn touched_gradients(&self) -> &[f64] {
        &self.rows
    }

    /// Gradient row of `item`, zeros if untouched.
    pub fn item_gradient(&self, item: usize) -> Vec<f64> {
        match self.slot[item] {
            UNTOUCHED => vec![0.0; self.embedding_dim],
            s => self.compact_row(s as usize).to_vec(),
        }
    }

    fn compact_row(&self, s: usize) -> &[f64] {
        &self.rows[s * self.embedding_dim..(s + 1) * self.embedding_dim]
    }

    fn touch(&mut self, item: usize) -> &mut [f64] {
        let d = self.embedding_dim;
        let s = match self.slot[item] {
            UNTOUCHED => {
                let s = self.touched.len();
                self.slot[item] = s as u32;
                self.touched.push(item);
                self.rows.resize((s + 1) * d, 0.0);
                s
            }
            s => s as usize,
        };
        &mut self.rows[s * d..(s + 1) * d]
    }

    fn to_gradient(&self, variant: Variant) -> Gradient {
        let mut rows: Vec<(usize, Vec<f64>)> = self
            .touched
            .iter()
            .enumerate()
            .map(|(s, &a)| (a, self.compact_row(s).to_vec()))
            .collect();
        rows.sort_by_key(|(a, _)| *a);
        Gradient {
            engagement: matches!(variant, Variant::Full | Variant::RewardOnly).then(|| self.engagement.clone()),
            interest_map: self.interest_map.clone(),
            item_rows: rows,
            position_mult: self.position_mult.clone(),
            position_add: self.position_add.clone(),
            bias_scalar: (variant == Variant::BiasOnly).then_some(self.bias_scalar),
        }
    }
}

/// Adds `scale · ∇ log p(record)` into `buf` and returns `log p(record)`.
pub fn accumulate_gradient(
    params: &ModelParams,
    record: &LogRecord,
    scale: f64,
    buf: &mut GradientBuffer,
) -> Result<f64> {
    evaluate(params, record, Some((buf, scale)))
}

fn check_record(params: &ModelParams, record: &LogRecord) -> Result<()> {
    let k = record.slate.len();
    if record.context.slate_size != k || record.feedback.slate_len() != k {
        return Err(Error::InvalidSlate(format!(
            "slate length {k}, context {}, feedback {}",
            record.context.slate_size,
            record.feedback.slate_len()
        )));
    }
    if k > params.position_mult.len() {
        return Err(Error::IndexOutOfRange {
            what: "position",
            index: k - 1,
            limit: params.position_mult.len(),
        });
    }
    if record.context.z.len() != params.interest_map.cols {
        return Err(Error::DimensionMismatch {
            what: "interest features",
            expected: params.interest_map.cols,
            got: record.context.z.len(),
        });
    }
    Ok(())
}

fn evaluate(
    params: &ModelParams,
    record: &LogRecord,
    mut grad: Option<(&mut GradientBuffer, f64)>,
) -> Result<f64> {
    check_record(params, record)?;
    let variant = params.variant;
    let outcome = record.feedback.outcome();
    if variant == Variant::RankOnly && outcome == 0 {
        return Err(Error::RankOnlyNeedsSuccess);
    }
    let ctx = &record.context;
    let items = record.slate.items();
    let k = items.len();
    let user = params.user_embedding(&ctx.z)?;

    // per-position log θℓ and the share of θℓ coming from the multiplicative term
    let mut item_scores = Vec::with_capacity(k);
    let mut mult_share = Vec::with_capacity(k);
    for (pos, &item) in items.iter().enumerate() {
        check_item_position(params, item, pos)?;
        let m = dot(&user, params.item_embeddings.row(item)) + params.position_mult[pos];
        let s = log_add_exp(m, params.position_add[pos]);
        item_scores.push(s);
        mult_share.push((m - s).exp());
    }

    let no_interaction = match variant {
        Variant::RankOnly => None,
        _ => Some(score_no_interaction(params, ctx)?),
    };

    let (mut cats, observed) = match variant {
        Variant::Full | Variant::BiasOnly => {
            let mut c = Vec::with_capacity(k + 1);
            c.push(no_interaction.expect("has θ0"));
            c.extend_from_slice(&item_scores);
            (c, outcome)
        }
        Variant::RewardOnly => (
            vec![no_interaction.expect("has θ0"), log_sum_exp(&item_scores)],
            outcome.min(1),
        ),
        Variant::RankOnly => (item_scores.clone(), outcome - 1),
    };
    let ll = cats[observed] - log_sum_exp(&cats);
    if !ll.is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }

    let Some((buf, scale)) = grad.as_mut() else {
        return Ok(ll);
    };
    let scale = *scale;

    // ∂ log p / ∂ cat_c = onehot_c − p_c
    softmax_in_place(&mut cats)?;
    let mut resid = cats;
    for (c, r) in resid.iter_mut().enumerate() {
        *r = if c == observed { 1.0 } else { 0.0 } - *r;
    }

    // coefficient on each item score log θℓ
    let item_coef: Vec<f64> = match variant {
        Variant::Full | Variant::BiasOnly => resid[1..].to_vec(),
        Variant::RewardOnly => {
            let agg = log_sum_exp(&item_scores);
            item_scores.iter().map(|s| resid[1] * (s - agg).exp()).collect()
        }
        Variant::RankOnly => resid.clone(),
    };
    match variant {
        Variant::Full | Variant::RewardOnly => {
            crate::numeric::axpy(scale * resid[0], &ctx.y, &mut buf.engagement);
        }
        Variant::BiasOnly => buf.bias_scalar += scale * resid[0],
        Variant::RankOnly => {}
    }

    let mut user_grad = std::mem::take(&mut buf.scratch);
    user_grad.iter_mut().for_each(|x| *x = 0.0);
    for (pos, &item) in items.iter().enumerate() {
        let c = item_coef[pos];
        let g_rel = c * mult_share[pos];
        buf.position_mult[pos] += scale * g_rel;
        buf.position_add[pos] += scale * c * (1.0 - mult_share[pos]);
        crate::numeric::axpy(g_rel, params.item_embeddings.row(item), &mut user_grad);
        crate::numeric::axpy(scale * g_rel, &user, buf.touch(item));
    }
    buf.interest_map.add_outer(scale, &user_grad, &ctx.z);
    buf.scratch = user_grad;
    Ok(ll)
}
