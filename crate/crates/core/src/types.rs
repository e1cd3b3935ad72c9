//! Domain types shared across the crate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;
use crate::{Error, Result};

/// The item catalog `[P]` and the embedding dimension used to describe it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub num_items: usize,
    pub embedding_dim: usize,
}

impl Catalog {
    pub fn new(num_items: usize, embedding_dim: usize) -> Result<Self> {
        if num_items < 2 {
            return Err(Error::Config(format!("catalog needs at least 2 items, got {num_items}")));
        }
        if embedding_dim < 1 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            num_items,
            embedding_dim,
        })
    }
}

/// Per-impression context: engagement features `y`, interest features `z`
/// and the realized slate size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub slate_size: usize,
}

/// An ordered list of distinct item indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Slate(Vec<usize>);

impl Slate {
    pub fn new(items: Vec<usize>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidSlate("empty slate".into()));
        }
        for (i, a) in items.iter().enumerate() {
            if items[..i].contains(a) {
                return Err(Error::InvalidSlate(format!("item {a} repeated")));
            }
        }
        Ok(Self(items))
    }

    /// Like [`Slate::new`] but also checks items against the catalog size.
    pub fn in_catalog(items: Vec<usize>, num_items: usize) -> Result<Self> {
        if let Some(&a) = items.iter().find(|&&a| a >= num_items) {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: a,
                limit: num_items,
            });
        }
        Self::new(items)
    }

    pub fn items(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for Slate {
    type Error = Error;
    fn try_from(items: Vec<usize>) -> Result<Self> {
        Slate::new(items)
    }
}

impl From<Slate> for Vec<usize> {
    fn from(s: Slate) -> Self {
        s.0
    }
}

/// One-hot outcome `(R̄, r_1, …, r_K)`.
///
/// `outcome == 0` is "no interaction"; `outcome == ℓ` (1-based) is an
/// interaction with the item at slate position `ℓ - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Feedback {
    outcome: usize,
    slate_len: usize,
}

impl Feedback {
    pub fn no_click(slate_len: usize) -> Self {
        Self {
            outcome: 0,
            slate_len,
        }
    }

    /// Interaction with the item at 0-based slate position `position`.
    pub fn click(position: usize, slate_len: usize) -> Result<Self> {
        Self::from_outcome(position + 1, slate_len)
    }

    pub fn from_outcome(outcome: usize, slate_len: usize) -> Result<Self> {
        if outcome > slate_len {
            return Err(Error::InvalidFeedback(format!(
                "outcome {outcome} beyond slate of length {slate_len}"
            )));
        }
        Ok(Self { outcome, slate_len })
    }

    pub fn from_one_hot(one_hot: &[f64]) -> Result<Self> {
        if one_hot.len() < 2 {
            return Err(Error::InvalidFeedback("one-hot needs at least 2 entries".into()));
        }
        let mut hot = None;
        for (i, &v) in one_hot.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(Error::InvalidFeedback("more than one non-zero entry".into()));
                }
                hot = Some(i);
            } else if v != 0.0 {
                return Err(Error::InvalidFeedback(format!("entry {i} is {v}")));
            }
        }
        let outcome = hot.ok_or_else(|| Error::InvalidFeedback("no non-zero entry".into()))?;
        Ok(Self {
            outcome,
            slate_len: one_hot.len() - 1,
        })
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.slate_len + 1];
        v[self.outcome] = 1.0;
        v
    }

    pub fn outcome(&self) -> usize {
        self.outcome
    }

    pub fn slate_len(&self) -> usize {
        self.slate_len
    }

    /// `R = Σ r_ℓ`.
    pub fn reward(&self) -> f64 {
        if self.outcome > 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_success(&self) -> bool {
        self.outcome > 0
    }

    /// 0-based slate position that received the interaction.
    pub fn clicked_position(&self) -> Option<usize> {
        self.outcome.checked_sub(1)
    }

    /// `r_ℓ` for 0-based position `ℓ`.
    pub fn rank(&self, position: usize) -> f64 {
        if self.outcome == position + 1 {
            1.0
        } else {
            0.0
        }
    }
}

/// One logged impression with its logging propensities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub context: Context,
    pub slate: Slate,
    pub feedback: Feedback,
    /// `π0(s | z)`
    pub slate_propensity: f64,
    /// `π0(s_ℓ, ℓ | z)` per position.
    pub marginal_propensities: Vec<f64>,
}

impl LogRecord {
    /// Checks the cross-field invariants of a record.
    pub fn validate(&self) -> Result<()> {
        let k = self.slate.len();
        if self.context.slate_size != k {
            return Err(Error::Data(format!(
                "context slate size {} but slate has {k} items",
                self.context.slate_size
            )));
        }
        if self.feedback.slate_len() != k {
            return Err(Error::InvalidFeedback(format!(
                "feedback covers {} positions, slate has {k}",
                self.feedback.slate_len()
            )));
        }
        if self.marginal_propensities.len() != k {
            return Err(Error::DimensionMismatch {
                what: "marginal propensities",
                expected: k,
                got: self.marginal_propensities.len(),
            });
        }
        let positive = |p: f64| p.is_finite() && p > 0.0 && p <= 1.0;
        if !positive(self.slate_propensity) {
            return Err(Error::SupportViolation(format!(
                "slate propensity {}",
                self.slate_propensity
            )));
        }
        if let Some(p) = self.marginal_propensities.iter().find(|&&p| !positive(p)) {
            return Err(Error::SupportViolation(format!("marginal propensity {p}")));
        }
        Ok(())
    }
}

/// Which member of the PRR family a parameter set describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Reward and rank, engagement-driven no-interaction score.
    Full,
    /// Two categories: no interaction vs. any interaction.
    RewardOnly,
    /// Ranks only, fitted on successful slates.
    RankOnly,
    /// Scalar no-interaction score in place of `yᵀφ`.
    BiasOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::RewardOnly,
        Variant::RankOnly,
        Variant::BiasOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "prr",
            Variant::RewardOnly => "prr-reward",
            Variant::RankOnly => "prr-rank",
            Variant::BiasOnly => "prr-bias",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::RewardOnly => 1,
            Variant::RankOnly => 2,
            Variant::BiasOnly => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        Variant::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown variant tag {tag}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown PRR variant '{s}'")))
    }
}

/// Shape of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// `P`
    pub num_items: usize,
    /// `d`
    pub embedding_dim: usize,
    /// `d′`
    pub engagement_dim: usize,
    /// `d_z`
    pub interest_dim: usize,
    pub k_max: usize,
}

impl ModelDims {
    pub fn catalog(&self) -> Catalog {
        Catalog {
            num_items: self.num_items,
            embedding_dim: self.embedding_dim,
        }
    }

    /// Checks a context against these dimensions.
    pub fn check_context(&self, ctx: &Context) -> Result<()> {
        if ctx.y.len() != self.engagement_dim {
            return Err(Error::DimensionMismatch {
                what: "engagement features",
                expected: self.engagement_dim,
                got: ctx.y.len(),
            });
        }
        if ctx.z.len() != self.interest_dim {
            return Err(Error::DimensionMismatch {
                what: "interest features",
                expected: self.interest_dim,
                got: ctx.z.len(),
            });
        }
        if ctx.slate_size == 0 || ctx.slate_size > self.k_max {
            return Err(Error::InvalidSlate(format!(
                "slate size {} outside 1..={}",
                ctx.slate_size, self.k_max
            )));
        }
        if ctx.slate_size > self.num_items {
            return Err(Error::SlateTooLarge {
                k: ctx.slate_size,
                p: self.num_items,
            });
        }
        Ok(())
    }
}

/// Learnable PRR parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: Variant,
    /// `φ`, length `d′`.
    pub engagement: Vec<f64>,
    /// `Γ`, `d × d_z`; `g_Γ(z) = Γz`.
    pub interest_map: Matrix,
    /// `Ψ`, `P × d`.
    pub item_embeddings: Matrix,
    /// Multiplicative position biases `γ`, length `K_max`.
    pub position_mult: Vec<f64>,
    /// Additive position biases `α`, length `K_max`.
    pub position_add: Vec<f64>,
    /// Scalar no-interaction score used by [`Variant::BiasOnly`].
    pub bias_scalar: f64,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, variant: Variant) -> Self {
        Self {
            variant,
            engagement: vec![0.0; dims.engagement_dim],
            interest_map: Matrix::zeros(dims.embedding_dim, dims.interest_dim),
            item_embeddings: Matrix::zeros(dims.num_items, dims.embedding_dim),
            position_mult: vec![0.0; dims.k_max],
            position_add: vec![0.0; dims.k_max],
            bias_scalar: 0.0,
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_items: self.item_embeddings.rows,
            embedding_dim: self.item_embeddings.cols,
            engagement_dim: self.engagement.len(),
            interest_dim: self.interest_map.cols,
            k_max: self.position_mult.len(),
        }
    }

    /// Checks internal shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let d = self.item_embeddings.cols;
        if self.interest_map.rows != d {
            return Err(Error::DimensionMismatch {
                what: "interest map rows",
                expected: d,
                got: self.interest_map.rows,
            });
        }
        if self.position_add.len() != self.position_mult.len() {
            return Err(Error::DimensionMismatch {
                what: "additive position biases",
                expected: self.position_mult.len(),
                got: self.position_add.len(),
            });
        }
        let finite = self.engagement.iter().all(|x| x.is_finite())
            && self.interest_map.is_finite()
            && self.item_embeddings.is_finite()
            && self.position_mult.iter().all(|x| x.is_finite())
            && self.position_add.iter().all(|x| x.is_finite())
            && self.bias_scalar.is_finite();
        if !finite {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    /// `g_Γ(z) = Γz`.
    pub fn user_embedding(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.interest_map.mul_vec(z)
    }
}
