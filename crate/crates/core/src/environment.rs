//! Synthetic ground-truth environment: oracle parameters, simulated users,
//! logged-data generation and paired A/B testing.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decision::DecisionRule;
use crate::model::{category_probabilities, ContextScorer};
use crate::numeric::{l2_norm, mean_and_stderr, mix_seed, sample_categorical, stream_rng, Matrix, SimRng};
use crate::policy::{sample_slate, sample_uniform_distinct, PolicySpec};
use crate::types::{Context, Feedback, LogRecord, ModelDims, ModelParams, Slate, Variant};
use crate::{Error, Result};

/// Impressions handled per work unit. Fixed so results do not depend on the
/// thread count.
pub const CHUNK: usize = 2048;

const PARAM_STREAM: u64 = 0;
const USER_LABEL: u64 = 0x5553_4552;
const LOG_LABEL: u64 = 0x4c4f_4753;
const DECIDE_LABEL: u64 = 0x4445_4349;

/// Mean and variance of an i.i.d. normal block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalSpec {
    pub mean: f64,
    pub var: f64,
}

impl NormalSpec {
    pub const STANDARD: Self = Self { mean: 0.0, var: 1.0 };

    fn validate(&self, what: &str) -> Result<()> {
        if !self.mean.is_finite() || !self.var.is_finite() || self.var < 0.0 {
            return Err(Error::Config(format!("{what}: need finite mean and variance >= 0")));
        }
        Ok(())
    }

    fn fill<R: Rng + ?Sized>(&self, xs: &mut [f64], rng: &mut R) {
        let dist = Normal::new(self.mean, self.var.sqrt()).expect("validated");
        xs.iter_mut().for_each(|x| *x = dist.sample(rng));
    }
}

impl Default for NormalSpec {
    fn default() -> Self {
        Self::STANDARD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub num_items: usize,
    pub embedding_dim: usize,
    pub engagement_dim: usize,
    /// Number of topics `L`; also the interest dimension `d_z`.
    pub num_topics: usize,
    pub k_max: usize,
    pub phi: NormalSpec,
    pub psi: NormalSpec,
    pub interest_map: NormalSpec,
    pub gamma: NormalSpec,
    pub alpha: NormalSpec,
    pub y: NormalSpec,
    pub topic_poisson_rate: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            num_items: 1000,
            embedding_dim: 16,
            engagement_dim: 8,
            num_topics: 32,
            k_max: 8,
            phi: NormalSpec::STANDARD,
            psi: NormalSpec::STANDARD,
            interest_map: NormalSpec::STANDARD,
            gamma: NormalSpec::STANDARD,
            alpha: NormalSpec::STANDARD,
            y: NormalSpec::STANDARD,
            topic_poisson_rate: 3.0,
            seed: 42,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_items < 2 {
            return Err(Error::Config("oracle needs at least 2 items".into()));
        }
        if self.embedding_dim == 0 || self.num_topics == 0 || self.k_max == 0 {
            return Err(Error::Config("embedding_dim, num_topics and k_max must be positive".into()));
        }
        if self.k_max > self.num_items {
            return Err(Error::Config(format!(
                "k_max {} exceeds catalog size {}",
                self.k_max, self.num_items
            )));
        }
        if !(self.topic_poisson_rate >= 0.0 && self.topic_poisson_rate.is_finite()) {
            return Err(Error::Config("topic_poisson_rate must be finite and >= 0".into()));
        }
        for (spec, name) in [
            (self.phi, "phi"),
            (self.psi, "psi"),
            (self.interest_map, "interest_map"),
            (self.gamma, "gamma"),
            (self.alpha, "alpha"),
            (self.y, "y"),
        ] {
            spec.validate(name)?;
        }
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            num_items: self.num_items,
            embedding_dim: self.embedding_dim,
            engagement_dim: self.engagement_dim,
            interest_dim: self.num_topics,
            k_max: self.k_max,
        }
    }
}

/// Frozen ground truth: Full-variant parameters plus feature samplers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEnv {
    pub config: OracleConfig,
    pub params: ModelParams,
}

/// Logging policies available in the synthetic protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoggingPolicy {
    Uniform,
    #[serde(rename = "topkpop")]
    TopKPop,
}

impl LoggingPolicy {
    pub fn name(self) -> &'static str {
        match self {
            LoggingPolicy::Uniform => "uniform",
            LoggingPolicy::TopKPop => "topkpop",
        }
    }
}

impl std::str::FromStr for LoggingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "topkpop" | "top-k-pop" => Ok(Self::TopKPop),
            other => Err(Error::Config(format!("unknown logging policy {other:?}"))),
        }
    }
}

/// Samples every true parameter block from its normal with the config seed.
pub fn build_oracle(config: &OracleConfig) -> Result<OracleEnv> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, PARAM_STREAM);
    let dims = config.dims();
    let mut p = ModelParams::zeros(dims, Variant::Full);
    config.phi.fill(&mut p.engagement, &mut rng);
    config.interest_map.fill(&mut p.interest_map.data, &mut rng);
    config.psi.fill(&mut p.item_embeddings.data, &mut rng);
    config.gamma.fill(&mut p.position_mult, &mut rng);
    config.alpha.fill(&mut p.position_add, &mut rng);
    Ok(OracleEnv {
        config: *config,
        params: p,
    })
}

impl OracleEnv {
    pub fn dims(&self) -> ModelDims {
        self.params.dims()
    }

    /// Draws `(y, z, K_i)` for one simulated user.
    pub fn sample_user<R: Rng + ?Sized>(&self, rng: &mut R) -> Context {
        let c = &self.config;
        let mut y = vec![0.0; c.engagement_dim];
        c.y.fill(&mut y, rng);
        let extra = if c.topic_poisson_rate > 0.0 {
            let draw: f64 = Poisson::new(c.topic_poisson_rate).expect("validated").sample(rng);
            draw as usize
        } else {
            0
        };
        let active = (1 + extra).min(c.num_topics);
        let mut z = vec![0.0; c.num_topics];
        for t in sample_uniform_distinct(c.num_topics, active, rng) {
            z[t] = 1.0;
        }
        let slate_size = rng.random_range(1..=c.k_max.min(c.num_items));
        Context { y, z, slate_size }
    }

    /// Logging policy over the oracle catalog; top-K-pop weights are `‖Ψ_a‖`.
    pub fn logging_policy(&self, kind: LoggingPolicy) -> Result<PolicySpec> {
        match kind {
            LoggingPolicy::Uniform => Ok(PolicySpec::uniform(self.config.num_items)),
            LoggingPolicy::TopKPop => {
                let m = &self.params.item_embeddings;
                PolicySpec::top_k_pop((0..m.rows).map(|a| l2_norm(m.row(a))).collect())
            }
        }
    }

    /// Analytic success probability `1 − θ0/Z` of a slate.
    pub fn analytic_reward(&self, context: &Context, slate: &Slate) -> Result<f64> {
        ContextScorer::new(&self.params, context)?.interaction_probability(slate)
    }

    /// User stream shared by every consumer of `(seed, chunk)`.
    fn user_chunk(&self, seed: u64, chunk: usize, len: usize) -> Vec<Context> {
        let mut rng = stream_rng(mix_seed(seed, USER_LABEL), chunk as u64);
        (0..len).map(|_| self.sample_user(&mut rng)).collect()
    }
}

pub(crate) fn chunks(n: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    let count = n.div_ceil(CHUNK);
    (0..count).into_par_iter().map(move |c| (c, CHUNK.min(n - c * CHUNK)))
}

/// Simulates logged impressions: sample a user, let the logging policy
/// propose a slate, draw feedback from the true categorical.
pub fn generate_logs(env: &OracleEnv, policy: &PolicySpec, n: usize, seed: u64) -> Result<Vec<LogRecord>> {
    if policy.num_items != env.config.num_items {
        return Err(Error::Config(format!(
            "logging policy covers {} items, oracle has {}",
            policy.num_items, env.config.num_items
        )));
    }
    let parts: Vec<Result<Vec<LogRecord>>> = chunks(n)
        .map(|(c, len)| {
            let users = env.user_chunk(seed, c, len);
            let mut rng = stream_rng(mix_seed(seed, LOG_LABEL), c as u64);
            users
                .into_iter()
                .map(|context| {
                    let drawn = sample_slate(policy, &context.z, context.slate_size, &mut rng)?;
                    let probs = category_probabilities(&env.params, &context, &drawn.slate)?;
                    let outcome = sample_categorical(&probs, &mut rng)?;
                    let feedback = Feedback::from_outcome(outcome, drawn.slate.len())?;
                    Ok(LogRecord {
                        context,
                        slate: drawn.slate,
                        feedback,
                        slate_propensity: drawn.slate_propensity,
                        marginal_propensities: drawn.marginal_propensities,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Mean analytic reward of one rule with a 95% normal-approximation interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AbResult {
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl AbResult {
    pub fn from_samples(xs: &[f64]) -> Self {
        let (mean, std_err) = mean_and_stderr(xs);
        Self {
            mean,
            std_err,
            ci_low: mean - 1.96 * std_err,
            ci_high: mean + 1.96 * std_err,
            n: xs.len(),
        }
    }
}

pub(crate) fn check_rule_slate(slate: &Slate, context: &Context, num_items: usize) -> Result<()> {
    if slate.len() != context.slate_size {
        return Err(Error::InvalidSlate(format!(
            "rule returned {} items for slate size {}",
            slate.len(),
            context.slate_size
        )));
    }
    if let Some(&a) = slate.items().iter().find(|&&a| a >= num_items) {
        return Err(Error::InvalidSlate(format!("item {a} outside catalog of {num_items}")));
    }
    Ok(())
}

/// Per-impression rewards for each rule over a paired stream. Every rule sees
/// the same users and starts each chunk from the same decision RNG state.
/// `users(chunk, len)` yields `(user tag, context)` pairs.
pub(crate) fn paired_rewards<U, F>(
    rules: &[&dyn DecisionRule],
    n: usize,
    seed: u64,
    users: U,
    reward: F,
) -> Result<Vec<Vec<f64>>>
where
    U: Fn(usize, usize) -> Vec<(usize, Context)> + Sync,
    F: Fn(usize, &Context, &Slate) -> Result<f64> + Sync,
{
    let parts: Vec<Result<Vec<Vec<f64>>>> = chunks(n)
        .map(|(c, len)| {
            let stream = users(c, len);
            rules
                .iter()
                .map(|rule| {
                    let mut rng: SimRng = stream_rng(mix_seed(seed, DECIDE_LABEL), c as u64);
                    stream
                        .iter()
                        .map(|(tag, ctx)| {
                            let slate = rule.decide(ctx, &mut rng)?;
                            reward(*tag, ctx, &slate)
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut per_rule = vec![Vec::with_capacity(n); rules.len()];
    for part in parts {
        for (acc, xs) in per_rule.iter_mut().zip(part?) {
            acc.extend(xs);
        }
    }
    Ok(per_rule)
}

/// Paired synthetic A/B test recording `1 − θ0/Z` per impression.
pub fn run_abtest(env: &OracleEnv, rules: &[&dyn DecisionRule], n_test: usize, seed: u64) -> Result<Vec<AbResult>> {
    let num_items = env.config.num_items;
    let rewards = paired_rewards(
        rules,
        n_test,
        seed,
        |c, len| env.user_chunk(seed, c, len).into_iter().map(|u| (0, u)).collect(),
        |_, ctx, slate| {
            check_rule_slate(slate, ctx, num_items)?;
            env.analytic_reward(ctx, slate)
        },
    )?;
    Ok(rewards.iter().map(|xs| AbResult::from_samples(xs)).collect())
}

/// Convenience for tests and tooling: an oracle whose item embeddings are
/// replaced wholesale.
pub fn with_item_embeddings(env: &OracleEnv, psi: Matrix) -> Result<OracleEnv> {
    let mut out = env.clone();
    if psi.rows != env.params.item_embeddings.rows || psi.cols != env.params.item_embeddings.cols {
        return Err(Error::DimensionMismatch {
            what: "item embeddings",
            expected: env.params.item_embeddings.data.len(),
            got: psi.data.len(),
        });
    }
    out.params.item_embeddings = psi;
    Ok(out)
}
