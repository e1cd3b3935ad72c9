//! Session-completion simulation built on a plain user-item interaction log.
//!
//! Each user's items are split into an observed `view` half, which becomes the
//! interest context, and a `hide` half that defines which recommendations
//! count as hits. Feedback follows
//! `p0 = w0 K / (w0 K + Σ wℓ bℓ)`, `pk = wk bk / (w0 K + Σ wℓ bℓ)` where
//! `bℓ` marks hidden items on the slate.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decision::DecisionRule;
use crate::environment::{check_rule_slate, chunks, paired_rewards, AbResult};
use crate::numeric::{mix_seed, sample_categorical, stream_rng};
use crate::policy::{sample_slate, PolicySpec};
use crate::types::{Context, Feedback, LogRecord, ModelDims, Slate, Variant};
use crate::{Error, Result};

const BIAS_LABEL: u64 = 0x4249_4153;
const USER_LABEL: u64 = 0x5345_5353;
const LOG_LABEL: u64 = 0x534c_4f47;
const HASH_LABEL: u64 = 0x4841_5348;

const W0_MEAN: f64 = 3.0;
const W0_STD: f64 = 3.0;
const W0_FLOOR: f64 = 0.1;
const W_MAX: u32 = 16;

/// Users with their distinct interacted items, in first-seen order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub items: Vec<Vec<usize>>,
    /// `c_a`: number of users whose list contains item `a`.
    pub counts: Vec<u64>,
    /// Rows that repeated a `(user, item)` pair already seen.
    pub duplicates: usize,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.items.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Parses `user_id,item_id[,timestamp]` rows. A leading header whose
    /// first field is `user_id` is skipped; rows are grouped by user, sorted
    /// by timestamp when present.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut user_ix: HashMap<String, usize> = HashMap::new();
        let mut item_ix: HashMap<String, usize> = HashMap::new();
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        let mut rows: Vec<Vec<(f64, usize, usize)>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if line == 0 && rec.get(0) == Some("user_id") {
                continue;
            }
            if rec.len() < 2 || rec.len() > 3 {
                return Err(Error::Data(format!("line {}: expected 2 or 3 fields, got {}", line + 1, rec.len())));
            }
            let ts = match rec.get(2) {
                Some(t) => t
                    .parse::<f64>()
                    .map_err(|_| Error::Data(format!("line {}: bad timestamp {t:?}", line + 1)))?,
                None => 0.0,
            };
            let u = *user_ix.entry(rec[0].to_string()).or_insert_with(|| {
                user_ids.push(rec[0].to_string());
                rows.push(Vec::new());
                user_ids.len() - 1
            });
            let a = *item_ix.entry(rec[1].to_string()).or_insert_with(|| {
                item_ids.push(rec[1].to_string());
                item_ids.len() - 1
            });
            let seq = rows[u].len();
            rows[u].push((ts, seq, a));
        }
        if user_ids.is_empty() {
            return Err(Error::Data("interaction log has no rows".into()));
        }
        let mut counts = vec![0u64; item_ids.len()];
        let mut duplicates = 0;
        let items = rows
            .into_iter()
            .map(|mut r| {
                r.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut seen = std::collections::HashSet::new();
                let mut list = Vec::with_capacity(r.len());
                for (_, _, a) in r {
                    if seen.insert(a) {
                        counts[a] += 1;
                        list.push(a);
                    } else {
                        duplicates += 1;
                    }
                }
                list
            })
            .collect();
        Ok(Self {
            user_ids,
            item_ids,
            items,
            counts,
            duplicates,
        })
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(std::io::BufReader::new(f))
    }

    /// Builds a dataset directly from per-user item lists over `num_items`.
    pub fn from_lists(items: Vec<Vec<usize>>, num_items: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Data("dataset has no users".into()));
        }
        let mut counts = vec![0u64; num_items];
        let mut duplicates = 0;
        let items = items
            .into_iter()
            .map(|list| {
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::with_capacity(list.len());
                for a in list {
                    if a >= num_items {
                        return Err(Error::IndexOutOfRange {
                            what: "item",
                            index: a,
                            limit: num_items,
                        });
                    }
                    if seen.insert(a) {
                        counts[a] += 1;
                        out.push(a);
                    } else {
                        duplicates += 1;
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            user_ids: (0..items.len()).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|a| a.to_string()).collect(),
            items,
            counts,
            duplicates,
        })
    }
}

/// Per-user observed and hidden item lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSplit {
    pub num_items: usize,
    /// Dataset user index of each kept user.
    pub users: Vec<usize>,
    pub view: Vec<Vec<usize>>,
    /// Sorted for membership tests.
    pub hide: Vec<Vec<usize>>,
    /// Popularity counts `c_a` from the full dataset.
    pub counts: Vec<u64>,
    /// Users dropped for having fewer than two items.
    pub dropped: usize,
}

impl SessionSplit {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_hidden(&self, user: usize, item: usize) -> bool {
        self.hide[user].binary_search(&item).is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.users.len();
        if self.view.len() != n || self.hide.len() != n {
            return Err(Error::Data("split lists disagree on the number of users".into()));
        }
        if self.counts.len() != self.num_items {
            return Err(Error::Data("split popularity counts do not cover the catalog".into()));
        }
        for (u, (v, h)) in self.view.iter().zip(&self.hide).enumerate() {
            if v.is_empty() || h.is_empty() {
                return Err(Error::Data(format!("user {u} has an empty view or hide set")));
            }
            if !h.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Data(format!("user {u} hide set is not sorted and distinct")));
            }
            if let Some(&a) = v.iter().chain(h).find(|&&a| a >= self.num_items) {
                return Err(Error::IndexOutOfRange {
                    what: "item",
                    index: a,
                    limit: self.num_items,
                });
            }
            if v.iter().any(|a| h.binary_search(a).is_ok()) {
                return Err(Error::Data(format!("user {u} view and hide overlap")));
            }
        }
        Ok(())
    }
}

/// Hides `round(f · |I_u|)` items per user, clamped so both halves are
/// non-empty; users with fewer than two items are dropped.
pub fn split_sessions<R: Rng + ?Sized>(dataset: &InteractionDataset, hide_fraction: f64, rng: &mut R) -> Result<SessionSplit> {
    if !(hide_fraction > 0.0 && hide_fraction < 1.0) {
        return Err(Error::Config(format!("hide fraction must lie in (0, 1), got {hide_fraction}")));
    }
    if dataset.items.is_empty() {
        return Err(Error::Data("dataset has no users".into()));
    }
    let mut split = SessionSplit {
        num_items: dataset.num_items(),
        users: Vec::new(),
        view: Vec::new(),
        hide: Vec::new(),
        counts: dataset.counts.clone(),
        dropped: 0,
    };
    for (u, list) in dataset.items.iter().enumerate() {
        let n = list.len();
        if n < 2 {
            split.dropped += 1;
            continue;
        }
        let hide_n = ((hide_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut shuffled = list.clone();
        shuffled.shuffle(rng);
        let mut hide = shuffled.split_off(n - hide_n);
        hide.sort_unstable();
        split.users.push(u);
        split.view.push(shuffled);
        split.hide.push(hide);
    }
    if split.users.is_empty() {
        return Err(Error::Data("no user has at least two interactions".into()));
    }
    Ok(split)
}

/// Click weights: `w0` for no interaction and `wℓ` per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBiases {
    pub w0: f64,
    pub w: Vec<f64>,
}

impl SessionBiases {
    /// `w0 ~ N(3, 9)` redrawn until above 0.1; `wℓ` uniform on `{1, …, 16}`.
    pub fn sample<R: Rng + ?Sized>(k_max: usize, rng: &mut R) -> Self {
        let normal = Normal::new(W0_MEAN, W0_STD).expect("valid");
        let w0 = loop {
            let x: f64 = normal.sample(rng);
            if x > W0_FLOOR {
                break x;
            }
        };
        let w = (0..k_max).map(|_| rng.random_range(1..=W_MAX) as f64).collect();
        Self { w0, w }
    }

    /// The biases used by every session stage run with `seed`.
    pub fn for_seed(k_max: usize, seed: u64) -> Self {
        Self::sample(k_max, &mut stream_rng(mix_seed(seed, BIAS_LABEL), 0))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w0 > 0.0 && self.w0.is_finite()) || self.w.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("session weights must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Category probabilities `(p0, p1, …, pK)` for hit indicators `b`.
pub fn session_probabilities(hits: &[bool], biases: &SessionBiases) -> Result<Vec<f64>> {
    let k = hits.len();
    if k == 0 || k > biases.w.len() {
        return Err(Error::IndexOutOfRange {
            what: "slate size",
            index: k,
            limit: biases.w.len(),
        });
    }
    let base = biases.w0 * k as f64;
    let mut p = Vec::with_capacity(k + 1);
    p.push(base);
    p.extend(hits.iter().zip(&biases.w).map(|(&b, &w)| if b { w } else { 0.0 }));
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

/// Analytic success probability `Σ wℓ bℓ / (w0 K + Σ wℓ bℓ)`.
pub fn session_reward(hits: &[bool], biases: &SessionBiases) -> Result<f64> {
    let p = session_probabilities(hits, biases)?;
    Ok(p[1..].iter().sum())
}

pub fn session_feedback<R: Rng + ?Sized>(hits: &[bool], biases: &SessionBiases, rng: &mut R) -> Result<Feedback> {
    let p = session_probabilities(hits, biases)?;
    Feedback::from_outcome(sample_categorical(&p, rng)?, hits.len())
}

/// Multi-hot encoding of a view list in `d_z` dimensions. Items map to their
/// own coordinate when the catalog fits, otherwise to a fixed hashed bucket.
pub fn encode_view(view: &[usize], num_items: usize, interest_dim: usize) -> Vec<f64> {
    let mut z = vec![0.0; interest_dim];
    for &a in view {
        let slot = if num_items <= interest_dim {
            a
        } else {
            (mix_seed(a as u64, HASH_LABEL) % interest_dim as u64) as usize
        };
        z[slot] = 1.0;
    }
    z
}

/// Everything needed to simulate impressions for a split.
#[derive(Debug, Clone)]
pub struct SessionEnv {
    pub split: SessionSplit,
    pub biases: SessionBiases,
    pub k_max: usize,
    pub interest_dim: usize,
}

impl SessionEnv {
    pub fn new(split: SessionSplit, biases: SessionBiases, k_max: usize, interest_dim: usize) -> Result<Self> {
        split.validate()?;
        biases.validate()?;
        if k_max == 0 || k_max > split.num_items || biases.w.len() < k_max {
            return Err(Error::Config(format!(
                "k_max {k_max} must be positive, at most the catalog size {} and covered by the weights",
                split.num_items
            )));
        }
        if interest_dim == 0 {
            return Err(Error::Config("interest dimension must be positive".into()));
        }
        Ok(Self {
            split,
            biases,
            k_max,
            interest_dim,
        })
    }

    /// Model dimensions for the session setting: no engagement features.
    pub fn dims(&self, embedding_dim: usize) -> ModelDims {
        ModelDims {
            num_items: self.split.num_items,
            embedding_dim,
            engagement_dim: 0,
            interest_dim: self.interest_dim,
            k_max: self.k_max,
        }
    }

    pub fn context(&self, user: usize, slate_size: usize) -> Context {
        Context {
            y: Vec::new(),
            z: encode_view(&self.split.view[user], self.split.num_items, self.interest_dim),
            slate_size,
        }
    }

    pub fn hits(&self, user: usize, slate: &Slate) -> Vec<bool> {
        slate.items().iter().map(|&a| self.split.is_hidden(user, a)).collect()
    }

    /// Popularity logging policy with weights `c_a`.
    pub fn popularity_policy(&self) -> Result<PolicySpec> {
        PolicySpec::top_k_pop(self.split.counts.iter().map(|&c| c as f64).collect())
    }

    fn user_chunk(&self, seed: u64, chunk: usize, len: usize) -> Vec<(usize, Context)> {
        let mut rng = stream_rng(mix_seed(seed, USER_LABEL), chunk as u64);
        (0..len)
            .map(|_| {
                let u = rng.random_range(0..self.split.num_users());
                let k = rng.random_range(1..=self.k_max);
                (u, self.context(u, k))
            })
            .collect()
    }
}

/// PRR has no engagement features here, so the full model is the bias-only one.
pub fn session_variant(variant: Variant) -> Variant {
    match variant {
        Variant::Full => Variant::BiasOnly,
        v => v,
    }
}

/// Simulated session logs: uniform user, uniform slate size, slate from the
/// logging policy, feedback from the session click model.
pub fn generate_session_logs(env: &SessionEnv, policy: &PolicySpec, n: usize, seed: u64) -> Result<Vec<LogRecord>> {
    if policy.num_items != env.split.num_items {
        return Err(Error::Config(format!(
            "logging policy covers {} items, split has {}",
            policy.num_items, env.split.num_items
        )));
    }
    use rayon::prelude::*;
    let parts: Vec<Result<Vec<LogRecord>>> = chunks(n)
        .map(|(c, len)| {
            let users = env.user_chunk(seed, c, len);
            let mut rng = stream_rng(mix_seed(seed, LOG_LABEL), c as u64);
            users
                .into_iter()
                .map(|(u, context)| {
                    let drawn = sample_slate(policy, &context.z, context.slate_size, &mut rng)?;
                    let feedback = session_feedback(&env.hits(u, &drawn.slate), &env.biases, &mut rng)?;
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

/// Paired session A/B test recording the analytic success probability.
pub fn run_session_abtest(env: &SessionEnv, rules: &[&dyn DecisionRule], n_test: usize, seed: u64) -> Result<Vec<AbResult>> {
    let num_items = env.split.num_items;
    let rewards = paired_rewards(
        rules,
        n_test,
        seed,
        |c, len| env.user_chunk(seed, c, len),
        |u, ctx, slate| {
            check_rule_slate(slate, ctx, num_items)?;
            session_reward(&env.hits(u, slate), &env.biases)
        },
    )?;
    Ok(rewards.iter().map(|xs| AbResult::from_samples(xs)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn biases(w0: f64, w: &[f64]) -> SessionBiases {
        SessionBiases { w0, w: w.to_vec() }
    }

    #[test]
    fn probabilities_by_hand() {
        assert_eq!(session_probabilities(&[false, false], &biases(1.0, &[1.0, 1.0])).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(session_probabilities(&[true], &biases(1.0, &[1.0])).unwrap(), vec![0.5, 0.5]);
        let p = session_probabilities(&[true, true], &biases(2.0, &[4.0, 4.0])).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reward_grows_with_hits() {
        let b = biases(3.0, &[2.0, 5.0, 7.0]);
        let r0 = session_reward(&[false, false, false], &b).unwrap();
        let r1 = session_reward(&[false, true, false], &b).unwrap();
        let r2 = session_reward(&[false, true, true], &b).unwrap();
        assert!(r0 == 0.0 && r1 > r0 && r2 > r1);
    }

    #[test]
    fn biases_respect_support() {
        let mut rng = stream_rng(11, 0);
        for _ in 0..2000 {
            let b = SessionBiases::sample(8, &mut rng);
            assert!(b.w0 > W0_FLOOR);
            assert!(b.w.iter().all(|&w| (1.0..=16.0).contains(&w) && w.fract() == 0.0));
        }
        assert_eq!(SessionBiases::for_seed(4, 42), SessionBiases::for_seed(4, 42));
    }

    #[test]
    fn csv_ingestion_dedupes_and_orders() {
        let text = "user_id,item_id,timestamp\nu1,b,5\nu1,a,1\nu2,a,3\nu1,b,9\n";
        let ds = InteractionDataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.item_ids, vec!["b", "a"]);
        assert_eq!(ds.items[0], vec![1, 0]);
        assert_eq!(ds.counts, vec![1, 2]);
        assert_eq!(ds.duplicates, 1);
        let total: usize = ds.items.iter().map(Vec::len).sum();
        assert_eq!(total as u64, ds.counts.iter().sum::<u64>());
        assert!(InteractionDataset::from_csv_reader("u1\n".as_bytes()).is_err());
        assert!(InteractionDataset::from_csv_reader("".as_bytes()).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = InteractionDataset::from_lists(vec![vec![0, 1, 2, 3], vec![4], vec![1, 5]], 6).unwrap();
        let a = split_sessions(&ds, 0.5, &mut stream_rng(5, 0)).unwrap();
        let b = split_sessions(&ds, 0.5, &mut stream_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dropped, 1);
        assert_eq!(a.hide[0].len(), 2);
        assert_eq!(a.hide[1].len(), 1);
        a.validate().unwrap();
    }

    #[test]
    fn hashed_encoding_is_fixed_width() {
        let z = encode_view(&[0, 7, 999], 1000, 16);
        assert_eq!(z.len(), 16);
        assert!(z.iter().all(|&x| x == 0.0 || x == 1.0));
        assert_eq!(encode_view(&[2], 4, 8), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
