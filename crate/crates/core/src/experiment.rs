//! Experiment orchestration: the TOML configuration, the method registry,
//! grid sweeps with resumable CSV output, the training-time benchmark and
//! SVG plots of both result tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decision::{DecisionMode, DecisionRule, IndexKind, PolicyRecommender, PrrRecommender, SamplingRule};
use crate::environment::{build_oracle, generate_logs, run_abtest, AbResult, LoggingPolicy, OracleConfig, OracleEnv};
use crate::numeric::mix_seed;
use crate::policy::{PolicySpec, SoftmaxPolicyParams};
use crate::training::{train_policy, train_prr, EpochStats, PolicyDims, PolicyObjective, TrainConfig};
use crate::types::{LogRecord, ModelDims, ModelParams, Variant};
use crate::{Error, Result};

/// A recommender that can be trained from logs and put into an A/B test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Prr(Variant),
    Policy(PolicyObjective),
    /// The logging policy itself.
    Logging,
    /// Decisions from the true parameters (synthetic runs only).
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Prr(v) => v.name(),
            Method::Policy(o) => o.name(),
            Method::Logging => "logging",
            Method::Oracle => "oracle",
        }
    }

    /// The methods compared in the main experiment.
    pub fn standard() -> Vec<Method> {
        let mut m: Vec<Method> = Variant::ALL.iter().map(|&v| Method::Prr(v)).collect();
        m.extend([PolicyObjective::Ips, PolicyObjective::Iips, PolicyObjective::TopKIips].map(Method::Policy));
        m
    }

    pub fn is_trained(self) -> bool {
        matches!(self, Method::Prr(_) | Method::Policy(_))
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logging" => return Ok(Method::Logging),
            "oracle" => return Ok(Method::Oracle),
            _ => {}
        }
        if let Ok(v) = Variant::from_str(s) {
            return Ok(Method::Prr(v));
        }
        [PolicyObjective::Ips, PolicyObjective::Iips, PolicyObjective::TopKIips]
            .into_iter()
            .find(|o| o.name() == s)
            .map(Method::Policy)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Method::from_str(&s).map_err(serde::de::Error::custom)
    }
}

/// Retrieval backend as written in configs: `exact` or `approx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub approx: bool,
    pub recall: f64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            approx: false,
            recall: 0.95,
        }
    }
}

impl IndexConfig {
    pub fn kind(&self) -> IndexKind {
        if self.approx {
            IndexKind::Approx { recall: self.recall }
        } else {
            IndexKind::Exact
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingSection {
    pub policies: Vec<LoggingPolicy>,
}

impl Default for LoggingSection {
    fn default() -> Self {
        Self {
            policies: vec![LoggingPolicy::Uniform, LoggingPolicy::TopKPop],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub prr: TrainConfig,
    pub policy: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            prr: TrainConfig::default(),
            policy: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Learned embedding dimension; defaults to the oracle's.
    pub embedding_dim: Option<usize>,
    pub index: IndexConfig,
    pub policy_decision: DecisionMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embedding_dim: None,
            index: IndexConfig::default(),
            policy_decision: DecisionMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub num_items: Vec<usize>,
    pub k_max: Vec<usize>,
    pub n_train: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            num_items: vec![1000],
            k_max: vec![2, 8],
            n_train: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AbTestSection {
    pub n_test: usize,
}

impl Default for AbTestSection {
    fn default() -> Self {
        Self { n_test: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub num_items: Vec<usize>,
    pub n: usize,
    pub k_max: usize,
    pub epochs: usize,
    pub methods: Vec<Method>,
    pub logging: LoggingPolicy,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            num_items: vec![1000, 2000, 4000, 8000],
            n: 20_000,
            k_max: 4,
            epochs: 3,
            methods: vec![
                Method::Prr(Variant::Full),
                Method::Prr(Variant::RankOnly),
                Method::Policy(PolicyObjective::Ips),
            ],
            logging: LoggingPolicy::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSection {
    pub hide_fraction: f64,
    pub k_max: usize,
    /// `d_z`; views are hashed into this many slots when the catalog is larger.
    pub interest_dim: usize,
    pub embedding_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SessionSection {
    fn default() -> Self {
        Self {
            hide_fraction: 0.5,
            k_max: 8,
            interest_dim: 256,
            embedding_dim: 16,
            n_train: 100_000,
            n_test: 100_000,
        }
    }
}

/// Whole-run configuration; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub oracle: OracleConfig,
    pub logging_policy: LoggingSection,
    pub train: TrainSection,
    pub model: ModelSection,
    pub methods: Vec<Method>,
    pub sweep: SweepSection,
    pub abtest: AbTestSection,
    pub bench: BenchSection,
    pub session: SessionSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            oracle: OracleConfig::default(),
            logging_policy: LoggingSection::default(),
            train: TrainSection::default(),
            model: ModelSection::default(),
            methods: Method::standard(),
            sweep: SweepSection::default(),
            abtest: AbTestSection::default(),
            bench: BenchSection::default(),
            session: SessionSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.train.prr.validate()?;
        self.train.policy.validate()?;
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        let unique: HashSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::Config("methods list has duplicates".into()));
        }
        if self.logging_policy.policies.is_empty() {
            return Err(Error::Config("no logging policies configured".into()));
        }
        let s = &self.sweep;
        if s.num_items.is_empty() || s.k_max.is_empty() || s.n_train == 0 {
            return Err(Error::Config("sweep grid and n_train must be non-empty".into()));
        }
        for &p in &s.num_items {
            for &k in &s.k_max {
                OracleConfig {
                    num_items: p,
                    k_max: k,
                    ..self.oracle
                }
                .validate()?;
            }
        }
        if self.abtest.n_test == 0 {
            return Err(Error::Config("abtest.n_test must be positive".into()));
        }
        if self.model.embedding_dim == Some(0) {
            return Err(Error::Config("model.embedding_dim must be positive".into()));
        }
        let r = self.model.index.recall;
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config("model.index.recall must lie in (0, 1]".into()));
        }
        let b = &self.bench;
        if b.num_items.is_empty() || b.n == 0 || b.epochs == 0 || b.k_max == 0 || b.methods.is_empty() {
            return Err(Error::Config("bench grid, n, k_max, epochs and methods must be non-empty".into()));
        }
        if b.methods.iter().any(|m| !m.is_trained()) {
            return Err(Error::Config("bench methods must be trainable".into()));
        }
        let ss = &self.session;
        if !(ss.hide_fraction > 0.0 && ss.hide_fraction < 1.0) {
            return Err(Error::Config("session.hide_fraction must lie in (0, 1)".into()));
        }
        if ss.k_max == 0 || ss.interest_dim == 0 || ss.embedding_dim == 0 || ss.n_train == 0 || ss.n_test == 0 {
            return Err(Error::Config("session sizes must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash of the canonical configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn embedding_dim(&self) -> usize {
        self.model.embedding_dim.unwrap_or(self.oracle.embedding_dim)
    }
}

/// A trained (or fixed) decision maker.
#[derive(Debug, Clone)]
pub enum Fitted {
    Prr(ModelParams),
    Policy(SoftmaxPolicyParams),
    Logging(PolicySpec),
}

pub struct FitOutcome {
    pub fitted: Fitted,
    pub trace: Vec<EpochStats>,
    pub wall_ms: f64,
    pub num_records: usize,
}

/// Trains `method` on `logs`. `Oracle` needs the environment and is handled
/// by the caller.
pub fn fit_method(
    method: Method,
    logs: &[LogRecord],
    dims: ModelDims,
    train: &TrainSection,
    logging: &PolicySpec,
    seed: u64,
) -> Result<FitOutcome> {
    let start = Instant::now();
    let (fitted, trace, num_records) = match method {
        Method::Prr(v) => {
            let cfg = TrainConfig { seed, ..train.prr };
            let m = train_prr(logs, dims, v, &cfg)?;
            (Fitted::Prr(m.params), m.trace, m.num_records)
        }
        Method::Policy(o) => {
            let cfg = TrainConfig { seed, ..train.policy };
            let pd = PolicyDims {
                num_items: dims.num_items,
                embedding_dim: dims.embedding_dim,
                interest_dim: dims.interest_dim,
            };
            let m = train_policy(logs, pd, o, &cfg)?;
            (Fitted::Policy(m.params), m.trace, m.num_records)
        }
        Method::Logging => (Fitted::Logging(logging.clone()), Vec::new(), 0),
        Method::Oracle => return Err(Error::Config("the oracle method is not trainable".into())),
    };
    Ok(FitOutcome {
        fitted,
        trace,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        num_records,
    })
}

/// Wraps a fitted method as an A/B-test rule.
pub fn decision_rule(fitted: Fitted, model: &ModelSection, k_max: usize, seed: u64) -> Result<Box<dyn DecisionRule>> {
    Ok(match fitted {
        Fitted::Prr(p) => Box::new(PrrRecommender::new(p, model.index.kind(), seed)?),
        Fitted::Policy(p) => Box::new(PolicyRecommender::new(
            p,
            model.index.kind(),
            model.policy_decision,
            k_max,
            seed,
        )?),
        Fitted::Logging(spec) => Box::new(SamplingRule(spec)),
    })
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config_hash: String,
    pub seed: u64,
    pub cell: String,
    pub logging: String,
    pub num_items: usize,
    pub k_max: usize,
    pub method: String,
    pub status: String,
    pub mean: Option<f64>,
    pub std_err: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub train_wall_ms: f64,
}

/// One grid point of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub logging: LoggingPolicy,
    pub num_items: usize,
    pub k_max: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}-P{}-K{}", self.logging.name(), self.num_items, self.k_max)
    }
}

pub fn sweep_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &logging in &cfg.logging_policy.policies {
        for &num_items in &cfg.sweep.num_items {
            for &k_max in &cfg.sweep.k_max {
                cells.push(Cell {
                    logging,
                    num_items,
                    k_max,
                });
            }
        }
    }
    cells
}

/// Seeds shared by every logging policy at the same `(P, K_max)`, so the
/// two logging rows of Fig.-2-style plots face the same oracle and test users.
fn grid_seed(seed: u64, cell: &Cell, label: u64) -> u64 {
    mix_seed(mix_seed(mix_seed(seed, label), cell.num_items as u64), cell.k_max as u64)
}

const LOG_SEED: u64 = 1;
const TEST_SEED: u64 = 2;
const TRAIN_SEED: u64 = 3;

fn method_seed(seed: u64, method: Method) -> u64 {
    let label = method.name().bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    mix_seed(mix_seed(seed, TRAIN_SEED), label)
}

/// Runs one cell end to end. Failures are reported per row, never raised.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Vec<SweepRow> {
    let hash = cfg.hash();
    let row = |method: Method, status: String, res: Option<AbResult>, wall: f64| SweepRow {
        config_hash: hash.clone(),
        seed: cfg.seed,
        cell: cell.id(),
        logging: cell.logging.name().into(),
        num_items: cell.num_items,
        k_max: cell.k_max,
        method: method.name().into(),
        status,
        mean: res.map(|r| r.mean),
        std_err: res.map(|r| r.std_err),
        ci_low: res.map(|r| r.ci_low),
        ci_high: res.map(|r| r.ci_high),
        n_train: cfg.sweep.n_train,
        n_test: cfg.abtest.n_test,
        train_wall_ms: wall,
    };
    let fail_all = |e: Error| -> Vec<SweepRow> {
        cfg.methods.iter().map(|&m| row(m, format!("failed: {e}"), None, 0.0)).collect()
    };

    let oracle_cfg = OracleConfig {
        num_items: cell.num_items,
        k_max: cell.k_max,
        ..cfg.oracle
    };
    let setup = (|| -> Result<(OracleEnv, PolicySpec, Vec<LogRecord>)> {
        let env = build_oracle(&oracle_cfg)?;
        let logging = env.logging_policy(cell.logging)?;
        let logs = generate_logs(&env, &logging, cfg.sweep.n_train, grid_seed(cfg.seed, cell, LOG_SEED))?;
        Ok((env, logging, logs))
    })();
    let (env, logging, logs) = match setup {
        Ok(x) => x,
        Err(e) => return fail_all(e),
    };
    let dims = ModelDims {
        embedding_dim: cfg.embedding_dim(),
        ..env.dims()
    };

    let fits: Vec<(Method, Result<(Box<dyn DecisionRule>, f64)>)> = cfg
        .methods
        .par_iter()
        .map(|&m| {
            let out = if m == Method::Oracle {
                PrrRecommender::new(env.params.clone(), cfg.model.index.kind(), cfg.seed)
                    .map(|r| (Box::new(r) as Box<dyn DecisionRule>, 0.0))
            } else {
                fit_method(m, &logs, dims, &cfg.train, &logging, method_seed(cfg.seed, m)).and_then(|f| {
                    decision_rule(f.fitted, &cfg.model, cell.k_max, cfg.seed).map(|r| (r, f.wall_ms))
                })
            };
            (m, out)
        })
        .collect();

    let mut rules: Vec<&dyn DecisionRule> = Vec::new();
    let mut slots = Vec::new();
    for (i, (_, fit)) in fits.iter().enumerate() {
        if let Ok((rule, _)) = fit {
            rules.push(rule.as_ref());
            slots.push(i);
        }
    }
    let ab = run_abtest(&env, &rules, cfg.abtest.n_test, grid_seed(cfg.seed, cell, TEST_SEED));
    let mut results: Vec<Option<std::result::Result<AbResult, String>>> = vec![None; fits.len()];
    match ab {
        Ok(res) => {
            for (slot, r) in slots.into_iter().zip(res) {
                results[slot] = Some(Ok(r));
            }
        }
        Err(e) => {
            for slot in slots {
                results[slot] = Some(Err(e.to_string()));
            }
        }
    }
    fits.iter()
        .zip(results)
        .map(|((m, fit), res)| match (fit, res) {
            (Err(e), _) => row(*m, format!("failed: {e}"), None, 0.0),
            (Ok((_, wall)), Some(Ok(r))) => row(*m, "ok".into(), Some(r), *wall),
            (Ok((_, wall)), Some(Err(e))) => row(*m, format!("failed: {e}"), None, *wall),
            (Ok((_, wall)), None) => row(*m, "failed: not evaluated".into(), None, *wall),
        })
        .collect()
}

pub fn read_sweep_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Runs every cell not already present in `out` for this configuration and
/// appends its rows. Returns the rows produced by this call.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path, on_cell: &mut dyn FnMut(&Cell, &[SweepRow])) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let existing = if out.exists() { read_sweep_rows(out)? } else { Vec::new() };
    let done: HashSet<String> = existing
        .iter()
        .filter(|r| r.config_hash == hash && r.seed == cfg.seed)
        .map(|r| r.cell.clone())
        .collect();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out)
        .map_err(|e| Error::io(out, e))?;
    let mut wtr = csv::WriterBuilder::new().has_headers(existing.is_empty()).from_writer(file);
    let mut produced = Vec::new();
    for cell in sweep_cells(cfg) {
        if done.contains(&cell.id()) {
            continue;
        }
        let rows = run_cell(cfg, &cell);
        for r in &rows {
            wtr.serialize(r)?;
        }
        wtr.flush().map_err(|e| Error::io(out, e))?;
        on_cell(&cell, &rows);
        produced.extend(rows);
    }
    Ok(produced)
}

/// One timed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config_hash: String,
    pub seed: u64,
    pub num_items: usize,
    pub method: String,
    pub epoch: usize,
    pub n_records: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Least-squares fit of mean epoch time against catalog size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub method: String,
    pub slope_ms_per_item: f64,
    pub slope_std_err: f64,
    pub intercept_ms: f64,
    pub r2: f64,
    pub mean_epoch_ms: f64,
    pub total_ms: f64,
}

/// Ordinary least squares `y = a + b x`; returns `(a, b, se(b), R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - b * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let se = if xs.len() > 2 && sxx > 0.0 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (a, b, se, r2)
}

/// Fits every epoch time (not per-P means) so the slope error reflects
/// epoch-to-epoch noise.
pub fn summarize_bench(rows: &[BenchRow]) -> Vec<BenchSummary> {
    let mut by_method: BTreeMap<&str, Vec<&BenchRow>> = BTreeMap::new();
    for r in rows {
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|m| {
            let rs = &by_method[m];
            let xs: Vec<f64> = rs.iter().map(|r| r.num_items as f64).collect();
            let ys: Vec<f64> = rs.iter().map(|r| r.wall_ms).collect();
            let (a, b, se, r2) = linear_fit(&xs, &ys);
            BenchSummary {
                method: m.to_string(),
                slope_ms_per_item: b,
                slope_std_err: se,
                intercept_ms: a,
                r2,
                mean_epoch_ms: ys.iter().sum::<f64>() / ys.len() as f64,
                total_ms: ys.iter().sum(),
            }
        })
        .collect()
}

/// Times training epochs of each bench method across catalog sizes with
/// `n`, `K_max` and `d` held fixed. Runs sequentially so timings do not
/// interfere.
pub fn run_bench(cfg: &ExperimentConfig, on_row: &mut dyn FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let b = &cfg.bench;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    for &p in &b.num_items {
        let oracle_cfg = OracleConfig {
            num_items: p,
            k_max: b.k_max,
            ..cfg.oracle
        };
        let env = build_oracle(&oracle_cfg)?;
        let logging = env.logging_policy(b.logging)?;
        let logs = generate_logs(&env, &logging, b.n, mix_seed(cfg.seed, LOG_SEED))?;
        let dims = ModelDims {
            embedding_dim: cfg.embedding_dim(),
            ..env.dims()
        };
        let train = TrainSection {
            prr: TrainConfig {
                epochs: b.epochs,
                ..cfg.train.prr
            },
            policy: TrainConfig {
                epochs: b.epochs,
                ..cfg.train.policy
            },
        };
        for &m in &b.methods {
            let fit = fit_method(m, &logs, dims, &train, &logging, method_seed(cfg.seed, m))?;
            for e in &fit.trace {
                let row = BenchRow {
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                    num_items: p,
                    method: m.name().into(),
                    epoch: e.epoch,
                    n_records: fit.num_records,
                    loss: e.loss,
                    wall_ms: e.wall_ms,
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// A/B results written by the standalone `abtest` commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbRow {
    pub seed: u64,
    pub rule: String,
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_test: usize,
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Panel {
    title: String,
    x_label: String,
    y_label: String,
    series: Vec<Series>,
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn render_svg(panels: &[Panel]) -> String {
    let (pw, ph) = (360.0, 260.0);
    let cols = panels.len().clamp(1, 3);
    let rows = panels.len().div_ceil(cols).max(1);
    let legend_h = 24.0;
    let width = pw * cols as f64;
    let height = ph * rows as f64 + legend_h;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let mut labels: Vec<&str> = Vec::new();
    for p in panels {
        for s in &p.series {
            if !labels.contains(&s.label.as_str()) {
                labels.push(&s.label);
            }
        }
    }
    let color = |l: &str| PALETTE[labels.iter().position(|x| *x == l).unwrap_or(0) % PALETTE.len()];
    for (i, p) in panels.iter().enumerate() {
        let ox = pw * (i % cols) as f64;
        let oy = ph * (i / cols) as f64;
        let (l, r, t, b) = (ox + 55.0, ox + pw - 15.0, oy + 25.0, oy + ph - 40.0);
        let pts: Vec<(f64, f64)> = p.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        let (x0, x1) = nice_range(
            pts.iter().map(|q| q.0).fold(f64::INFINITY, f64::min),
            pts.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = nice_range(
            pts.iter().map(|q| q.1).fold(f64::INFINITY, f64::min),
            pts.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max),
        );
        let sx = |x: f64| l + (x - x0) / (x1 - x0) * (r - l);
        let sy = |y: f64| b - (y - y0) / (y1 - y0) * (b - t);
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, oy + 15.0, p.title);
        let _ = writeln!(svg, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, r - l, b - t);
        for k in 0..=4 {
            let fy = y0 + (y1 - y0) * k as f64 / 4.0;
            let fx = x0 + (x1 - x0) * k as f64 / 4.0;
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, l - 4.0, sy(fy) + 4.0, fy);
            let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{:.4}</text>"#, sx(fx), b + 14.0, fx);
        }
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + r) / 2.0, b + 30.0, p.x_label);
        let _ = writeln!(
            svg,
            r#"<text transform="translate({},{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            ox + 12.0,
            (t + b) / 2.0,
            p.y_label
        );
        for s in &p.series {
            let c = color(&s.label);
            let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(svg, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
            for &(x, y) in &s.points {
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, sx(x), sy(y));
            }
        }
    }
    let ly = ph * rows as f64 + 14.0;
    for (i, lab) in labels.iter().enumerate() {
        let lx = 10.0 + 100.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{}"/>"#, ly - 9.0, color(lab));
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{lab}</text>"#, lx + 14.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// One panel per (logging policy, catalog size): reward against `K_max`.
pub fn plot_sweep(rows: &[SweepRow]) -> String {
    let mut panels: Vec<Panel> = Vec::new();
    for r in rows.iter().filter(|r| r.status == "ok") {
        let title = format!("{} logging, P = {}", r.logging, r.num_items);
        let idx = match panels.iter().position(|p| p.title == title) {
            Some(i) => i,
            None => {
                panels.push(Panel {
                    title,
                    x_label: "max slate size".into(),
                    y_label: "A/B reward".into(),
                    series: Vec::new(),
                });
                panels.len() - 1
            }
        };
        let panel = &mut panels[idx];
        let s = match panel.series.iter().position(|s| s.label == r.method) {
            Some(i) => i,
            None => {
                panel.series.push(Series {
                    label: r.method.clone(),
                    points: Vec::new(),
                });
                panel.series.len() - 1
            }
        };
        panel.series[s].points.push((r.k_max as f64, r.mean.unwrap_or(f64::NAN)));
    }
    for p in &mut panels {
        for s in &mut p.series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
    }
    render_svg(&panels)
}

/// Mean epoch time against catalog size, one line per method.
pub fn plot_bench(rows: &[BenchRow]) -> String {
    let mut series: Vec<Series> = Vec::new();
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry((r.method.clone(), r.num_items)).or_insert((0.0, 0));
        e.0 += r.wall_ms;
        e.1 += 1;
    }
    for ((m, p), (sum, n)) in acc {
        let point = (p as f64, sum / n as f64);
        match series.iter_mut().find(|s| s.label == m) {
            Some(s) => s.points.push(point),
            None => series.push(Series {
                label: m,
                points: vec![point],
            }),
        }
    }
    render_svg(&[Panel {
        title: "training time per epoch".into(),
        x_label: "number of items".into(),
        y_label: "ms".into(),
        series,
    }])
}
