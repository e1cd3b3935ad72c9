use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slate_lab::decision::{DecisionMode, DecisionRule, IndexKind, PolicyRecommender, PrrRecommender, SamplingRule};
use slate_lab::environment::{build_oracle, generate_logs, run_abtest, AbResult, LoggingPolicy, OracleEnv};
use slate_lab::error::ErrorClass;
use slate_lab::experiment::{
    decision_rule, plot_bench, plot_sweep, read_csv, run_bench, run_sweep, summarize_bench, write_csv,
    AbRow, BenchRow, ExperimentConfig, Fitted, Method, SweepRow,
};
use slate_lab::io::{
    load_artifact, load_split, read_contexts, read_logs, save_artifact, save_split, write_logs, write_slates, Artifact,
};
use slate_lab::numeric::{mix_seed, stream_rng};
use slate_lab::policy::PolicySpec;
use slate_lab::session::{
    generate_session_logs, run_session_abtest, session_variant, split_sessions, InteractionDataset, SessionBiases,
    SessionEnv,
};
use slate_lab::training::{train_policy_with, train_prr_with, EpochStats, PolicyDims, TrainConfig};
use slate_lab::{Error, LogRecord, ModelDims, Result};

const THREADS_VAR: &str = "SLATE_LAB_THREADS";

#[derive(Parser)]
#[command(name = "slate-lab", version, about = "Slate recommendation experiments with PRR and IPS-family baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every subcommand accepts.
#[derive(Args, Clone)]
struct Common {
    /// Run seed; overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexArg {
    Exact,
    Approx,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Sample,
}

impl From<ModeArg> for DecisionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Greedy => DecisionMode::Greedy,
            ModeArg::Sample => DecisionMode::Sample,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic oracle and simulate logged impressions.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "uniform")]
        policy: String,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        /// Where to store the oracle; defaults to `<out>.oracle.bin`.
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Fit a PRR variant or an IPS-family policy on logged data.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        logs: PathBuf,
        /// prr, prr-reward, prr-rank, prr-bias, ips, iips or topk-iips.
        #[arg(long, default_value = "prr")]
        method: String,
        /// Oracle file giving the catalog size.
        #[arg(long, conflicts_with = "split")]
        env: Option<PathBuf>,
        /// Session split giving the catalog size; selects the session setting.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Loss trace CSV (`epoch,loss,wall_ms`).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write `<out>.epoch<N>` every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Build slates for a file of contexts.
    Decide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        contexts: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        index: IndexArg,
        #[arg(long, default_value_t = 0.95)]
        recall: f64,
        /// Decision mode for softmax policies.
        #[arg(long, value_enum, default_value = "sample")]
        mode: ModeArg,
    },
    /// Paired A/B test of models against the synthetic oracle.
    Abtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: PathBuf,
        /// Comma-separated model files; `oracle`, `uniform` and `topkpop`
        /// name built-in rules.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, default_value_t = 100_000)]
        n: usize,
    },
    /// Split an interaction log into observed and hidden halves.
    SessionPrep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        hide: Option<f64>,
    },
    /// Simulate session-completion logs under popularity logging.
    SessionGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Paired session-completion A/B test.
    SessionAbtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: PathBuf,
        /// Comma-separated model files; `popularity` and `uniform` name
        /// built-in rules.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the configured grid of synthetic experiments (resumable).
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Time training epochs against catalog size.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Regression summary CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Render a sweep or bench CSV as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
        ErrorClass::Io => 5,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic { common, policy, n, env } => gen_synthetic(&common, &policy, n, env),
        Command::Train {
            common,
            logs,
            method,
            env,
            split,
            trace,
            checkpoint_every,
        } => train(&common, &logs, &method, env, split, trace, checkpoint_every),
        Command::Decide {
            common,
            model,
            contexts,
            index,
            recall,
            mode,
        } => decide(&common, &model, &contexts, index, recall, mode),
        Command::Abtest { common, env, models, n } => abtest(&common, &env, &models, n),
        Command::SessionPrep { common, input, hide } => session_prep(&common, &input, hide),
        Command::SessionGen { common, split, n } => session_gen(&common, &split, n),
        Command::SessionAbtest {
            common,
            split,
            models,
            n,
        } => session_abtest(&common, &split, &models, n),
        Command::Sweep { common } => sweep(&common),
        Command::Bench { common, summary } => bench(&common, summary),
        Command::Plot { common, input } => plot(&common, &input),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_synthetic(common: &Common, policy: &str, n: usize, env_out: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let kind: LoggingPolicy = policy.parse()?;
    if n == 0 {
        return Err(Error::Config("--n must be positive".into()));
    }
    let env = build_oracle(&cfg.oracle)?;
    let logs = generate_logs(&env, &env.logging_policy(kind)?, n, cfg.seed)?;
    write_logs(&common.out, &logs)?;
    let env_path = env_out.unwrap_or_else(|| with_suffix(&common.out, ".oracle.bin"));
    save_artifact(&env_path, &Artifact::Oracle(env))?;
    let clicks = logs.iter().filter(|r| r.feedback.is_success()).count();
    println!(
        "wrote {n} records ({:.4} click rate) to {} and the oracle to {}",
        clicks as f64 / n as f64,
        common.out.display(),
        env_path.display()
    );
    Ok(())
}

/// Model shape for a set of logs: catalog size from the oracle or split,
/// feature sizes from the records.
fn infer_dims(logs: &[LogRecord], num_items: usize, embedding_dim: usize, k_max: usize) -> Result<ModelDims> {
    let first = logs.first().ok_or_else(|| Error::Data("no training records".into()))?;
    let observed_k = logs.iter().map(|r| r.slate.len()).max().unwrap_or(1);
    Ok(ModelDims {
        num_items,
        embedding_dim,
        engagement_dim: first.context.y.len(),
        interest_dim: first.context.z.len(),
        k_max: k_max.max(observed_k),
    })
}

fn train(
    common: &Common,
    logs_path: &Path,
    method: &str,
    env: Option<PathBuf>,
    split: Option<PathBuf>,
    trace_path: Option<PathBuf>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    let cfg = common.load()?;
    let mut method: Method = method.parse()?;
    if !method.is_trained() {
        return Err(Error::Config(format!("method {method} cannot be trained")));
    }
    let logs = read_logs(logs_path)?;
    let dims = match (&env, &split) {
        (Some(p), _) => {
            let oracle = load_artifact(p)?.into_oracle()?;
            let emb = cfg.model.embedding_dim.unwrap_or(oracle.config.embedding_dim);
            infer_dims(&logs, oracle.config.num_items, emb, oracle.config.k_max)?
        }
        (None, Some(p)) => {
            let s = load_split(p)?;
            if let Method::Prr(v) = method {
                method = Method::Prr(session_variant(v));
            }
            infer_dims(&logs, s.num_items, cfg.session.embedding_dim, cfg.session.k_max)?
        }
        (None, None) => {
            let emb = cfg.model.embedding_dim.unwrap_or(cfg.oracle.embedding_dim);
            infer_dims(&logs, cfg.oracle.num_items, emb, cfg.oracle.k_max)?
        }
    };
    if checkpoint_every == Some(0) {
        return Err(Error::Config("--checkpoint-every must be positive".into()));
    }
    let mut trace_rows: Vec<EpochStats> = Vec::new();
    let out = common.out.clone();
    let mut on_epoch = |e: &EpochStats, artifact: &dyn Fn() -> Artifact| -> Result<()> {
        println!("epoch {:>4}  loss {:.6}  {:.1} ms", e.epoch, e.loss, e.wall_ms);
        trace_rows.push(e.clone());
        if let Some(k) = checkpoint_every {
            if (e.epoch + 1) % k == 0 {
                save_artifact(&with_suffix(&out, &format!(".epoch{}", e.epoch + 1)), &artifact())?;
            }
        }
        Ok(())
    };
    let artifact = match method {
        Method::Prr(v) => {
            let tc = TrainConfig { seed: cfg.seed, ..cfg.train.prr };
            let m = train_prr_with(&logs, dims, v, &tc, &mut |e, p| on_epoch(e, &|| Artifact::Model(p.clone())))?;
            Artifact::Model(m.params)
        }
        Method::Policy(o) => {
            let tc = TrainConfig { seed: cfg.seed, ..cfg.train.policy };
            let pd = PolicyDims {
                num_items: dims.num_items,
                embedding_dim: dims.embedding_dim,
                interest_dim: dims.interest_dim,
            };
            let m = train_policy_with(&logs, pd, o, &tc, &mut |e, p| on_epoch(e, &|| Artifact::Policy(p.clone())))?;
            Artifact::Policy(m.params)
        }
        _ => unreachable!("checked above"),
    };
    save_artifact(&common.out, &artifact)?;
    if let Some(t) = trace_path {
        write_csv(&t, &trace_rows)?;
    }
    println!("saved {method} to {}", common.out.display());
    Ok(())
}

fn decide(common: &Common, model: &Path, contexts: &Path, index: IndexArg, recall: f64, mode: ModeArg) -> Result<()> {
    let cfg = common.load()?;
    let kind = match index {
        IndexArg::Exact => IndexKind::Exact,
        IndexArg::Approx => IndexKind::Approx { recall },
    };
    let ctxs = read_contexts(contexts)?;
    let k_max = ctxs.iter().map(|c| c.slate_size).max().unwrap_or(1);
    let mut rng = stream_rng(cfg.seed, 0);
    let slates = match load_artifact(model)? {
        Artifact::Model(p) => {
            let rec = PrrRecommender::new(p, kind, cfg.seed)?;
            ctxs.iter().map(|c| rec.recommend(c)).collect::<Result<Vec<_>>>()?
        }
        Artifact::Policy(p) => {
            let rec = PolicyRecommender::new(p, kind, mode.into(), k_max, cfg.seed)?;
            ctxs.iter().map(|c| rec.recommend(c, &mut rng)).collect::<Result<Vec<_>>>()?
        }
        Artifact::Oracle(_) => return Err(Error::Data("decide needs a model or policy file, not an oracle".into())),
    };
    write_slates(&common.out, &slates)?;
    println!("wrote {} slates to {}", slates.len(), common.out.display());
    Ok(())
}

fn rule_name(spec: &str) -> String {
    Path::new(spec)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string())
}

fn load_rule(spec: &str, cfg: &ExperimentConfig, k_max: usize) -> Result<Box<dyn DecisionRule>> {
    let fitted = match load_artifact(Path::new(spec))? {
        Artifact::Model(p) => Fitted::Prr(p),
        Artifact::Policy(p) => Fitted::Policy(p),
        Artifact::Oracle(e) => Fitted::Prr(e.params),
    };
    decision_rule(fitted, &cfg.model, k_max, cfg.seed)
}

fn write_ab(out: &Path, seed: u64, names: &[String], results: &[AbResult]) -> Result<()> {
    let rows: Vec<AbRow> = names
        .iter()
        .zip(results)
        .map(|(name, r)| AbRow {
            seed,
            rule: name.clone(),
            mean: r.mean,
            std_err: r.std_err,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_test: r.n,
        })
        .collect();
    for r in &rows {
        println!("{:<16} {:.6} ± {:.6}", r.rule, r.mean, 1.96 * r.std_err);
    }
    write_csv(out, &rows)
}

fn abtest(common: &Common, env_path: &Path, models: &[String], n: usize) -> Result<()> {
    let cfg = common.load()?;
    if models.is_empty() || n == 0 {
        return Err(Error::Config("need at least one model and a positive --n".into()));
    }
    let env: OracleEnv = load_artifact(env_path)?.into_oracle()?;
    let k_max = env.config.k_max;
    let rules = models
        .iter()
        .map(|m| -> Result<Box<dyn DecisionRule>> {
            match m.as_str() {
                "oracle" => Ok(Box::new(PrrRecommender::new(env.params.clone(), cfg.model.index.kind(), cfg.seed)?)),
                "uniform" | "topkpop" => Ok(Box::new(SamplingRule(env.logging_policy(m.parse()?)?))),
                path => load_rule(path, &cfg, k_max),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn DecisionRule> = rules.iter().map(|r| r.as_ref()).collect();
    let res = run_abtest(&env, &refs, n, mix_seed(cfg.seed, 2))?;
    let names: Vec<String> = models.iter().map(|m| rule_name(m)).collect();
    write_ab(&common.out, cfg.seed, &names, &res)
}

fn session_prep(common: &Common, input: &Path, hide: Option<f64>) -> Result<()> {
    let cfg = common.load()?;
    let ds = InteractionDataset::from_csv(input)?;
    let frac = hide.unwrap_or(cfg.session.hide_fraction);
    let split = split_sessions(&ds, frac, &mut stream_rng(cfg.seed, 0))?;
    save_split(&common.out, &split)?;
    println!(
        "{} users kept, {} dropped, {} items, {} duplicate rows ignored; split written to {}",
        split.num_users(),
        split.dropped,
        split.num_items,
        ds.duplicates,
        common.out.display()
    );
    Ok(())
}

fn session_env(cfg: &ExperimentConfig, split: &Path) -> Result<SessionEnv> {
    let split = load_split(split)?;
    let k_max = cfg.session.k_max;
    SessionEnv::new(split, SessionBiases::for_seed(k_max, cfg.seed), k_max, cfg.session.interest_dim)
}

fn session_gen(common: &Common, split: &Path, n: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    let env = session_env(&cfg, split)?;
    let n = n.unwrap_or(cfg.session.n_train);
    let logs = generate_session_logs(&env, &env.popularity_policy()?, n, mix_seed(cfg.seed, 1))?;
    write_logs(&common.out, &logs)?;
    let clicks = logs.iter().filter(|r| r.feedback.is_success()).count();
    println!(
        "wrote {n} session records ({:.4} success rate, w0 = {:.3}) to {}",
        clicks as f64 / n.max(1) as f64,
        env.biases.w0,
        common.out.display()
    );
    Ok(())
}

fn session_abtest(common: &Common, split: &Path, models: &[String], n: Option<usize>) -> Result<()> {
    let cfg = common.load()?;
    if models.is_empty() {
        return Err(Error::Config("need at least one model".into()));
    }
    let env = session_env(&cfg, split)?;
    let rules = models
        .iter()
        .map(|m| -> Result<Box<dyn DecisionRule>> {
            match m.as_str() {
                "popularity" => Ok(Box::new(SamplingRule(env.popularity_policy()?))),
                "uniform" => Ok(Box::new(SamplingRule(PolicySpec::uniform(env.split.num_items)))),
                path => load_rule(path, &cfg, env.k_max),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&dyn DecisionRule> = rules.iter().map(|r| r.as_ref()).collect();
    let n = n.unwrap_or(cfg.session.n_test);
    let res = run_session_abtest(&env, &refs, n, mix_seed(cfg.seed, 2))?;
    let names: Vec<String> = models.iter().map(|m| rule_name(m)).collect();
    write_ab(&common.out, cfg.seed, &names, &res)
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let rows = run_sweep(&cfg, &common.out, &mut |cell, rows| {
        println!("cell {}", cell.id());
        for r in rows {
            match r.mean {
                Some(m) => println!("  {:<10} {:.6} ± {:.6}", r.method, m, 1.96 * r.std_err.unwrap_or(0.0)),
                None => println!("  {:<10} {}", r.method, r.status),
            }
        }
    })?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} rows appended to {} ({failed} failed)", rows.len(), common.out.display());
    Ok(())
}

fn bench(common: &Common, summary: Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let rows = run_bench(&cfg, &mut |r| {
        println!("P={:<6} {:<10} epoch {:>3}  {:.1} ms", r.num_items, r.method, r.epoch, r.wall_ms);
    })?;
    write_csv(&common.out, &rows)?;
    let sums = summarize_bench(&rows);
    for s in &sums {
        println!("{}", serde_json::to_string(s)?);
    }
    if let Some(p) = summary {
        write_csv(&p, &sums)?;
    }
    Ok(())
}

fn plot(common: &Common, input: &Path) -> Result<()> {
    let header = csv_header(input)?;
    let svg = if header.iter().any(|h| h == "cell") {
        plot_sweep(&read_csv::<SweepRow>(input)?)
    } else if header.iter().any(|h| h == "epoch") {
        plot_bench(&read_csv::<BenchRow>(input)?)
    } else {
        return Err(Error::Data(format!("{} is neither a sweep nor a bench table", input.display())));
    };
    if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&common.out, svg).map_err(|e| Error::io(&common.out, e))?;
    println!("wrote {}", common.out.display());
    Ok(())
}

fn csv_header(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    Ok(first.split(',').map(|s| s.trim().to_string()).collect())
}
