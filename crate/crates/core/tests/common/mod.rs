//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use slate_lab::model::{self, Gradient};
use slate_lab::numeric::{stream_rng, Matrix, SimRng};
use slate_lab::{Context, Feedback, LogRecord, ModelDims, ModelParams, Slate, Variant};

pub fn normal(rng: &mut SimRng, scale: f64) -> f64 {
    let x: f64 = StandardNormal.sample(rng);
    x * scale
}

pub fn random_params(dims: ModelDims, variant: Variant, rng: &mut SimRng, scale: f64) -> ModelParams {
    let mut p = ModelParams::zeros(dims, variant);
    p.engagement.iter_mut().for_each(|x| *x = normal(rng, scale));
    p.interest_map.data.iter_mut().for_each(|x| *x = normal(rng, scale));
    p.item_embeddings.data.iter_mut().for_each(|x| *x = normal(rng, scale));
    p.position_mult.iter_mut().for_each(|x| *x = normal(rng, scale));
    p.position_add.iter_mut().for_each(|x| *x = normal(rng, scale));
    p.bias_scalar = normal(rng, scale);
    p
}

pub fn random_context(dims: ModelDims, k: usize, rng: &mut SimRng) -> Context {
    Context {
        y: (0..dims.engagement_dim).map(|_| normal(rng, 1.0)).collect(),
        z: (0..dims.interest_dim).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect(),
        slate_size: k,
    }
}

pub fn random_slate(num_items: usize, k: usize, rng: &mut SimRng) -> Slate {
    let mut items = Vec::new();
    while items.len() < k {
        let a = rng.random_range(0..num_items);
        if !items.contains(&a) {
            items.push(a);
        }
    }
    Slate::new(items).unwrap()
}

pub fn random_record(dims: ModelDims, variant: Variant, rng: &mut SimRng) -> LogRecord {
    let k = rng.random_range(1..=dims.k_max);
    let context = random_context(dims, k, rng);
    let slate = random_slate(dims.num_items, k, rng);
    let lo = if variant == Variant::RankOnly { 1 } else { 0 };
    let outcome = rng.random_range(lo..=k);
    LogRecord {
        context,
        slate,
        feedback: Feedback::from_outcome(outcome, k).unwrap(),
        slate_propensity: 1.0,
        marginal_propensities: vec![1.0; k],
    }
}

/// Named coordinate accessors over every parameter block.
pub fn blocks(p: &mut ModelParams) -> Vec<(&'static str, &mut [f64])> {
    vec![
        ("engagement", p.engagement.as_mut_slice()),
        ("interest_map", p.interest_map.data.as_mut_slice()),
        ("item_embeddings", p.item_embeddings.data.as_mut_slice()),
        ("position_mult", p.position_mult.as_mut_slice()),
        ("position_add", p.position_add.as_mut_slice()),
        ("bias_scalar", std::slice::from_mut(&mut p.bias_scalar)),
    ]
}

/// Central finite differences of the log-likelihood for every coordinate.
pub fn finite_difference(params: &ModelParams, record: &LogRecord, h: f64) -> Vec<(&'static str, Vec<f64>)> {
    let mut work = params.clone();
    let sizes: Vec<(&'static str, usize)> = blocks(&mut work).into_iter().map(|(n, b)| (n, b.len())).collect();
    let mut out = Vec::new();
    for (bi, (name, len)) in sizes.into_iter().enumerate() {
        let mut g = vec![0.0; len];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = blocks(&mut work)[bi].1[i];
            blocks(&mut work)[bi].1[i] = orig + h;
            let up = model::log_likelihood(&work, record).unwrap();
            blocks(&mut work)[bi].1[i] = orig - h;
            let down = model::log_likelihood(&work, record).unwrap();
            blocks(&mut work)[bi].1[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push((name, g));
    }
    out
}

/// The analytic gradient laid out like [`finite_difference`].
pub fn dense_analytic(params: &ModelParams, g: &Gradient) -> Vec<(&'static str, Vec<f64>)> {
    let dims = params.dims();
    let mut items = Matrix::zeros(dims.num_items, dims.embedding_dim);
    for (a, row) in &g.item_rows {
        items.row_mut(*a).copy_from_slice(row);
    }
    vec![
        ("engagement", g.engagement.clone().unwrap_or_else(|| vec![0.0; dims.engagement_dim])),
        ("interest_map", g.interest_map.data.clone()),
        ("item_embeddings", items.data),
        ("position_mult", g.position_mult.clone()),
        ("position_add", g.position_add.clone()),
        ("bias_scalar", vec![g.bias_scalar.unwrap_or(0.0)]),
    ]
}

/// Worst block-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; blocks whose
/// gradients are both below `1e-9` in norm count as exact.
pub fn worst_relative_error(analytic: &[(&'static str, Vec<f64>)], numeric: &[(&'static str, Vec<f64>)]) -> (f64, &'static str) {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut worst = (0.0, "");
    for ((name, a), (_, n)) in analytic.iter().zip(numeric) {
        let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
        let scale = norm(a).max(norm(n));
        let err = if scale < 1e-9 { norm(&diff) } else { norm(&diff) / scale };
        if err > worst.0 {
            worst = (err, name);
        }
    }
    worst
}

pub fn gradcheck_dims() -> ModelDims {
    ModelDims {
        num_items: 8,
        embedding_dim: 3,
        engagement_dim: 2,
        interest_dim: 4,
        k_max: 4,
    }
}

/// Gradient check over `fixtures` random records for one variant; returns
/// the worst relative error seen.
pub fn gradcheck_variant(variant: Variant, fixtures: usize, seed: u64) -> f64 {
    let dims = gradcheck_dims();
    let mut rng = stream_rng(seed, variant as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..fixtures {
        let params = random_params(dims, variant, &mut rng, 0.7);
        let record = random_record(dims, variant, &mut rng);
        let g = model::grad_log_likelihood(&params, &record).unwrap();
        let analytic = dense_analytic(&params, &g);
        let numeric = finite_difference(&params, &record, 1e-6);
        let (err, _) = worst_relative_error(&analytic, &numeric);
        worst = worst.max(err);
    }
    worst
}

/// Every ordered slate of `k` distinct items out of `num_items`.
pub fn ordered_slates(num_items: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, num_items: usize, k: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == k {
            out.push(prefix.clone());
            return;
        }
        for a in 0..num_items {
            if !prefix.contains(&a) {
                prefix.push(a);
                extend(prefix, num_items, k, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), num_items, k, &mut out);
    out
}

/// `P(R = 1 | x, s) = 1 − θ0/Z` written out from the model definition.
pub fn success_probability(params: &ModelParams, ctx: &Context, slate: &[usize]) -> f64 {
    let theta0 = match params.variant {
        Variant::BiasOnly => params.bias_scalar.exp(),
        _ => ctx.y.iter().zip(&params.engagement).map(|(a, b)| a * b).sum::<f64>().exp(),
    };
    let h = params.interest_map.mul_vec(&ctx.z).unwrap();
    let mut z = theta0;
    for (pos, &a) in slate.iter().enumerate() {
        let score: f64 = h.iter().zip(params.item_embeddings.row(a)).map(|(x, y)| x * y).sum();
        z += (score + params.position_mult[pos]).exp() + params.position_add[pos].exp();
    }
    1.0 - theta0 / z
}

/// Exhaustive argmax of the success probability over all ordered slates.
pub fn brute_force_slate(params: &ModelParams, ctx: &Context) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    for s in ordered_slates(params.dims().num_items, ctx.slate_size) {
        let v = success_probability(params, ctx, &s);
        if v > best.1 {
            best = (s, v);
        }
    }
    best
}

/// An estimate next to the exhaustively computed value it targets.
#[derive(Debug, Clone)]
pub struct EstimatorCheck {
    pub name: &'static str,
    pub estimate: f64,
    pub std_err: f64,
    pub truth: f64,
}

impl EstimatorCheck {
    pub fn sigmas(&self) -> f64 {
        (self.estimate - self.truth).abs() / self.std_err
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// IPS and IIPS on a catalog of 4 items with slates of 2, three equally
/// likely contexts and a position-based click model `q(a, ℓ | z)` in which
/// the rank at a position depends only on the item shown there.
///
/// Targets, all computed by enumeration:
/// - IPS with the without-replacement propensity: the value of drawing the
///   slate sequentially from the softmax;
/// - IPS with the plain product: `Σ_{s distinct} Πℓ p(sℓ) R(s)`;
/// - IIPS: `Σℓ Σa p(a) q(a, ℓ)`, the value of the factored policy. Only
///   meaningful when the logged marginals are exact (uniform logging).
pub fn enumerable_estimator_checks(
    logging: slate_lab::policy::PolicySpec,
    n: usize,
    seed: u64,
) -> Vec<EstimatorCheck> {
    use slate_lab::policy::{
        estimate_iips, estimate_ips, iips_terms, ips_terms, sample_slate, EstimatorOptions, PolicySpec,
        PropensityMode, SoftmaxPolicyParams,
    };
    let (p, k) = (4, 2);
    let contexts: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0]];
    let mut rng = stream_rng(seed, 0);
    let w = Matrix::from_fn(p, 3, |_, _| normal(&mut rng, 1.0));
    let exam = [1.0, 0.6];
    let q = |z: &[f64], a: usize, pos: usize| {
        let s: f64 = w.row(a).iter().zip(z).map(|(x, y)| x * y).sum();
        0.45 * exam[pos] / (1.0 + (-s).exp())
    };
    let mut target = SoftmaxPolicyParams::zeros(p, 2, 3);
    target.interest_map.data.iter_mut().for_each(|x| *x = normal(&mut rng, 0.8));
    target.item_embeddings.data.iter_mut().for_each(|x| *x = normal(&mut rng, 0.8));
    let probs_of = |z: &[f64]| {
        let h: Vec<f64> = (0..2)
            .map(|r| target.interest_map.row(r).iter().zip(z).map(|(x, y)| x * y).sum())
            .collect();
        let logits: Vec<f64> = (0..p)
            .map(|a| target.item_embeddings.row(a).iter().zip(&h).map(|(x, y)| x * y).sum())
            .collect();
        softmax(&logits)
    };

    let mut truth_wr = 0.0;
    let mut truth_plain = 0.0;
    let mut truth_fact = 0.0;
    for z in &contexts {
        let pr = probs_of(z);
        for s in ordered_slates(p, k) {
            let reward: f64 = s.iter().enumerate().map(|(pos, &a)| q(z, a, pos)).sum();
            truth_wr += pr[s[0]] * pr[s[1]] / (1.0 - pr[s[0]]) * reward;
            truth_plain += pr[s[0]] * pr[s[1]] * reward;
        }
        for a in 0..p {
            for pos in 0..k {
                truth_fact += pr[a] * q(z, a, pos);
            }
        }
    }
    let c = contexts.len() as f64;
    let (truth_wr, truth_plain, truth_fact) = (truth_wr / c, truth_plain / c, truth_fact / c);

    let mut logs = Vec::with_capacity(n);
    for _ in 0..n {
        let z = contexts[rng.random_range(0..contexts.len())].clone();
        let drawn = sample_slate(&logging, &z, k, &mut rng).unwrap();
        let mut cats = vec![0.0; k + 1];
        for (pos, &a) in drawn.slate.items().iter().enumerate() {
            cats[pos + 1] = q(&z, a, pos);
        }
        cats[0] = 1.0 - cats[1..].iter().sum::<f64>();
        let outcome = slate_lab::numeric::sample_categorical(&cats, &mut rng).unwrap();
        logs.push(LogRecord {
            context: Context { y: vec![], z, slate_size: k },
            slate: drawn.slate,
            feedback: Feedback::from_outcome(outcome, k).unwrap(),
            slate_propensity: drawn.slate_propensity,
            marginal_propensities: drawn.marginal_propensities,
        });
    }

    let spec = PolicySpec::factored_softmax(target.clone());
    let wr = EstimatorOptions {
        propensity_mode: PropensityMode::Renormalized,
        ..EstimatorOptions::unclipped()
    };
    let plain = EstimatorOptions::unclipped();
    let se = |terms: Vec<f64>| mean_and_stderr(&terms).1;
    vec![
        EstimatorCheck {
            name: "ips (sequential propensity)",
            estimate: estimate_ips(&spec, &logs, &wr).unwrap(),
            std_err: se(ips_terms(&spec, &logs, &wr).unwrap()),
            truth: truth_wr,
        },
        EstimatorCheck {
            name: "ips (plain product)",
            estimate: estimate_ips(&spec, &logs, &plain).unwrap(),
            std_err: se(ips_terms(&spec, &logs, &plain).unwrap()),
            truth: truth_plain,
        },
        EstimatorCheck {
            name: "iips",
            estimate: estimate_iips(&spec, &logs, &plain).unwrap(),
            std_err: se(iips_terms(&spec, &logs, &plain).unwrap()),
            truth: truth_fact,
        },
    ]
}

/// A full model over `2..=7` items with slate size `1..=3` and at least one
/// active topic.
pub fn decision_fixture(rng: &mut SimRng) -> (ModelParams, Context) {
    let num_items = rng.random_range(2..=7);
    let k_max = rng.random_range(1..=3usize.min(num_items));
    let dims = ModelDims {
        num_items,
        embedding_dim: 3,
        engagement_dim: 2,
        interest_dim: 4,
        k_max,
    };
    let params = random_params(dims, Variant::Full, rng, 1.0);
    let k = rng.random_range(1..=k_max);
    let mut ctx = random_context(dims, k, rng);
    // an all-zero z ties every item
    ctx.z[rng.random_range(0..dims.interest_dim)] = 1.0;
    (params, ctx)
}

/// Fixtures on which the exact-index slate differs from the brute-force argmax.
pub fn brute_force_mismatches(fixtures: usize, seed: u64) -> Vec<String> {
    use slate_lab::decision::{build_slate, ExactIndex};
    let mut rng = stream_rng(seed, 0);
    let mut bad = Vec::new();
    for i in 0..fixtures {
        let (params, ctx) = decision_fixture(&mut rng);
        let index = ExactIndex::new(params.item_embeddings.clone());
        let got = build_slate(&params, &ctx.z, ctx.slate_size, &index).unwrap();
        let (best, value) = brute_force_slate(&params, &ctx);
        if got.items() != best.as_slice() {
            let v = success_probability(&params, &ctx, got.items());
            bad.push(format!("fixture {i}: {:?} ({v}) vs {best:?} ({value})", got.items()));
        }
    }
    bad
}

/// Fixtures whose slate moves when `φ`, `α` (and the bias scalar) are redrawn.
pub fn nuisance_mismatches(fixtures: usize, seed: u64) -> Vec<String> {
    use slate_lab::decision::{build_slate, ExactIndex};
    let mut rng = stream_rng(seed, 1);
    let mut bad = Vec::new();
    for i in 0..fixtures {
        let (params, ctx) = decision_fixture(&mut rng);
        let index = ExactIndex::new(params.item_embeddings.clone());
        let base = build_slate(&params, &ctx.z, ctx.slate_size, &index).unwrap();
        for _ in 0..5 {
            let mut moved = params.clone();
            moved.engagement.iter_mut().for_each(|x| *x = normal(&mut rng, 5.0));
            moved.position_add.iter_mut().for_each(|x| *x = normal(&mut rng, 5.0));
            moved.bias_scalar = normal(&mut rng, 5.0);
            let got = build_slate(&moved, &ctx.z, ctx.slate_size, &index).unwrap();
            if got != base {
                bad.push(format!("fixture {i}: {:?} became {:?}", base.items(), got.items()));
            }
        }
    }
    bad
}

/// Empirical click rate of logged impressions, the mean analytic `1 − θ0/Z`
/// of the same impressions, and the standard error of their difference.
pub fn click_rate_check(
    env: &slate_lab::environment::OracleEnv,
    logs: &[LogRecord],
) -> (f64, f64, f64) {
    let diffs: Vec<f64> = logs
        .iter()
        .map(|r| r.feedback.reward() - success_probability(&env.params, &r.context, r.slate.items()))
        .collect();
    let n = logs.len() as f64;
    let empirical = logs.iter().map(|r| r.feedback.reward()).sum::<f64>() / n;
    let (mean_diff, se) = mean_and_stderr(&diffs);
    (empirical, empirical - mean_diff, se)
}

/// One-hot feedback, distinct in-catalog items and propensities in `(0, 1]`
/// for every record; returns the violations found.
pub fn corpus_violations(logs: &[LogRecord], num_items: usize) -> Vec<String> {
    let mut bad = Vec::new();
    for (i, r) in logs.iter().enumerate() {
        let k = r.slate.len();
        let oh = r.feedback.one_hot();
        if oh.len() != k + 1 || oh.iter().filter(|&&x| x == 1.0).count() != 1 || oh.iter().any(|&x| x != 0.0 && x != 1.0) {
            bad.push(format!("record {i}: feedback {oh:?}"));
        }
        let items = r.slate.items();
        if items.iter().any(|&a| a >= num_items) || (1..k).any(|j| items[..j].contains(&items[j])) {
            bad.push(format!("record {i}: slate {items:?}"));
        }
        if r.context.slate_size != k {
            bad.push(format!("record {i}: slate size {} vs {k}", r.context.slate_size));
        }
        let ok = |p: f64| p.is_finite() && p > 0.0 && p <= 1.0;
        if !ok(r.slate_propensity) || r.marginal_propensities.len() != k || !r.marginal_propensities.iter().all(|&p| ok(p)) {
            bad.push(format!("record {i}: propensities {} {:?}", r.slate_propensity, r.marginal_propensities));
        }
    }
    bad
}

/// Largest `|Σ p − 1|` and smallest entry of the session click
/// probabilities over random hit patterns and weights.
pub fn session_probability_sums(draws: usize, seed: u64) -> (f64, f64) {
    use slate_lab::session::{session_probabilities, SessionBiases};
    let mut rng = stream_rng(seed, 0);
    let mut worst: f64 = 0.0;
    let mut min_p = f64::INFINITY;
    for _ in 0..draws {
        let k_max = rng.random_range(1..=16);
        let biases = SessionBiases::sample(k_max, &mut rng);
        let k = rng.random_range(1..=k_max);
        let hits: Vec<bool> = (0..k).map(|_| rng.random::<bool>()).collect();
        let p = session_probabilities(&hits, &biases).unwrap();
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        min_p = p.iter().cloned().fold(min_p, f64::min);
    }
    (worst, min_p)
}

/// CSV contents with the named columns removed.
pub fn csv_without(path: &std::path::Path, drop: &[&str]) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !drop.contains(&header[i].as_str())).collect();
    let mut out = vec![keep.iter().map(|&i| header[i].clone()).collect()];
    for rec in rdr.records() {
        let rec = rec.unwrap();
        out.push(keep.iter().map(|&i| rec[i].to_string()).collect());
    }
    out
}

/// A configuration small enough to run every stage in seconds.
pub fn tiny_config() -> slate_lab::experiment::ExperimentConfig {
    use slate_lab::experiment::*;
    let mut cfg = ExperimentConfig::default();
    cfg.oracle.num_items = 60;
    cfg.oracle.embedding_dim = 4;
    cfg.oracle.engagement_dim = 3;
    cfg.oracle.num_topics = 8;
    cfg.oracle.k_max = 3;
    cfg.train.prr.epochs = 3;
    cfg.train.policy.epochs = 3;
    cfg.sweep = SweepSection {
        num_items: vec![60],
        k_max: vec![2, 3],
        n_train: 2000,
    };
    cfg.abtest.n_test = 3000;
    cfg.bench.num_items = vec![60, 120];
    cfg.bench.n = 1000;
    cfg.bench.k_max = 3;
    cfg.bench.epochs = 2;
    cfg.session.n_train = 2000;
    cfg.session.n_test = 2000;
    cfg.session.interest_dim = 16;
    cfg.session.embedding_dim = 4;
    cfg.session.k_max = 3;
    cfg
}

/// Runs every pipeline stage into `dir` and returns each stage's output with
/// wall-time columns removed.
pub fn run_pipeline(dir: &std::path::Path, cfg: &slate_lab::experiment::ExperimentConfig) -> Vec<(String, Vec<u8>)> {
    use slate_lab::decision::{DecisionRule, PrrRecommender, SamplingRule};
    use slate_lab::environment::{build_oracle, generate_logs, run_abtest, LoggingPolicy};
    use slate_lab::experiment::*;
    use slate_lab::io::*;
    use slate_lab::numeric::mix_seed;
    use slate_lab::session::*;
    use slate_lab::training::{train_policy, train_prr, PolicyDims, PolicyObjective};

    let mut out = Vec::new();
    let mut file = |name: &str| {
        let p = dir.join(name);
        out.push((name.to_string(), p.clone()));
        p
    };

    let env = build_oracle(&cfg.oracle).unwrap();
    let oracle_path = file("oracle.bin");
    save_artifact(&oracle_path, &Artifact::Oracle(env.clone())).unwrap();
    let logging = env.logging_policy(LoggingPolicy::TopKPop).unwrap();
    let logs = generate_logs(&env, &logging, 3000, mix_seed(cfg.seed, 1)).unwrap();
    write_logs(&file("logs.jsonl"), &logs).unwrap();

    let logs = read_logs(&dir.join("logs.jsonl")).unwrap();
    let model = train_prr(&logs, env.dims(), Variant::Full, &cfg.train.prr).unwrap();
    save_artifact(&file("prr.bin"), &Artifact::Model(model.params.clone())).unwrap();
    save_artifact(&file("prr.json"), &Artifact::Model(model.params.clone())).unwrap();
    let pdims = PolicyDims {
        num_items: env.dims().num_items,
        embedding_dim: env.dims().embedding_dim,
        interest_dim: env.dims().interest_dim,
    };
    let policy = train_policy(&logs, pdims, PolicyObjective::Iips, &cfg.train.policy).unwrap();
    save_artifact(&file("iips.bin"), &Artifact::Policy(policy.params.clone())).unwrap();

    let rec = PrrRecommender::new(model.params, cfg.model.index.kind(), cfg.seed).unwrap();
    let contexts: Vec<Context> = logs.iter().take(200).map(|r| r.context.clone()).collect();
    write_contexts(&file("contexts.jsonl"), &contexts).unwrap();
    let slates: Vec<Slate> = read_contexts(&dir.join("contexts.jsonl"))
        .unwrap()
        .iter()
        .map(|c| rec.recommend(c).unwrap())
        .collect();
    write_slates(&file("slates.jsonl"), &slates).unwrap();

    let iips = decision_rule(Fitted::Policy(policy.params), &cfg.model, cfg.oracle.k_max, cfg.seed).unwrap();
    let uniform = SamplingRule(env.logging_policy(LoggingPolicy::Uniform).unwrap());
    let rules: [&dyn DecisionRule; 3] = [&rec, iips.as_ref(), &uniform];
    let ab = run_abtest(&env, &rules, 2000, mix_seed(cfg.seed, 2)).unwrap();
    let ab_rows: Vec<AbRow> = ["prr", "iips", "uniform"]
        .iter()
        .zip(ab)
        .map(|(name, r)| AbRow {
            seed: cfg.seed,
            rule: name.to_string(),
            mean: r.mean,
            std_err: r.std_err,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_test: r.n,
        })
        .collect();
    write_csv(&file("abtest.csv"), &ab_rows).unwrap();

    let mut csv_text = String::from("user_id,item_id,timestamp\n");
    let mut rng = stream_rng(cfg.seed, 99);
    for u in 0..40 {
        for t in 0..rng.random_range(2..9) {
            csv_text += &format!("u{u},i{},{t}\n", rng.random_range(0..25));
        }
    }
    let raw = dir.join("interactions.csv");
    std::fs::write(&raw, csv_text).unwrap();
    let ds = InteractionDataset::from_csv(&raw).unwrap();
    let split = split_sessions(&ds, cfg.session.hide_fraction, &mut stream_rng(cfg.seed, 0)).unwrap();
    save_split(&file("split.bin"), &split).unwrap();
    let s = &cfg.session;
    let senv = SessionEnv::new(load_split(&dir.join("split.bin")).unwrap(), SessionBiases::for_seed(s.k_max, cfg.seed), s.k_max, s.interest_dim).unwrap();
    let slogs = generate_session_logs(&senv, &senv.popularity_policy().unwrap(), s.n_train, mix_seed(cfg.seed, 1)).unwrap();
    write_logs(&file("session_logs.jsonl"), &slogs).unwrap();
    let sdims = senv.dims(s.embedding_dim);
    let smodel = train_prr(&slogs, sdims, session_variant(Variant::Full), &cfg.train.prr).unwrap();
    let srec = PrrRecommender::new(smodel.params, cfg.model.index.kind(), cfg.seed).unwrap();
    let pop = SamplingRule(senv.popularity_policy().unwrap());
    let srules: [&dyn DecisionRule; 2] = [&srec, &pop];
    let sab = run_session_abtest(&senv, &srules, s.n_test, mix_seed(cfg.seed, 2)).unwrap();
    let sab_rows: Vec<AbRow> = ["prr", "popularity"]
        .iter()
        .zip(sab)
        .map(|(name, r)| AbRow {
            seed: cfg.seed,
            rule: name.to_string(),
            mean: r.mean,
            std_err: r.std_err,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            n_test: r.n,
        })
        .collect();
    write_csv(&file("session_abtest.csv"), &sab_rows).unwrap();

    let sweep_path = file("sweep.csv");
    let rows = run_sweep(cfg, &sweep_path, &mut |_, _| {}).unwrap();
    std::fs::write(file("sweep.svg"), plot_sweep(&rows)).unwrap();
    let bench = run_bench(cfg, &mut |_| {}).unwrap();
    write_csv(&file("bench.csv"), &bench).unwrap();

    out.into_iter()
        .map(|(name, path)| {
            let bytes = match name.as_str() {
                "sweep.csv" => format!("{:?}", csv_without(&path, &["train_wall_ms"])).into_bytes(),
                "bench.csv" => format!("{:?}", csv_without(&path, &["wall_ms"])).into_bytes(),
                _ => std::fs::read(&path).unwrap(),
            };
            (name, bytes)
        })
        .collect()
}
