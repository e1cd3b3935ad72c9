//! File formats: JSONL logs, contexts and slates; the versioned parameter
//! container in JSON and binary form; the session split file.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environment::{NormalSpec, OracleConfig, OracleEnv};
use crate::numeric::Matrix;
use crate::policy::SoftmaxPolicyParams;
use crate::session::SessionSplit;
use crate::types::{Context, Feedback, LogRecord, ModelParams, Slate, Variant};
use crate::{Error, Result};

pub const LOG_VERSION: u32 = 1;
pub const CONTAINER_VERSION: u32 = 1;
const CONTAINER_MAGIC: &[u8; 4] = b"SLAB";
const SPLIT_MAGIC: &[u8; 4] = b"SLSP";
const FORMAT_NAME: &str = "slate-lab";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

/// One log line on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    v: u32,
    y: Vec<f64>,
    z: Vec<f64>,
    slate: Vec<usize>,
    feedback: Vec<f64>,
    prop_slate: f64,
    prop_marginal: Vec<f64>,
}

impl From<&LogRecord> for LogLine {
    fn from(r: &LogRecord) -> Self {
        Self {
            v: LOG_VERSION,
            y: r.context.y.clone(),
            z: r.context.z.clone(),
            slate: r.slate.items().to_vec(),
            feedback: r.feedback.one_hot(),
            prop_slate: r.slate_propensity,
            prop_marginal: r.marginal_propensities.clone(),
        }
    }
}

impl TryFrom<LogLine> for LogRecord {
    type Error = Error;

    fn try_from(l: LogLine) -> Result<Self> {
        if l.v != LOG_VERSION {
            return Err(Error::Data(format!("unsupported log version {}", l.v)));
        }
        let k = l.slate.len();
        let rec = LogRecord {
            context: Context {
                y: l.y,
                z: l.z,
                slate_size: k,
            },
            slate: Slate::new(l.slate)?,
            feedback: Feedback::from_one_hot(&l.feedback)?,
            slate_propensity: l.prop_slate,
            marginal_propensities: l.prop_marginal,
        };
        rec.validate()?;
        Ok(rec)
    }
}

pub fn write_logs_to<W: Write>(mut w: W, logs: &[LogRecord]) -> Result<()> {
    for r in logs {
        serde_json::to_writer(&mut w, &LogLine::from(r))?;
        w.write_all(b"\n").map_err(|e| Error::io("<log stream>", e))?;
    }
    w.flush().map_err(|e| Error::io("<log stream>", e))
}

pub fn read_logs_from<R: BufRead>(r: R) -> Result<Vec<LogRecord>> {
    read_jsonl(r, |line: LogLine| line.try_into())
}

pub fn write_logs(path: &Path, logs: &[LogRecord]) -> Result<()> {
    write_logs_to(create(path)?, logs).map_err(|e| relabel(e, path))
}

pub fn read_logs(path: &Path) -> Result<Vec<LogRecord>> {
    read_logs_from(open(path)?).map_err(|e| relabel(e, path))
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_jsonl<R, T, U, F>(r: R, convert: F) -> Result<Vec<U>>
where
    R: BufRead,
    T: for<'de> Deserialize<'de>,
    F: Fn(T) -> Result<U>,
{
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<jsonl stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: T = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        out.push(convert(parsed).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContextLine {
    y: Vec<f64>,
    z: Vec<f64>,
    k: usize,
}

pub fn write_contexts(path: &Path, contexts: &[Context]) -> Result<()> {
    let mut w = create(path)?;
    for c in contexts {
        let line = ContextLine {
            y: c.y.clone(),
            z: c.z.clone(),
            k: c.slate_size,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_contexts(path: &Path) -> Result<Vec<Context>> {
    read_jsonl(open(path)?, |l: ContextLine| {
        if l.k == 0 {
            return Err(Error::Data("slate size must be positive".into()));
        }
        Ok(Context {
            y: l.y,
            z: l.z,
            slate_size: l.k,
        })
    })
    .map_err(|e| relabel(e, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SlateLine {
    slate: Vec<usize>,
}

pub fn write_slates(path: &Path, slates: &[Slate]) -> Result<()> {
    let mut w = create(path)?;
    for s in slates {
        serde_json::to_writer(&mut w, &SlateLine { slate: s.items().to_vec() })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_slates(path: &Path) -> Result<Vec<Slate>> {
    read_jsonl(open(path)?, |l: SlateLine| Slate::new(l.slate)).map_err(|e| relabel(e, path))
}

/// Anything stored in the parameter container.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Model(ModelParams),
    Policy(SoftmaxPolicyParams),
    Oracle(OracleEnv),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Model,
    Policy,
    Oracle,
}

impl Kind {
    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Result<Self> {
        [Kind::Model, Kind::Policy, Kind::Oracle]
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown container tag {t}")))
    }
}

/// `(P, d, d′, d_z, K_max)`; zero where a field does not apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsHeader {
    pub num_items: usize,
    pub embedding_dim: usize,
    pub engagement_dim: usize,
    pub interest_dim: usize,
    pub k_max: usize,
}

impl Artifact {
    fn kind(&self) -> Kind {
        match self {
            Artifact::Model(_) => Kind::Model,
            Artifact::Policy(_) => Kind::Policy,
            Artifact::Oracle(_) => Kind::Oracle,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind() {
            Kind::Model => "model",
            Kind::Policy => "policy",
            Kind::Oracle => "oracle",
        }
    }

    pub fn dims(&self) -> DimsHeader {
        let model = |p: &ModelParams| {
            let d = p.dims();
            DimsHeader {
                num_items: d.num_items,
                embedding_dim: d.embedding_dim,
                engagement_dim: d.engagement_dim,
                interest_dim: d.interest_dim,
                k_max: d.k_max,
            }
        };
        match self {
            Artifact::Model(p) => model(p),
            Artifact::Oracle(env) => model(&env.params),
            Artifact::Policy(p) => DimsHeader {
                num_items: p.item_embeddings.rows,
                embedding_dim: p.item_embeddings.cols,
                engagement_dim: 0,
                interest_dim: p.interest_map.cols,
                k_max: 0,
            },
        }
    }

    fn variant(&self) -> Variant {
        match self {
            Artifact::Model(p) => p.variant,
            _ => Variant::Full,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Artifact::Model(p) => p.validate(),
            Artifact::Policy(p) => p.validate(),
            Artifact::Oracle(env) => {
                env.config.validate()?;
                env.params.validate()?;
                if env.params.dims() != env.config.dims() {
                    return Err(Error::Data("oracle parameters disagree with its configuration".into()));
                }
                Ok(())
            }
        }
    }

    pub fn into_model(self) -> Result<ModelParams> {
        match self {
            Artifact::Model(p) => Ok(p),
            other => Err(Error::Data(format!("expected a model file, found a {} file", other.kind_name()))),
        }
    }

    pub fn into_policy(self) -> Result<SoftmaxPolicyParams> {
        match self {
            Artifact::Policy(p) => Ok(p),
            other => Err(Error::Data(format!("expected a policy file, found a {} file", other.kind_name()))),
        }
    }

    pub fn into_oracle(self) -> Result<OracleEnv> {
        match self {
            Artifact::Oracle(e) => Ok(e),
            other => Err(Error::Data(format!("expected an oracle file, found a {} file", other.kind_name()))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonContainer {
    format: String,
    version: u32,
    kind: Kind,
    dims: DimsHeader,
    variant: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    model: Option<ModelParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    policy: Option<SoftmaxPolicyParams>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    oracle: Option<OracleEnv>,
}

pub fn artifact_to_json(a: &Artifact) -> Result<String> {
    a.validate()?;
    let mut c = JsonContainer {
        format: FORMAT_NAME.into(),
        version: CONTAINER_VERSION,
        kind: a.kind(),
        dims: a.dims(),
        variant: a.variant().name().into(),
        model: None,
        policy: None,
        oracle: None,
    };
    match a {
        Artifact::Model(p) => c.model = Some(p.clone()),
        Artifact::Policy(p) => c.policy = Some(p.clone()),
        Artifact::Oracle(e) => c.oracle = Some(e.clone()),
    }
    Ok(serde_json::to_string_pretty(&c)?)
}

pub fn artifact_from_json(text: &str) -> Result<Artifact> {
    let c: JsonContainer = serde_json::from_str(text).map_err(|e| Error::Data(format!("container: {e}")))?;
    if c.format != FORMAT_NAME || c.version != CONTAINER_VERSION {
        return Err(Error::Data(format!("unsupported container {} v{}", c.format, c.version)));
    }
    let a = match (c.kind, c.model, c.policy, c.oracle) {
        (Kind::Model, Some(p), None, None) => Artifact::Model(p),
        (Kind::Policy, None, Some(p), None) => Artifact::Policy(p),
        (Kind::Oracle, None, None, Some(e)) => Artifact::Oracle(e),
        _ => return Err(Error::Data("container body does not match its kind".into())),
    };
    check_header(&a, c.dims, &c.variant)?;
    Ok(a)
}

fn check_header(a: &Artifact, dims: DimsHeader, variant: &str) -> Result<()> {
    a.validate()?;
    if a.dims() != dims {
        return Err(Error::Data(format!("dims header {dims:?} does not match the stored arrays")));
    }
    if a.variant().name() != variant {
        return Err(Error::Data(format!("variant header {variant} does not match the stored model")));
    }
    Ok(())
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn f64s(&mut self, xs: &[f64]) {
        xs.iter().for_each(|&x| self.f64(x));
    }
    fn usizes(&mut self, xs: &[usize]) {
        self.u64(xs.len() as u64);
        xs.iter().for_each(|&x| self.u64(x as u64));
    }
    fn normal(&mut self, n: NormalSpec) {
        self.f64(n.mean);
        self.f64(n.var);
    }
}

struct Dec<'a> {
    buf: &'a [u8],
}

impl Dec<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Data("truncated binary file".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| Error::Data("array too large".into()))?;
        Ok(self.take(bytes)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| Error::Data("array too large".into()))?;
        Ok(Matrix {
            rows,
            cols,
            data: self.f64s(n)?,
        })
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        if n > self.buf.len() / 8 {
            return Err(Error::Data("truncated binary file".into()));
        }
        (0..n).map(|_| self.usize()).collect()
    }
    fn normal(&mut self) -> Result<NormalSpec> {
        Ok(NormalSpec {
            mean: self.f64()?,
            var: self.f64()?,
        })
    }
}

fn encode_model(e: &mut Enc, p: &ModelParams) {
    e.f64s(&p.engagement);
    e.f64s(&p.interest_map.data);
    e.f64s(&p.item_embeddings.data);
    e.f64s(&p.position_mult);
    e.f64s(&p.position_add);
    e.f64(p.bias_scalar);
}

fn decode_model(d: &mut Dec, h: DimsHeader, variant: Variant) -> Result<ModelParams> {
    Ok(ModelParams {
        variant,
        engagement: d.f64s(h.engagement_dim)?,
        interest_map: d.matrix(h.embedding_dim, h.interest_dim)?,
        item_embeddings: d.matrix(h.num_items, h.embedding_dim)?,
        position_mult: d.f64s(h.k_max)?,
        position_add: d.f64s(h.k_max)?,
        bias_scalar: d.f64()?,
    })
}

/// Compact little-endian form: magic, version, kind tag, dims header,
/// variant tag, then dense row-major `f64` arrays.
pub fn artifact_to_bytes(a: &Artifact) -> Result<Vec<u8>> {
    a.validate()?;
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(CONTAINER_MAGIC);
    e.u32(CONTAINER_VERSION);
    e.u8(a.kind().tag());
    let h = a.dims();
    for x in [h.num_items, h.embedding_dim, h.engagement_dim, h.interest_dim, h.k_max] {
        e.u64(x as u64);
    }
    e.u8(a.variant().tag());
    match a {
        Artifact::Model(p) => encode_model(&mut e, p),
        Artifact::Policy(p) => {
            e.f64s(&p.interest_map.data);
            e.f64s(&p.item_embeddings.data);
        }
        Artifact::Oracle(env) => {
            encode_model(&mut e, &env.params);
            let c = &env.config;
            for n in [c.phi, c.psi, c.interest_map, c.gamma, c.alpha, c.y] {
                e.normal(n);
            }
            e.f64(c.topic_poisson_rate);
            e.u64(c.seed);
        }
    }
    Ok(e.0)
}

pub fn artifact_from_bytes(bytes: &[u8]) -> Result<Artifact> {
    let mut d = Dec { buf: bytes };
    if d.take(4)? != CONTAINER_MAGIC {
        return Err(Error::Data("not a slate-lab container".into()));
    }
    let version = d.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Data(format!("unsupported container version {version}")));
    }
    let kind = Kind::from_tag(d.u8()?)?;
    let h = DimsHeader {
        num_items: d.usize()?,
        embedding_dim: d.usize()?,
        engagement_dim: d.usize()?,
        interest_dim: d.usize()?,
        k_max: d.usize()?,
    };
    let variant = Variant::from_tag(d.u8()?)?;
    let a = match kind {
        Kind::Model => Artifact::Model(decode_model(&mut d, h, variant)?),
        Kind::Policy => Artifact::Policy(SoftmaxPolicyParams {
            interest_map: d.matrix(h.embedding_dim, h.interest_dim)?,
            item_embeddings: d.matrix(h.num_items, h.embedding_dim)?,
        }),
        Kind::Oracle => {
            let params = decode_model(&mut d, h, variant)?;
            let config = OracleConfig {
                num_items: h.num_items,
                embedding_dim: h.embedding_dim,
                engagement_dim: h.engagement_dim,
                num_topics: h.interest_dim,
                k_max: h.k_max,
                phi: d.normal()?,
                psi: d.normal()?,
                interest_map: d.normal()?,
                gamma: d.normal()?,
                alpha: d.normal()?,
                y: d.normal()?,
                topic_poisson_rate: d.f64()?,
                seed: d.u64()?,
            };
            Artifact::Oracle(OracleEnv { config, params })
        }
    };
    if !d.buf.is_empty() {
        return Err(Error::Data("trailing bytes after container body".into()));
    }
    check_header(&a, h, variant.name())?;
    Ok(a)
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Saves as JSON when the path ends in `.json`, binary otherwise.
pub fn save_artifact(path: &Path, a: &Artifact) -> Result<()> {
    let bytes = if is_json(path) {
        artifact_to_json(a)?.into_bytes()
    } else {
        artifact_to_bytes(a)?
    };
    let mut w = create(path)?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Loads either form, detected by the magic bytes.
pub fn load_artifact(path: &Path) -> Result<Artifact> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let res = if bytes.starts_with(CONTAINER_MAGIC) {
        artifact_from_bytes(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Data("container is neither binary nor UTF-8 JSON".into()))?;
        artifact_from_json(&text)
    };
    res.map_err(|e| relabel(e, path))
}

pub fn split_to_bytes(s: &SessionSplit) -> Result<Vec<u8>> {
    s.validate()?;
    let mut e = Enc(Vec::new());
    e.0.extend_from_slice(SPLIT_MAGIC);
    e.u32(CONTAINER_VERSION);
    e.u64(s.num_items as u64);
    e.u64(s.dropped as u64);
    e.u64(s.counts.len() as u64);
    s.counts.iter().for_each(|&c| e.u64(c));
    e.usizes(&s.users);
    for (v, h) in s.view.iter().zip(&s.hide) {
        e.usizes(v);
        e.usizes(h);
    }
    Ok(e.0)
}

pub fn split_from_bytes(bytes: &[u8]) -> Result<SessionSplit> {
    let mut d = Dec { buf: bytes };
    if d.take(4)? != SPLIT_MAGIC {
        return Err(Error::Data("not a session split file".into()));
    }
    let version = d.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Data(format!("unsupported split version {version}")));
    }
    let num_items = d.usize()?;
    let dropped = d.usize()?;
    let n_counts = d.usize()?;
    if n_counts > d.buf.len() / 8 {
        return Err(Error::Data("truncated binary file".into()));
    }
    let counts = (0..n_counts).map(|_| d.u64()).collect::<Result<Vec<_>>>()?;
    let users = d.usizes()?;
    let mut view = Vec::with_capacity(users.len());
    let mut hide = Vec::with_capacity(users.len());
    for _ in 0..users.len() {
        view.push(d.usizes()?);
        hide.push(d.usizes()?);
    }
    if !d.buf.is_empty() {
        return Err(Error::Data("trailing bytes after split body".into()));
    }
    let s = SessionSplit {
        num_items,
        users,
        view,
        hide,
        counts,
        dropped,
    };
    s.validate()?;
    Ok(s)
}

pub fn save_split(path: &Path, s: &SessionSplit) -> Result<()> {
    let bytes = split_to_bytes(s)?;
    let mut w = create(path)?;
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path) -> Result<SessionSplit> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    split_from_bytes(&bytes).map_err(|e| relabel(e, path))
}
