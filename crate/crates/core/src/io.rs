//! Dataset records, artifact files and flat key=value run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::basedist::{AtomCountTable, LengthPrior};
use crate::crystal::{params_from_matrix, AtomTypes, Crystal, LatticeMatrix, LatticeParams};
use crate::engine::{AnnealFlags, RunConfig, Sample};
use crate::error::{Error, Result};
use crate::flowmatch::Task;
use crate::geometry::TorusCloud;

pub const SEED_ENV: &str = "FLOWCRYST_SEED";

/// Largest tolerated fraction of unparseable lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

/// Formats a double with 17 significant digits in the shortest of fixed or exponent form.
pub fn fmt_g17(x: f64) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return "null".into();
    }
    let sci = format!("{x:.16e}");
    let (mant, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..17).contains(&exp) {
        let s = format!("{:.*}", (16 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{}", trim_zeros(mant), exp)
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatticeField {
    Params { a: f64, b: f64, c: f64, alpha: f64, beta: f64, gamma: f64 },
    /// Rows are the lattice vectors.
    Matrix([[f64; 3]; 3]),
}

/// One line of a crystal JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrystalRecord {
    pub id: String,
    pub atomic_numbers: Vec<i64>,
    pub frac_coords: Vec<[f64; 3]>,
    pub lattice: LatticeField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    /// `false` marks a generation that failed to decode; it never parses to a crystal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invalid_reason: Option<String>,
}

impl CrystalRecord {
    pub fn from_crystal(id: impl Into<String>, c: &Crystal, split: Option<Split>) -> Self {
        let l = &c.lattice;
        Self {
            id: id.into(),
            atomic_numbers: c.kinds().iter().map(|&k| AtomTypes::atomic_number(k)).collect(),
            frac_coords: c.frac.coords().to_vec(),
            lattice: LatticeField::Params { a: l.a, b: l.b, c: l.c, alpha: l.alpha, beta: l.beta, gamma: l.gamma },
            split,
            valid: None,
            invalid_reason: None,
        }
    }

    pub fn from_sample(id: impl Into<String>, s: &Sample) -> Self {
        let [a, b, c] = s.lengths;
        let [alpha, beta, gamma] = s.angles;
        Self {
            id: id.into(),
            atomic_numbers: s.kinds.iter().map(|&k| AtomTypes::atomic_number(k)).collect(),
            frac_coords: s.frac.coords().to_vec(),
            lattice: LatticeField::Params { a, b, c, alpha, beta, gamma },
            split: None,
            valid: Some(s.is_valid()),
            invalid_reason: s.invalid.clone(),
        }
    }

    pub fn to_crystal(&self) -> Result<Crystal> {
        if self.valid == Some(false) {
            return Err(Error::Data(format!(
                "record {} is an invalid sample: {}",
                self.id,
                self.invalid_reason.as_deref().unwrap_or("unknown reason")
            )));
        }
        let kinds = self.atomic_numbers.iter().map(|&z| AtomTypes::kind_from_atomic_number(z)).collect::<Result<_>>()?;
        let lattice = match &self.lattice {
            LatticeField::Params { a, b, c, alpha, beta, gamma } => LatticeParams::new(*a, *b, *c, *alpha, *beta, *gamma)?,
            LatticeField::Matrix(rows) => params_from_matrix(&LatticeMatrix::from_row_vectors(*rows))?,
        };
        if self.frac_coords.iter().flatten().any(|x| !(0.0..1.0).contains(x)) {
            return Err(Error::Data(format!("record {}: fractional coordinates must lie in [0, 1)", self.id)));
        }
        Crystal::new(AtomTypes::new(kinds)?, TorusCloud::new(self.frac_coords.clone())?, lattice)
    }

    /// Single-line JSON with doubles at 17 significant digits.
    pub fn to_json_line(&self) -> String {
        let mut s = String::new();
        write!(s, "{{\"id\":{}", Value::String(self.id.clone())).unwrap();
        let z: Vec<String> = self.atomic_numbers.iter().map(|z| z.to_string()).collect();
        write!(s, ",\"atomic_numbers\":[{}]", z.join(",")).unwrap();
        let f: Vec<String> = self.frac_coords.iter().map(triple).collect();
        write!(s, ",\"frac_coords\":[{}]", f.join(",")).unwrap();
        match &self.lattice {
            LatticeField::Params { a, b, c, alpha, beta, gamma } => {
                let kv: Vec<String> = [("a", a), ("b", b), ("c", c), ("alpha", alpha), ("beta", beta), ("gamma", gamma)]
                    .iter()
                    .map(|(k, v)| format!("\"{k}\":{}", fmt_g17(**v)))
                    .collect();
                write!(s, ",\"lattice\":{{{}}}", kv.join(",")).unwrap();
            }
            LatticeField::Matrix(rows) => {
                let r: Vec<String> = rows.iter().map(triple).collect();
                write!(s, ",\"lattice\":[{}]", r.join(",")).unwrap();
            }
        }
        if let Some(sp) = self.split {
            write!(s, ",\"split\":\"{}\"", sp.as_str()).unwrap();
        }
        if let Some(v) = self.valid {
            write!(s, ",\"valid\":{v}").unwrap();
        }
        if let Some(r) = &self.invalid_reason {
            write!(s, ",\"invalid_reason\":{}", Value::String(r.clone())).unwrap();
        }
        s.push('}');
        s
    }
}

fn triple(r: &[f64; 3]) -> String {
    format!("[{},{},{}]", fmt_g17(r[0]), fmt_g17(r[1]), fmt_g17(r[2]))
}

/// Fractions used to assign records that carry no split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.6, val: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// `(line number, reason)` of lines that are not valid records.
    pub malformed: Vec<(usize, String)>,
    /// `(record id, reason)` of records that parse but describe no valid crystal.
    pub rejected: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Crystal>,
    pub val: Vec<Crystal>,
    pub test: Vec<Crystal>,
    /// Atom-count table of the training split.
    pub table: AtomCountTable,
    pub report: LoadReport,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Crystal] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn is_header(v: &Value) -> bool {
    v.as_object().is_some_and(|o| o.len() == 1 && o.contains_key("header"))
}

/// Parses JSON lines into records, skipping blank lines and artifact headers.
pub fn parse_records(text: &str) -> Result<(Vec<CrystalRecord>, LoadReport)> {
    let mut records = Vec::new();
    let mut report = LoadReport::default();
    let mut lines = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => {
                lines += 1;
                report.malformed.push((i + 1, e.to_string()));
                continue;
            }
        };
        if is_header(&value) {
            continue;
        }
        lines += 1;
        match serde_json::from_value::<CrystalRecord>(value) {
            Ok(r) => records.push(r),
            Err(e) => report.malformed.push((i + 1, e.to_string())),
        }
    }
    if lines == 0 {
        return Err(Error::InsufficientData("no records in input".into()));
    }
    if report.malformed.len() as f64 > MAX_MALFORMED_FRACTION * lines as f64 {
        let (line, reason) = &report.malformed[0];
        return Err(Error::Data(format!(
            "{} of {lines} lines are malformed (first at line {line}: {reason})",
            report.malformed.len()
        )));
    }
    Ok((records, report))
}

/// Loads a crystal JSON-lines dataset and assigns splits.
pub fn load_dataset(path: &Path, spec: &SplitSpec) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    dataset_from_str(&text, spec)
}

pub fn dataset_from_str(text: &str, spec: &SplitSpec) -> Result<Dataset> {
    if !(spec.train >= 0.0 && spec.val >= 0.0 && spec.train + spec.val <= 1.0) {
        return Err(Error::Config(format!("invalid split fractions {} / {}", spec.train, spec.val)));
    }
    let (records, mut report) = parse_records(text)?;
    let mut labelled = Vec::new();
    let mut unlabelled = Vec::new();
    for r in records {
        match r.to_crystal() {
            Ok(c) => match r.split {
                Some(s) => labelled.push((s, c)),
                None => unlabelled.push(c),
            },
            Err(e) => report.rejected.push((r.id.clone(), e.to_string())),
        }
    }
    let mut order: Vec<usize> = (0..unlabelled.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n = unlabelled.len();
    let n_train = (spec.train * n as f64).round() as usize;
    let n_val = ((spec.val * n as f64).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<Crystal>> = unlabelled.into_iter().map(Some).collect();
    for (rank, &i) in order.iter().enumerate() {
        let s = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        labelled.push((s, slots[i].take().unwrap()));
    }
    let mut ds = Dataset { train: vec![], val: vec![], test: vec![], table: AtomCountTable { counts: BTreeMap::new() }, report };
    for (s, c) in labelled {
        match s {
            Split::Train => ds.train.push(c),
            Split::Val => ds.val.push(c),
            Split::Test => ds.test.push(c),
        }
    }
    if ds.train.is_empty() {
        return Err(Error::InsufficientData("training split is empty".into()));
    }
    ds.table = AtomCountTable::from_crystals(&ds.train)?;
    Ok(ds)
}

/// Reads generations; invalid samples become `None`.
pub fn load_generations(path: &Path) -> Result<Vec<Option<Crystal>>> {
    let (records, _) = parse_records(&std::fs::read_to_string(path)?)?;
    Ok(records.iter().map(|r| r.to_crystal().ok()).collect())
}

/// Reads compositions (atom classes) from lines carrying `atomic_numbers`.
pub fn load_compositions(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        if is_header(&v) {
            continue;
        }
        let id = v.get("id").and_then(Value::as_str).map(str::to_string).unwrap_or_else(|| format!("comp-{i}"));
        let zs = v
            .get("atomic_numbers")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Data(format!("line {}: missing atomic_numbers", i + 1)))?;
        let kinds = zs
            .iter()
            .map(|z| {
                z.as_i64()
                    .ok_or_else(|| Error::Data(format!("line {}: non-integer atomic number", i + 1)))
                    .and_then(AtomTypes::kind_from_atomic_number)
            })
            .collect::<Result<Vec<_>>>()?;
        AtomTypes::new(kinds.clone())?;
        out.push((id, kinds));
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("no compositions in input".into()));
    }
    Ok(out)
}

/// Header embedded as the first line of every JSON artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub config: BTreeMap<String, String>,
}

impl ArtifactHeader {
    pub fn for_config(cfg: &RunConfig) -> Self {
        Self { config_hash: config_hash(cfg), seed: cfg.seed, config: config_to_map(cfg) }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "header": self }).to_string()
    }
}

/// Writes a header line followed by one line per record.
pub fn write_records(path: &Path, header: Option<&ArtifactHeader>, records: &[CrystalRecord]) -> Result<()> {
    let mut s = String::new();
    if let Some(h) = header {
        s.push_str(&h.to_json_line());
        s.push('\n');
    }
    for r in records {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Fitted base-distribution parameters as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub length_prior: LengthPrior,
    pub atom_counts: AtomCountTable,
}

impl PriorArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, s + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Format(e.to_string()))?;
        LengthPrior::new(p.length_prior.loc, p.length_prior.scale)?;
        AtomCountTable::new(p.atom_counts.counts.clone())?;
        Ok(p)
    }
}

/// `RunConfig` as ordered `key -> value` strings.
pub fn config_to_map(c: &RunConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("task", c.task.to_string());
    put("learning_rate", fmt_g17(c.learning_rate));
    put("weight_decay", fmt_g17(c.weight_decay));
    put("grad_clip", fmt_g17(c.grad_clip));
    put("epochs", c.epochs.to_string());
    put("batch_size", c.batch_size.to_string());
    put("max_steps", c.max_steps.to_string());
    put("lambda_a", fmt_g17(c.loss_weights.lambda_a));
    put("lambda_f", fmt_g17(c.loss_weights.lambda_f));
    put("lambda_l", fmt_g17(c.loss_weights.lambda_l));
    put("lambda_sce", fmt_g17(c.loss_weights.lambda_sce));
    put("steps", c.steps.to_string());
    put("anneal_slope", fmt_g17(c.anneal_slope));
    put("anneal", c.anneal.to_string());
    put("seed", c.seed.to_string());
    put("hidden_dim", c.net.hidden_dim.to_string());
    put("layers", c.net.layers.to_string());
    put("n_freq", c.net.n_freq.to_string());
    put("time_embed_dim", c.net.time_embed_dim.to_string());
    put("count_embed_dim", c.net.count_embed_dim.to_string());
    put("max_atoms", c.net.max_atoms.to_string());
    put("shard_size", c.net.shard_size.to_string());
    put("layer_norm", c.net.layer_norm.to_string());
    put("zscore_samples", c.zscore_samples.to_string());
    m
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// Applies one `key = value` setting; `task` switches defaults and must come first.
pub fn apply_setting(c: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "task" => {
            let t: Task = v.parse()?;
            if t != c.task {
                *c = RunConfig { seed: c.seed, ..RunConfig::default_for(t) };
            }
        }
        "learning_rate" => c.learning_rate = parse_num(key, v)?,
        "weight_decay" => c.weight_decay = parse_num(key, v)?,
        "grad_clip" => c.grad_clip = parse_num(key, v)?,
        "epochs" => c.epochs = parse_num(key, v)?,
        "batch_size" => c.batch_size = parse_num(key, v)?,
        "max_steps" => c.max_steps = parse_num(key, v)?,
        "lambda_a" => c.loss_weights.lambda_a = parse_num(key, v)?,
        "lambda_f" => c.loss_weights.lambda_f = parse_num(key, v)?,
        "lambda_l" => c.loss_weights.lambda_l = parse_num(key, v)?,
        "lambda_sce" => c.loss_weights.lambda_sce = parse_num(key, v)?,
        "steps" => c.steps = parse_num(key, v)?,
        "anneal_slope" | "slope" => c.anneal_slope = parse_num(key, v)?,
        "anneal" => c.anneal = AnnealFlags::parse(v)?,
        "seed" => c.seed = parse_num(key, v)?,
        "hidden_dim" => c.net.hidden_dim = parse_num(key, v)?,
        "layers" => c.net.layers = parse_num(key, v)?,
        "n_freq" => c.net.n_freq = parse_num(key, v)?,
        "time_embed_dim" => c.net.time_embed_dim = parse_num(key, v)?,
        "count_embed_dim" => c.net.count_embed_dim = parse_num(key, v)?,
        "max_atoms" => c.net.max_atoms = parse_num(key, v)?,
        "shard_size" => c.net.shard_size = parse_num(key, v)?,
        "layer_norm" => c.net.layer_norm = parse_num(key, v)?,
        "zscore_samples" => c.zscore_samples = parse_num(key, v)?,
        other => return Err(Error::Config(format!("unknown config key {other:?}"))),
    }
    Ok(())
}

/// Parses flat `key = value` text (`#` starts a comment) on top of task defaults.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    let task = match entries.iter().find(|(k, _)| k == "task") {
        Some((_, v)) => v.parse()?,
        None => Task::Csp,
    };
    let mut c = RunConfig::default_for(task);
    for (k, v) in entries.iter().filter(|(k, _)| k != "task") {
        apply_setting(&mut c, k, v)?;
    }
    Ok(c)
}

pub fn config_to_string(c: &RunConfig) -> String {
    config_to_map(c).iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// First 16 hex digits of the SHA-256 of the canonical config text.
pub fn config_hash(c: &RunConfig) -> String {
    let digest = Sha256::digest(config_to_string(c).as_bytes());
    hex::encode(digest)[..16].to_string()
}

/// Overrides the seed from the environment when it is set.
pub fn apply_seed_env(c: &mut RunConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        c.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}
