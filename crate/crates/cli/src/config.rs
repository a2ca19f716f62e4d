//! Strict JSON experiment configuration with sweeps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

use crate::error::HarnessError;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment id written into every CSV row.
    pub name: String,
    pub problem: ProblemConfig,
    pub run: RunSection,
    /// Dotted key path -> list of values; the cartesian product defines the cells.
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<Value>>,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Fill the `wall_ms` column. Off by default since timings break byte-identical reruns.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    ReluRegression {
        clients: usize,
        data: DataSource,
        #[serde(default)]
        partition: PartitionRule,
        hidden: usize,
        #[serde(default)]
        lambda: f64,
        #[serde(default)]
        constraint: SetSpec,
    },
    LogisticHyper {
        clients: usize,
        data: DataSource,
        #[serde(default)]
        partition: PartitionRule,
        #[serde(default = "default_validation_fraction")]
        validation_fraction: f64,
        #[serde(default)]
        test_fraction: Option<f64>,
        #[serde(default = "default_reg_floor")]
        reg_floor: f64,
        #[serde(default = "default_reg_ceiling")]
        reg_ceiling: f64,
    },
    FairMinimax {
        clients: usize,
        data: DataSource,
        #[serde(default)]
        partition: PartitionRule,
        hidden: usize,
        lambda: f64,
        #[serde(default)]
        constraint: SetSpec,
    },
    ToyBilevel {
        #[serde(default = "default_toy_dim")]
        dim: usize,
        #[serde(default = "one")]
        clients: usize,
        #[serde(default = "default_half_width")]
        half_width: f64,
    },
    QuadraticBilevel {
        clients: usize,
        upper_dim: usize,
        lower_dim: usize,
        #[serde(default)]
        noise: f64,
    },
    Cournot {
        clients: usize,
        followers: usize,
        b: f64,
        #[serde(default = "default_samples_per_client")]
        samples_per_client: usize,
    },
}

fn default_validation_fraction() -> f64 {
    0.3
}
fn default_reg_floor() -> f64 {
    0.01
}
fn default_reg_ceiling() -> f64 {
    10.0
}
fn default_toy_dim() -> usize {
    2
}
fn default_half_width() -> f64 {
    1.0
}
fn default_samples_per_client() -> usize {
    100
}

impl ProblemConfig {
    pub fn clients(&self) -> usize {
        match self {
            ProblemConfig::ReluRegression { clients, .. }
            | ProblemConfig::LogisticHyper { clients, .. }
            | ProblemConfig::FairMinimax { clients, .. }
            | ProblemConfig::ToyBilevel { clients, .. }
            | ProblemConfig::QuadraticBilevel { clients, .. }
            | ProblemConfig::Cournot { clients, .. } => *clients,
        }
    }

    fn data(&self) -> Option<&DataSource> {
        match self {
            ProblemConfig::ReluRegression { data, .. }
            | ProblemConfig::LogisticHyper { data, .. }
            | ProblemConfig::FairMinimax { data, .. } => Some(data),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        samples: usize,
        features: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        /// Raw label mapped to +1 when labels are not binary.
        #[serde(default)]
        positive_label: Option<String>,
    },
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionRule {
    #[default]
    Iid,
    Dirichlet {
        alpha: f64,
    },
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    #[default]
    Whole,
    Nonneg,
    Box {
        lo: f64,
        hi: f64,
    },
    Ball {
        radius: f64,
    },
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub gamma: f64,
    pub eta: f64,
    pub local_steps: usize,
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub parallel_clients: bool,
    #[serde(default = "one")]
    pub batch_size: usize,
    #[serde(default = "one")]
    pub smoothing_draws: usize,
    #[serde(default = "default_residual_every")]
    pub residual_every: usize,
    #[serde(default = "default_residual_samples")]
    pub residual_samples: usize,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub lower: LowerSection,
    #[serde(default)]
    pub two_stage: TwoStageSection,
}

fn default_residual_every() -> usize {
    10
}
fn default_residual_samples() -> usize {
    1000
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    Given(Vec<f64>),
    UniformBox { lo: f64, hi: f64 },
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec::UniformBox { lo: -1.0, hi: 1.0 }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LowerSection {
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default = "default_certificate")]
    pub certificate: f64,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default)]
    pub exact: bool,
}

fn default_certificate() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl Default for LowerSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleSpec::default(),
            certificate: 1.0,
            warm_start: true,
            exact: false,
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    #[default]
    Printed,
    Theorem {
        scale: f64,
    },
}

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TwoStageSection {
    #[serde(default)]
    pub tau: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default)]
    pub loss_samples: Option<usize>,
}

/// One point of the sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Canonical coordinate string, e.g. `run.eta=0.1,run.local_steps=10`.
    pub key: String,
    pub config: ExperimentConfig,
}

/// A parsed configuration and its expanded sweep grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedConfig {
    pub base: ExperimentConfig,
    pub cells: Vec<Cell>,
    /// Directory of the config file; relative data paths resolve against it.
    pub base_dir: PathBuf,
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ParsedConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_str(&text, &base_dir)
}

/// Parses configuration text; `base_dir` resolves relative data paths.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ParsedConfig, HarnessError> {
    let raw: Value = serde_json::from_str(text)
        .map_err(|e| HarnessError::Config(format!("syntax error at line {}, column {}: {e}", e.line(), e.column())))?;
    let mut de = serde_json::Deserializer::from_str(text);
    let mut base: ExperimentConfig = deserialize_with_path(&mut de, Some(text))?;
    resolve_paths(&mut base, base_dir);
    validate(&base, "")?;
    if base.sweep.values().any(Vec::is_empty) {
        let key = base.sweep.iter().find(|(_, v)| v.is_empty()).map(|(k, _)| k.clone()).unwrap_or_default();
        return Err(HarnessError::Config(format!("sweep.{key}: sweep lists must be non-empty")));
    }
    let cells = expand(&raw, &base, base_dir)?;
    Ok(ParsedConfig {
        base,
        cells,
        base_dir: base_dir.to_path_buf(),
    })
}

fn deserialize_with_path<'de, T, D>(de: D, text: Option<&str>) -> Result<T, HarnessError>
where
    T: DeserializeOwned,
    D: serde::Deserializer<'de, Error = serde_json::Error>,
{
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.inner();
        let mut msg = inner.to_string();
        if let Some(hint) = suggestion(&msg) {
            msg.push_str(&format!(" (did you mean \"{hint}\"?)"));
        }
        let location = match text {
            Some(_) if inner.line() > 0 => format!(" at line {}", inner.line()),
            _ => String::new(),
        };
        let path = if path == "." { String::new() } else { format!("{path}: ") };
        HarnessError::Config(format!("{path}{msg}{location}"))
    })
}

/// Nearest expected key for an "unknown field" or "unknown variant" message.
fn suggestion(msg: &str) -> Option<String> {
    let unknown = msg
        .strip_prefix("unknown field `")
        .or_else(|| msg.strip_prefix("unknown variant `"))?;
    let name = &unknown[..unknown.find('`')?];
    let expected = &unknown[unknown.find("expected")?..];
    expected
        .split('`')
        .skip(1)
        .step_by(2)
        .map(|cand| (strsim::levenshtein(name, cand), cand))
        .filter(|(d, cand)| *d <= 2.max(cand.len() / 3))
        .min()
        .map(|(_, c)| c.to_string())
}

fn resolve_paths(cfg: &mut ExperimentConfig, base_dir: &Path) {
    let data = match &mut cfg.problem {
        ProblemConfig::ReluRegression { data, .. }
        | ProblemConfig::LogisticHyper { data, .. }
        | ProblemConfig::FairMinimax { data, .. } => data,
        _ => return,
    };
    if let DataSource::Csv { path, .. } = data {
        if path.is_relative() {
            *path = base_dir.join(&*path);
        }
    }
}

fn err_at(prefix: &str, key: &str, msg: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{prefix}{key}: {msg}"))
}

/// Semantic checks; `prefix` names the sweep cell in messages.
pub fn validate(cfg: &ExperimentConfig, prefix: &str) -> Result<(), HarnessError> {
    let r = &cfg.run;
    if r.local_steps == 0 {
        return Err(err_at(prefix, "run.local_steps", "H ≥ 1 required"));
    }
    if r.rounds == 0 {
        return Err(err_at(prefix, "run.rounds", "rounds must be ≥ 1"));
    }
    if !(r.gamma >= 0.0) || !r.gamma.is_finite() {
        return Err(err_at(prefix, "run.gamma", "must be finite and ≥ 0"));
    }
    if !(r.eta > 0.0) || !r.eta.is_finite() {
        return Err(err_at(prefix, "run.eta", "must be > 0"));
    }
    if r.batch_size == 0 {
        return Err(err_at(prefix, "run.batch_size", "must be ≥ 1"));
    }
    if r.smoothing_draws == 0 {
        return Err(err_at(prefix, "run.smoothing_draws", "must be ≥ 1"));
    }
    if cfg.replications == 0 {
        return Err(err_at(prefix, "replications", "must be ≥ 1"));
    }
    if cfg.problem.clients() == 0 {
        return Err(err_at(prefix, "problem.clients", "must be ≥ 1"));
    }
    if let InitSpec::UniformBox { lo, hi } = r.init {
        if !(lo <= hi) {
            return Err(err_at(prefix, "run.init.uniform_box", "needs lo ≤ hi"));
        }
    }
    if let Some(DataSource::Csv { path, .. }) = cfg.problem.data() {
        if !path.is_file() {
            return Err(err_at(prefix, "problem.data.csv.path", format!("file {} does not exist", path.display())));
        }
    }
    if let Some(DataSource::Synthetic { samples, features }) = cfg.problem.data() {
        if *samples == 0 || *features == 0 {
            return Err(err_at(prefix, "problem.data.synthetic", "samples and features must be ≥ 1"));
        }
    }
    if let ProblemConfig::Cournot { followers, b, samples_per_client, .. } = &cfg.problem {
        if *followers == 0 || *samples_per_client == 0 {
            return Err(err_at(prefix, "problem.followers", "followers and samples_per_client must be ≥ 1"));
        }
        if !(*b > 0.0) {
            return Err(err_at(prefix, "problem.b", "must be > 0"));
        }
    }
    if let Some(t) = r.two_stage.tau {
        if !(t >= 0.0) {
            return Err(err_at(prefix, "run.two_stage.tau", "must be ≥ 0"));
        }
    }
    Ok(())
}

/// Canonical JSON text of a sweep value, used in cell keys.
fn canonical(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), HarnessError> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("sweep.{path}: `{}` is not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(HarnessError::Config(format!("sweep key `{path}` is empty")))
}

fn expand(raw: &Value, base: &ExperimentConfig, base_dir: &Path) -> Result<Vec<Cell>, HarnessError> {
    let mut stripped = raw.clone();
    if let Some(obj) = stripped.as_object_mut() {
        obj.remove("sweep");
    }
    let keys: Vec<(&String, &Vec<Value>)> = base.sweep.iter().collect();
    let mut cells = Vec::new();
    let mut idx = vec![0usize; keys.len()];
    loop {
        let mut doc = stripped.clone();
        let mut coords = Vec::with_capacity(keys.len());
        for (d, (k, vals)) in keys.iter().enumerate() {
            if k.split('.').next() == Some("sweep") {
                return Err(HarnessError::Config(format!("sweep.{k}: cannot sweep the sweep table")));
            }
            set_path(&mut doc, k, vals[idx[d]].clone())?;
            coords.push(format!("{k}={}", canonical(&vals[idx[d]])));
        }
        let key = if coords.is_empty() { "base".to_string() } else { coords.join(",") };
        let mut config: ExperimentConfig = deserialize_with_path(doc, None)
            .map_err(|e| HarnessError::Config(format!("cell [{key}]: {e}")))?;
        resolve_paths(&mut config, base_dir);
        validate(&config, &format!("cell [{key}]: "))?;
        config.sweep.clear();
        cells.push(Cell { key, config });

        let mut d = keys.len();
        loop {
            if d == 0 {
                return Ok(cells);
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < keys[d].1.len() {
                break;
            }
            idx[d] = 0;
        }
    }
}
