//! Resolved run configuration. Config files are JSON objects with flat dotted keys
//! (`"train.learning_rate": 0.01`); flags override the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use seqsel::oracle::{RemoteConfig, SyntheticTaskSpec};
use seqsel::{SearchConfig, TrainConfig};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Checkpoint directory written by `train`.
    pub checkpoint: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
    /// Per-step beam log written by `infer`.
    pub trace: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "run/task.jsonl".into(),
            checkpoint: "run/checkpoint".into(),
            index: "run/index.bin".into(),
            reports: "run/reports".into(),
            trace: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_candidates: usize,
    /// Training plus evaluation queries.
    pub n_queries: usize,
    /// Queries reserved for `infer`, `ablate` and `transfer`; never trained on.
    pub eval_queries: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_candidates: 200,
            n_queries: 700,
            eval_queries: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub remote: RemoteConfig,
    /// JSON prompt template for the remote oracle.
    pub template: Option<PathBuf>,
    /// Persistent verdict cache.
    pub cache: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Synthetic,
            remote: RemoteConfig::default(),
            template: None,
            cache: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub fixed_lengths: Vec<usize>,
    /// Sequence length of the nearest-neighbour baseline.
    pub knn_k: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            fixed_lengths: vec![1, 3, 5, 7],
            knn_k: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Datasets of the training families.
    pub sources: Vec<PathBuf>,
    pub target: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every random stream is derived from this seed.
    pub seed: u64,
    pub paths: Paths,
    /// Generator and oracle parameters for `gen`.
    pub task: SyntheticTaskSpec,
    pub data: DataConfig,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub ablate: AblationConfig,
    pub transfer: TransferConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            task: default_task(),
            data: DataConfig::default(),
            oracle: OracleConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
            ablate: AblationConfig::default(),
            transfer: TransferConfig::default(),
        }
    }
}

/// Mixed-skill family: queries need one to four of twelve skills.
pub fn default_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        skill_count: 12,
        skills_per_item: 4,
        min_skills_per_item: Some(1),
        recency_decay: 0.5,
        length_budget: 4,
        ..SyntheticTaskSpec::default()
    }
}

/// Flattens nested objects into dotted keys; arrays and scalars are leaves.
pub fn flatten(value: &Value) -> Map<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    out
}

/// Sets `key` (dotted) in `root`, creating intermediate objects for optional sections.
fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => return Err(CliError::Config(format!("unknown config key {key}"))),
        };
        if i + 1 == parts.len() {
            if !map.contains_key(*part) && !optional_leaf(key) {
                return Err(CliError::Config(format!("unknown config key {key}")));
            }
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key}")))?;
    }
    Err(CliError::Config(format!("empty config key {key:?}")))
}

/// Keys whose default is absent from the serialized form.
fn optional_leaf(key: &str) -> bool {
    matches!(
        key,
        "task.min_skills_per_item" | "train.model.matrix_init_scale" | "search.fixed_length" | "paths.trace"
    ) || key.starts_with("search.retrieval.")
}

impl RunConfig {
    /// Applies dotted-key overrides in order.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(self).map_err(|e| CliError::Config(e.to_string()))?;
        for (key, value) in overrides {
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| CliError::Config(format!("invalid config value: {e}")))
    }

    /// Defaults overridden by a flat-key JSON file.
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("reading config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("parsing config {}: {e}", path.display())))?;
        let Value::Object(map) = value else {
            return Err(CliError::Config(format!("{} must hold a JSON object", path.display())));
        };
        let entries: Vec<(String, Value)> = map.into_iter().collect();
        Self::default().with_overrides(entries.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    /// Flat-key JSON, the format [`from_file`](Self::from_file) reads.
    pub fn to_flat_json(&self) -> Value {
        Value::Object(flatten(&serde_json::to_value(self).expect("config serializes")))
    }
}

/// Parses `key=value`, reading the value as JSON and falling back to a plain string.
pub fn parse_assignment(s: &str) -> Result<(String, Value), String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected key=value, got {s}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
