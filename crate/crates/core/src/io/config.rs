//! Run configuration: a TOML document with `[data]`, `[model]`, `[train]`,
//! `[grid]` and `[output]` sections. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::choice::{ChoiceKind, TemperatureSchedule};
use crate::data::{ColumnKind, CsvSchema, PreprocessConfig, DEFAULT_QUANTILES};
use crate::error::{NodeError, Result};
use crate::model::ArchConfig;
use crate::train::{GridSpace, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training CSV; rows are split into train and validation.
    pub train: Option<PathBuf>,
    /// Optional held-out CSV scored after training.
    pub test: Option<PathBuf>,
    pub target: String,
    pub task: TaskKind,
    pub delimiter: char,
    pub val_fraction: f64,
    pub stratify: bool,
    pub quantiles: usize,
    /// Standardise regression targets for training; predictions stay on the raw scale.
    pub normalize_target: bool,
    /// Explicit column kinds; other columns are inferred.
    pub columns: BTreeMap<String, ColumnKind>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train: None,
            test: None,
            target: "target".into(),
            task: TaskKind::Classification,
            delimiter: ',',
            val_fraction: 0.2,
            stratify: true,
            quantiles: DEFAULT_QUANTILES,
            normalize_target: true,
            columns: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceName {
    Entmax,
    Softmax,
    Sparsemax,
    GumbelSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: usize,
    /// Trees in each layer.
    pub trees: usize,
    pub depth: usize,
    /// Defaults to the class count for classification and 1 for regression.
    pub tree_dim: Option<usize>,
    pub choice: ChoiceName,
    /// Entmax α.
    pub alpha: f64,
    /// Gumbel-softmax temperature schedule.
    pub temperature: TemperatureSchedule,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 1,
            trees: 2048,
            depth: 6,
            tree_dim: None,
            choice: ChoiceName::Entmax,
            alpha: 1.5,
            temperature: TemperatureSchedule::default(),
        }
    }
}

impl ModelSection {
    pub fn choice_kind(&self) -> ChoiceKind {
        match self.choice {
            ChoiceName::Entmax => ChoiceKind::Entmax { alpha: self.alpha },
            ChoiceName::Softmax => ChoiceKind::Softmax,
            ChoiceName::Sparsemax => ChoiceKind::Sparsemax,
            ChoiceName::GumbelSoftmax => ChoiceKind::GumbelSoftmax(self.temperature.clone()),
        }
    }

    /// Architecture for a head of width `head_dim`.
    pub fn arch(&self, head_dim: usize) -> ArchConfig {
        ArchConfig {
            num_layers: self.num_layers,
            trees_per_layer: self.trees,
            depth: self.depth,
            tree_dim: self.tree_dim.unwrap_or(head_dim),
            choice: self.choice_kind(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub enabled: bool,
    pub num_layers: Vec<usize>,
    pub total_trees: Vec<usize>,
    pub depth: Vec<usize>,
    pub tree_dim: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpace::default();
        GridSection {
            enabled: false,
            num_layers: g.num_layers,
            total_trees: g.total_trees,
            depth: g.depth,
            tree_dim: g.tree_dim,
        }
    }
}

impl GridSection {
    pub fn space(&self) -> GridSpace {
        GridSpace {
            num_layers: self.num_layers.clone(),
            total_trees: self.total_trees.clone(),
            depth: self.depth.clone(),
            tree_dim: self.tree_dim.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub model: String,
    pub history: String,
    pub metrics: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("."),
            model: "model.node".into(),
            history: "history.jsonl".into(),
            metrics: "metrics.jsonl".into(),
        }
    }
}

impl OutputSection {
    pub fn model_path(&self) -> PathBuf {
        self.dir.join(&self.model)
    }
    pub fn history_path(&self) -> PathBuf {
        self.dir.join(&self.history)
    }
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join(&self.metrics)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub grid: GridSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| NodeError::Config(vec![e.to_string()]))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical TOML rendering; the digest is computed over this text.
    /// Panics if `train.seed` exceeds `i64::MAX`, which validation rejects.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all representable in TOML")
    }

    /// Hex SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_toml().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every problem found, so all of them can be reported at once.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let d = &self.data;
        if d.target.is_empty() {
            errs.push("data.target must name a column".into());
        }
        if !d.delimiter.is_ascii() {
            errs.push(format!("data.delimiter must be a single ASCII character, got {:?}", d.delimiter));
        }
        if !(0.0..1.0).contains(&d.val_fraction) || d.val_fraction == 0.0 {
            errs.push(format!("data.val_fraction must lie in (0, 1), got {}", d.val_fraction));
        }
        if d.quantiles < 2 {
            errs.push(format!("data.quantiles must be at least 2, got {}", d.quantiles));
        }
        let m = &self.model;
        if m.num_layers == 0 {
            errs.push("model.num_layers must be at least 1".into());
        }
        if m.trees == 0 {
            errs.push("model.trees must be at least 1".into());
        }
        if m.depth == 0 || m.depth > crate::odt::MAX_DEPTH {
            errs.push(format!("model.depth must lie in 1..={}, got {}", crate::odt::MAX_DEPTH, m.depth));
        }
        if m.tree_dim == Some(0) {
            errs.push("model.tree_dim must be at least 1".into());
        }
        if let Err(e) = m.choice_kind().validate() {
            errs.push(format!("model: {e}"));
        }
        errs.extend(self.train.validate());
        if self.grid.enabled {
            errs.extend(self.grid.space().validate());
        }
        errs
    }

    pub fn validated(self) -> Result<Self> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(NodeError::Config(errs))
        }
    }

    pub fn csv_schema(&self) -> CsvSchema {
        let mut s = CsvSchema::new(self.data.target.clone(), self.data.task == TaskKind::Classification);
        s.delimiter = self.data.delimiter as u8;
        s.kinds = self.data.columns.clone();
        s
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            quantiles: self.data.quantiles,
            normalize_target: self.data.normalize_target,
        }
    }
}
