//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7
//! nodes = 5
//!
//! [data]
//! source = "synthetic"
//! train_per_label = [270, 777]
//! test_per_label = [46, 78]
//! dim = 4
//! separation = 2.0
//!
//! [partition]
//! strategy = "paper-5node"
//! ```
//!
//! Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use eflsim_core::learners::{default_roster, FineTuneOverrides, RosterEntry};
use eflsim_core::server::FederationConfig;
use eflsim_core::FusionRule;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

fn default_nodes() -> u32 {
    5
}

fn default_max_rounds() -> u32 {
    50
}

fn default_positive_label() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_nodes")]
    pub nodes: u32,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default)]
    pub fusion: FusionRule,
    #[serde(default = "default_positive_label")]
    pub positive_label: usize,
    #[serde(default)]
    pub flatten_gel: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub roster: RosterConfig,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// Gaussian blobs, one per label, drawn from the master seed.
    Synthetic {
        train_per_label: Vec<usize>,
        test_per_label: Vec<usize>,
        dim: usize,
        separation: f64,
        /// Node `k` of `n` has its features moved by
        /// `node_shift * (k - (n + 1) / 2)` along the last axis.
        #[serde(default)]
        node_shift: f64,
    },
    /// Labeled CSV files; relative paths are taken from the config file's
    /// directory.
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        header: bool,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Round-robin deal of each shuffled label.
    #[default]
    #[serde(rename = "uniform")]
    Uniform,
    #[serde(rename = "dirichlet")]
    Dirichlet { alpha: f64 },
    /// Exact counts, `train[node][label]`.
    #[serde(rename = "table")]
    Table { train: Vec<Vec<usize>>, test: Vec<Vec<usize>> },
    /// The five-hospital table, scaled to the data's label totals.
    #[serde(rename = "paper-5node")]
    Paper5Node,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RosterPreset {
    #[default]
    Default,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterConfig {
    #[serde(default)]
    pub preset: RosterPreset,
    /// Keep only the first `size` preset entries.
    #[serde(default)]
    pub size: Option<usize>,
    /// Explicit roster; replaces the preset when non-empty.
    #[serde(default)]
    pub learners: Vec<RosterEntry>,
}

impl RosterConfig {
    pub fn resolve(&self) -> Vec<RosterEntry> {
        let mut roster = if self.learners.is_empty() {
            match self.preset {
                RosterPreset::Default => default_roster(),
            }
        } else {
            self.learners.clone()
        };
        if let Some(k) = self.size {
            roster.truncate(k);
        }
        roster
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTunePreset {
    /// Each leaf keeps its own training settings.
    None,
    /// Learning rate 1e-5 for every leaf.
    PaperFinetune,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    #[serde(default)]
    pub preset: Option<FineTunePreset>,
    /// Explicit values win over the preset.
    #[serde(default)]
    pub max_epochs: Option<u32>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
}

impl FineTuneConfig {
    pub fn resolve(&self) -> FineTuneOverrides {
        let mut o = match self.preset {
            Some(FineTunePreset::PaperFinetune) => FineTuneOverrides::paper_finetune(),
            Some(FineTunePreset::None) | None => FineTuneOverrides::default(),
        };
        if self.max_epochs.is_some() {
            o.max_epochs = self.max_epochs;
        }
        if self.learning_rate.is_some() {
            o.learning_rate = self.learning_rate;
        }
        o
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Also write SVG charts next to the report tables.
    #[serde(default)]
    pub svg: bool,
    /// Write every stored model and the final ensemble to `models/`.
    #[serde(default = "default_true")]
    pub checkpoints: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: None, svg: false, checkpoints: true }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub max_rounds: Option<u32>,
    pub fusion: Option<FusionRule>,
    pub nodes: Option<u32>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))
    }

    /// Reads a config file and makes its CSV paths absolute.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DataConfig::Csv { train, test, .. } = &mut cfg.data {
            for p in [train, test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.output.dir = Some(out.clone());
        }
        if let Some(r) = o.max_rounds {
            self.max_rounds = r;
        }
        if let Some(f) = o.fusion {
            self.fusion = f;
        }
        if let Some(n) = o.nodes {
            self.nodes = n;
        }
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            n_nodes: self.nodes,
            roster: self.roster.resolve(),
            fusion: self.fusion,
            max_rounds: self.max_rounds,
            master_seed: self.seed,
            finetune: self.finetune.resolve(),
            positive_label: self.positive_label,
            flatten_gel: self.flatten_gel,
        }
    }

    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SimError::Config(m));
        self.federation().validate().map_err(|e| SimError::Config(e.to_string()))?;
        if let DataConfig::Synthetic { train_per_label, test_per_label, dim, separation, node_shift } = &self.data {
            if train_per_label.len() < 2 || train_per_label.len() != test_per_label.len() {
                return bad(format!(
                    "data: train_per_label and test_per_label need the same length >= 2, got {} and {}",
                    train_per_label.len(),
                    test_per_label.len()
                ));
            }
            if *dim == 0 {
                return bad("data: dim must be >= 1".into());
            }
            if !(separation.is_finite() && *separation >= 0.0) {
                return bad(format!("data: separation must be finite and >= 0, got {separation}"));
            }
            if !node_shift.is_finite() {
                return bad(format!("data: node_shift must be finite, got {node_shift}"));
            }
            if self.positive_label >= train_per_label.len() {
                return bad(format!(
                    "positive_label {} out of range for {} labels",
                    self.positive_label,
                    train_per_label.len()
                ));
            }
        }
        match &self.partition {
            PartitionConfig::Dirichlet { alpha } if !(alpha.is_finite() && *alpha > 0.0) => {
                bad(format!("partition: alpha must be finite and > 0, got {alpha}"))
            }
            PartitionConfig::Table { train, test }
                if train.len() != self.nodes as usize || test.len() != self.nodes as usize =>
            {
                bad(format!(
                    "partition: table has {} train and {} test rows for {} nodes",
                    train.len(),
                    test.len(),
                    self.nodes
                ))
            }
            PartitionConfig::Paper5Node if self.nodes != 5 => {
                bad(format!("partition: paper-5node needs exactly 5 nodes, got {}", self.nodes))
            }
            _ => Ok(()),
        }
    }
}
