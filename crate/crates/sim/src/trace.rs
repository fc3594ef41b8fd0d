//! The `trace.json` artifact: everything needed to audit a run.

use std::fs;
use std::path::Path;

use base64::Engine;
use eflsim_core::codec::{deserialize_model, serialize_model, SCHEMA};
use eflsim_core::metrics::ScoreReport;
use eflsim_core::server::{FederationConfig, RoundRecord, TerminationReason};
use eflsim_core::ModelTree;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};

pub const TOOL: &str = "eflsim";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactInfo {
    pub tool: String,
    pub version: String,
    /// Wire and checkpoint format of embedded model bytes.
    pub model_schema: String,
    pub master_seed: u64,
}

impl ArtifactInfo {
    pub fn current(master_seed: u64) -> Self {
        Self { tool: TOOL.into(), version: VERSION.into(), model_schema: SCHEMA.into(), master_seed }
    }
}

/// Header comment carried by every text output file.
pub fn provenance(master_seed: u64) -> String {
    format!("{TOOL} {VERSION} master_seed={master_seed}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalGel {
    pub label: String,
    pub version: u32,
    /// Base models reachable in the tree, counted with repetition.
    pub leaf_count: usize,
    pub unique_leaves: usize,
    pub pooled_test: ScoreReport,
    /// Canonical model bytes, base64 (standard alphabet, padded).
    pub model_base64: String,
}

impl FinalGel {
    pub fn decode_model(&self) -> Result<ModelTree> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.model_base64)
            .map_err(|e| SimError::Trace(format!("final_gel.model_base64: {e}")))?;
        Ok(deserialize_model(&bytes)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDocument {
    pub artifact: ArtifactInfo,
    /// The experiment as run, CLI overrides applied. Output settings are
    /// left out so the document depends only on what was computed.
    pub experiment: ExperimentConfig,
    pub federation: FederationConfig,
    pub rounds: Vec<RoundRecord>,
    pub termination: TerminationReason,
    pub final_gel: FinalGel,
}

impl TraceDocument {
    pub fn final_gel_info(gel: &ModelTree, pooled_test: ScoreReport) -> FinalGel {
        FinalGel {
            label: gel.label().into(),
            version: gel.id().version,
            leaf_count: gel.leaf_count(),
            unique_leaves: gel.unique_base_leaves().len(),
            pooled_test,
            model_base64: base64::engine::general_purpose::STANDARD.encode(serialize_model(gel)),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("trace serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        let doc: Self = serde_json::from_str(&text).map_err(|e| SimError::Trace(format!("{}: {e}", path.display())))?;
        doc.check().map_err(|m| SimError::Trace(format!("{}: {m}", path.display())))?;
        Ok(doc)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.artifact.tool != TOOL {
            return Err(format!("written by {:?}, not {TOOL}", self.artifact.tool));
        }
        if self.rounds.is_empty() {
            return Err("no rounds recorded".into());
        }
        for (i, r) in self.rounds.iter().enumerate() {
            if r.round as usize != i + 1 {
                return Err(format!("round {} recorded at position {}", r.round, i + 1));
            }
            if r.nodes.is_empty() {
                return Err(format!("round {} has no node entries", r.round));
            }
        }
        Ok(())
    }
}
