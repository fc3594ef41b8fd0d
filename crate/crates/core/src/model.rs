//! Recursive model representation shared by every part of the protocol.
//!
//! A [`ModelTree`] is either a trained base network or an ensemble that fuses
//! the probability outputs of its children. Roster models, local ensembles and
//! global ensembles are all the same type, so a global ensemble from an earlier
//! round can sit next to a roster model in a node's best-two list.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{EflError, Result};
use crate::learners::net;
use crate::learners::LearnerConfig;
use crate::linalg::{argmax, Matrix};

/// Where a model came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Origin {
    /// Trained from roster entry `index` (1-based) before the first aggregation.
    Roster(u32),
    /// Global ensemble built by the server at the end of round `r`.
    GlobalRound(u32),
    /// Local ensemble of `node` in `round`.
    Local { node: u32, round: u32 },
}

impl Origin {
    /// Round in which the model was created; roster models count as round 0.
    pub fn round(&self) -> u32 {
        match *self {
            Origin::Roster(_) => 0,
            Origin::GlobalRound(r) => r,
            Origin::Local { round, .. } => round,
        }
    }
}

/// Provenance identity of a model.
///
/// `label` names the model the way the round tables do ("mlp-3", "GEL@r2").
/// `version` counts fine-tunes. `lineage` fingerprints the chain of training
/// jobs that produced the parameters, so two nodes fine-tuning the same global
/// model get distinct identities even though label and version agree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelId {
    pub label: String,
    pub version: u32,
    pub origin: Origin,
    pub lineage: u64,
}

impl ModelId {
    pub fn new(label: impl Into<String>, origin: Origin, lineage: u64) -> Self {
        Self { label: label.into(), version: 0, origin, lineage }
    }

    /// Key under which parameter values are unique.
    pub fn key(&self) -> (&str, u32, u64) {
        (&self.label, self.version, self.lineage)
    }

    /// Identity after one more round of training under `seed`.
    pub fn bumped(&self, seed: u64) -> Self {
        Self {
            label: self.label.clone(),
            version: self.version + 1,
            origin: self.origin,
            lineage: crate::seed::hash_words(&[self.lineage, seed]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionRule {
    /// Column-wise maximum across children; rows are not renormalized.
    #[default]
    #[serde(rename = "max")]
    MaxProb,
    /// Column-wise arithmetic mean.
    #[serde(rename = "mean")]
    MeanProb,
}

/// Flat parameters plus the layer widths `[d, h1, .., C]` that shape them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn expected_len(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(EflError::contract(format!("invalid shape manifest {dims:?}")));
        }
        let expected = Self::expected_len(&dims);
        if values.len() != expected {
            return Err(EflError::contract(format!(
                "shape {dims:?} needs {expected} parameters, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EflError::contract(format!("parameter {i} is not finite")));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self { dims: dims.to_vec(), values: alloc::vec![0.0; Self::expected_len(dims)] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn n_labels(&self) -> usize {
        *self.dims.last().expect("validated non-empty")
    }

    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { dims: self.dims.clone(), values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseModel {
    pub id: ModelId,
    pub config: LearnerConfig,
    pub params: ParamVector,
}

impl BaseModel {
    pub fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        check_dim(self.params.input_dim(), features)?;
        Ok(net::predict_proba(&self.params, self.config.activation, features))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub id: ModelId,
    pub children: Vec<Arc<ModelTree>>,
    pub fusion: FusionRule,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelTree {
    Base(BaseModel),
    Ensemble(EnsembleModel),
}

impl ModelTree {
    pub fn base(id: ModelId, config: LearnerConfig, params: ParamVector) -> Self {
        ModelTree::Base(BaseModel { id, config, params })
    }

    /// Builds an ensemble, checking the children agree on input and label
    /// dimensions.
    pub fn ensemble(id: ModelId, children: Vec<Arc<ModelTree>>, fusion: FusionRule) -> Result<Self> {
        let first =
            children.first().ok_or_else(|| EflError::contract(format!("ensemble {} has no children", id.label)))?;
        let (d, c) = (first.input_dim(), first.n_labels());
        for ch in &children[1..] {
            if ch.input_dim() != d {
                return Err(EflError::DimensionMismatch { expected: d, actual: ch.input_dim() });
            }
            if ch.n_labels() != c {
                return Err(EflError::contract(format!(
                    "ensemble {} mixes {c}-label and {}-label children",
                    id.label,
                    ch.n_labels()
                )));
            }
        }
        Ok(ModelTree::Ensemble(EnsembleModel { id, children, fusion }))
    }

    pub fn id(&self) -> &ModelId {
        match self {
            ModelTree::Base(b) => &b.id,
            ModelTree::Ensemble(e) => &e.id,
        }
    }

    pub fn label(&self) -> &str {
        &self.id().label
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ModelTree::Base(b) => b.params.input_dim(),
            ModelTree::Ensemble(e) => e.children[0].input_dim(),
        }
    }

    pub fn n_labels(&self) -> usize {
        match self {
            ModelTree::Base(b) => b.params.n_labels(),
            ModelTree::Ensemble(e) => e.children[0].n_labels(),
        }
    }

    /// Per-row class probabilities; ensembles fuse their children's rows.
    pub fn predict_proba(&self, features: &Matrix) -> Result<Matrix> {
        check_dim(self.input_dim(), features)?;
        if features.rows() == 0 {
            return Err(EflError::contract("predict on an empty feature matrix"));
        }
        self.proba_unchecked(features)
    }

    fn proba_unchecked(&self, features: &Matrix) -> Result<Matrix> {
        match self {
            ModelTree::Base(b) => Ok(net::predict_proba(&b.params, b.config.activation, features)),
            ModelTree::Ensemble(e) => {
                let probs = e.children.iter().map(|c| c.proba_unchecked(features)).collect::<Result<Vec<_>>>()?;
                fuse(&probs, e.fusion)
            }
        }
    }

    /// Argmax label per row, ties to the lowest index.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let p = self.predict_proba(features)?;
        Ok(p.iter_rows().map(argmax).collect())
    }

    /// Base leaves in preorder, keeping the first occurrence of each
    /// `(label, version, lineage)`.
    pub fn unique_base_leaves(&self) -> Vec<&BaseModel> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        self.collect_leaves(&mut seen, &mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, seen: &mut BTreeSet<(&'a str, u32, u64)>, out: &mut Vec<&'a BaseModel>) {
        match self {
            ModelTree::Base(b) => {
                if seen.insert(b.id.key()) {
                    out.push(b);
                }
            }
            ModelTree::Ensemble(e) => {
                for c in &e.children {
                    c.collect_leaves(seen, out);
                }
            }
        }
    }

    /// Number of base leaves counting repeats.
    pub fn leaf_count(&self) -> usize {
        match self {
            ModelTree::Base(_) => 1,
            ModelTree::Ensemble(e) => e.children.iter().map(|c| c.leaf_count()).sum(),
        }
    }

    /// Single-level ensemble over the unique leaves of `self`.
    pub fn flattened(&self, id: ModelId, fusion: FusionRule) -> Result<ModelTree> {
        let leaves = self.unique_base_leaves().into_iter().map(|b| Arc::new(ModelTree::Base(b.clone()))).collect();
        ModelTree::ensemble(id, leaves, fusion)
    }

    /// Checks the structural invariants: non-empty ensembles, consistent
    /// dimensions, well-formed finite parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelTree::Base(b) => {
                ParamVector::new(b.params.dims.clone(), b.params.values.clone()).map(|_| ())?;
                let want = b.config.dims(b.params.input_dim(), b.params.n_labels());
                if want != b.params.dims {
                    return Err(EflError::contract(format!(
                        "{}: shape {:?} does not match config {:?}",
                        b.id.label, b.params.dims, want
                    )));
                }
                Ok(())
            }
            ModelTree::Ensemble(e) => {
                ModelTree::ensemble(e.id.clone(), e.children.clone(), e.fusion)?;
                e.children.iter().try_for_each(|c| c.validate())
            }
        }
    }
}

fn check_dim(expected: usize, features: &Matrix) -> Result<()> {
    if features.cols() != expected {
        return Err(EflError::DimensionMismatch { expected, actual: features.cols() });
    }
    Ok(())
}

/// Combines same-shaped probability matrices under `rule`.
pub fn fuse(child_probs: &[Matrix], rule: FusionRule) -> Result<Matrix> {
    let first = child_probs.first().ok_or_else(|| EflError::contract("fuse over no children"))?;
    let (n, c) = (first.rows(), first.cols());
    for (i, m) in child_probs.iter().enumerate() {
        if m.rows() != n || m.cols() != c {
            return Err(EflError::contract(format!("child {i} is {}x{}, expected {n}x{c}", m.rows(), m.cols())));
        }
    }
    let mut out = first.clone();
    match rule {
        FusionRule::MaxProb => {
            for m in &child_probs[1..] {
                for (o, &v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        FusionRule::MeanProb => {
            for m in &child_probs[1..] {
                for (o, &v) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *o += v;
                }
            }
            let k = child_probs.len() as f64;
            out.as_mut_slice().iter_mut().for_each(|o| *o /= k);
        }
    }
    Ok(out)
}
