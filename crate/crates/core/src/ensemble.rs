//! Best-two selection and local / global ensemble construction.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::data::LabeledDataset;
use crate::error::{EflError, Result};
use crate::metrics::{confusion, ScoreReport};
use crate::model::{FusionRule, ModelId, ModelTree, Origin};
use crate::seed::hash_words;

/// A model scored on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedModel {
    pub model: Arc<ModelTree>,
    pub accuracy: f64,
    pub scores: ScoreReport,
    /// [`LabeledDataset::fingerprint`] of the evaluation set.
    pub evaluated_on: u64,
}

impl EvaluatedModel {
    pub fn id(&self) -> &ModelId {
        self.model.id()
    }
}

/// Scores `model` on `data`.
pub fn evaluate(model: Arc<ModelTree>, data: &LabeledDataset, positive_label: usize) -> Result<EvaluatedModel> {
    let pred = model.predict(data.features())?;
    let cm = confusion(&pred, data.labels(), data.n_labels(), positive_label)?;
    let scores = ScoreReport::from_confusion(&cm);
    Ok(EvaluatedModel { model, accuracy: scores.accuracy(), scores, evaluated_on: data.fingerprint() })
}

/// Selection order: higher accuracy first, then the earlier origin round,
/// then the lexicographically smaller label.
pub fn selection_order(a: (&ModelId, f64), b: (&ModelId, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| a.0.origin.round().cmp(&b.0.origin.round()))
        .then_with(|| a.0.label.cmp(&b.0.label))
}

/// Indices of the two best candidates, best first.
pub fn best_two_indices(candidates: &[(&ModelId, f64)]) -> Result<(usize, usize)> {
    if candidates.len() < 2 {
        return Err(EflError::contract(format!("best-two selection over {} candidate(s)", candidates.len())));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| selection_order(candidates[i], candidates[j]).then(i.cmp(&j)));
    Ok((order[0], order[1]))
}

/// The two highest-accuracy candidates in descending order.
pub fn choose_best2(candidates: &[EvaluatedModel]) -> Result<[EvaluatedModel; 2]> {
    if let Some(first) = candidates.first() {
        if let Some(c) = candidates.iter().find(|c| c.evaluated_on != first.evaluated_on) {
            return Err(EflError::contract(format!(
                "{} and {} were evaluated on different datasets",
                first.id().label,
                c.id().label
            )));
        }
    }
    let keyed: Vec<(&ModelId, f64)> = candidates.iter().map(|c| (c.id(), c.accuracy)).collect();
    let (a, b) = best_two_indices(&keyed)?;
    Ok([candidates[a].clone(), candidates[b].clone()])
}

pub fn lel_label(node_id: u32, round: u32) -> alloc::string::String {
    format!("LEL@n{node_id}r{round}")
}

pub fn gel_label(round: u32) -> alloc::string::String {
    format!("GEL@r{round}")
}

/// Local ensemble over a node's best pair, children in rank order.
pub fn make_lel(pair: [Arc<ModelTree>; 2], fusion: FusionRule, round: u32, node_id: u32) -> ModelTree {
    let lineage = hash_words(&[u64::from(node_id), u64::from(round), pair[0].id().lineage, pair[1].id().lineage]);
    let id = ModelId::new(lel_label(node_id, round), Origin::Local { node: node_id, round }, lineage);
    ModelTree::ensemble(id, pair.into(), fusion).expect("pair members come from the same node data")
}

/// Global ensemble over the nodes' local ensembles, in the given order
/// (ascending node id).
pub fn make_gel(lels: Vec<Arc<ModelTree>>, fusion: FusionRule, round: u32) -> Result<ModelTree> {
    if lels.is_empty() {
        return Err(EflError::contract("global ensemble over zero local ensembles"));
    }
    let mut words: Vec<u64> = lels.iter().map(|m| m.id().lineage).collect();
    words.push(u64::from(round));
    let id = ModelId::new(gel_label(round), Origin::GlobalRound(round), hash_words(&words));
    ModelTree::ensemble(id, lels, fusion)
}
