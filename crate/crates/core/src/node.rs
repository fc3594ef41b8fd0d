//! Node side of the round protocol.
//!
//! Round one trains the whole roster, keeps the best two and ships their
//! local ensemble. Every later round fine-tunes the global ensemble it was
//! sent, lets it compete against the two incumbents, and ships the local
//! ensemble of whichever two win. Incumbents are never retrained; their
//! accuracies are reused as cached.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::data::NodeData;
use crate::ensemble::{choose_best2, evaluate, make_lel, EvaluatedModel};
use crate::error::{EflError, Result};
use crate::learners::{fine_tune, train, FineTuneOverrides, RosterEntry};
use crate::model::{FusionRule, ModelId, ModelTree, Origin};
use crate::seed::roster_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyEntry {
    pub id: ModelId,
    pub accuracy: f64,
}

/// What a node sends to the server after each round.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReport {
    pub node_id: u32,
    pub round: u32,
    pub lel: Arc<ModelTree>,
    pub lel_accuracy: f64,
    pub b2m: [AccuracyEntry; 2],
    /// Every model that competed this round, in evaluation order.
    pub accuracies: Vec<AccuracyEntry>,
    /// The best-two label set differs from the previous round's.
    pub changed: bool,
}

impl NodeReport {
    pub fn accuracy_map(&self) -> BTreeMap<String, f64> {
        self.accuracies.iter().map(|e| (e.id.label.clone(), e.accuracy)).collect()
    }

    pub fn b2m_labels(&self) -> [&str; 2] {
        [&self.b2m[0].id.label, &self.b2m[1].id.label]
    }
}

type StoreKey = (String, u32, u64);

fn store_key(id: &ModelId) -> StoreKey {
    (id.label.clone(), id.version, id.lineage)
}

/// Unordered equality of two label pairs.
pub fn same_label_set(a: [&str; 2], b: [&str; 2]) -> bool {
    (a[0] == b[0] && a[1] == b[1]) || (a[0] == b[1] && a[1] == b[0])
}

#[derive(Debug, Clone)]
pub struct NodeState {
    node_id: u32,
    data: NodeData,
    positive_label: usize,
    b2m: Option<[EvaluatedModel; 2]>,
    round: u32,
    store: BTreeMap<StoreKey, Arc<ModelTree>>,
}

impl NodeState {
    pub fn new(data: NodeData, positive_label: usize) -> Self {
        Self { node_id: data.node_id, data, positive_label, b2m: None, round: 0, store: BTreeMap::new() }
    }

    pub fn node_id(&self) -> u32 {
        self.node_id
    }

    pub fn data(&self) -> &NodeData {
        &self.data
    }

    /// Rounds completed so far.
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn b2m(&self) -> Option<&[EvaluatedModel; 2]> {
        self.b2m.as_ref()
    }

    /// Every model this node has trained or evaluated, keyed by identity.
    pub fn models(&self) -> impl Iterator<Item = &Arc<ModelTree>> {
        self.store.values()
    }

    pub fn model(&self, id: &ModelId) -> Option<&Arc<ModelTree>> {
        self.store.get(&store_key(id))
    }

    fn remember(&mut self, m: &Arc<ModelTree>) {
        self.store.insert(store_key(m.id()), m.clone());
    }

    fn report(&self, lel: ModelTree, accuracies: Vec<AccuracyEntry>, changed: bool) -> Result<NodeReport> {
        let lel = Arc::new(lel);
        let lel_eval = evaluate(lel.clone(), &self.data.test, self.positive_label)?;
        let b2m = self.b2m.as_ref().expect("set before reporting");
        let entry = |e: &EvaluatedModel| AccuracyEntry { id: e.id().clone(), accuracy: e.accuracy };
        Ok(NodeReport {
            node_id: self.node_id,
            round: self.round,
            lel,
            lel_accuracy: lel_eval.accuracy,
            b2m: [entry(&b2m[0]), entry(&b2m[1])],
            accuracies,
            changed,
        })
    }

    /// Trains and evaluates the whole roster, then reports round one.
    pub fn first_round(&mut self, roster: &[RosterEntry], fusion: FusionRule, seed: u64) -> Result<NodeReport> {
        self.first_round_inner(roster, fusion, seed).map_err(|e| e.in_node(self.node_id, 1))
    }

    fn first_round_inner(&mut self, roster: &[RosterEntry], fusion: FusionRule, seed: u64) -> Result<NodeReport> {
        if self.round != 0 {
            return Err(EflError::contract(format!("first round requested after round {}", self.round)));
        }
        if roster.len() < 3 {
            return Err(EflError::InvalidConfig(format!("roster needs more than 2 models, got {}", roster.len())));
        }
        let mut evaluated = Vec::with_capacity(roster.len());
        for (i, entry) in roster.iter().enumerate() {
            let s = roster_seed(seed, self.node_id, &entry.label);
            let id = ModelId::new(entry.label.clone(), Origin::Roster(i as u32 + 1), s);
            let out = train(id, &entry.config, &self.data.train, s).map_err(|e| e.in_model(&entry.label))?;
            let model = Arc::new(out.model);
            self.remember(&model);
            evaluated.push(evaluate(model, &self.data.test, self.positive_label)?);
        }
        let accuracies = evaluated.iter().map(|e| AccuracyEntry { id: e.id().clone(), accuracy: e.accuracy }).collect();
        let best = choose_best2(&evaluated)?;
        self.round = 1;
        let lel = make_lel([best[0].model.clone(), best[1].model.clone()], fusion, 1, self.node_id);
        self.b2m = Some(best);
        self.report(lel, accuracies, true)
    }

    /// Fine-tunes the previous global ensemble and re-selects the best two.
    pub fn next_round(
        &mut self,
        gel_prev: &ModelTree,
        fusion: FusionRule,
        overrides: &FineTuneOverrides,
        seed: u64,
    ) -> Result<NodeReport> {
        let round = self.round + 1;
        self.next_round_inner(gel_prev, fusion, overrides, seed).map_err(|e| e.in_node(self.node_id, round))
    }

    fn next_round_inner(
        &mut self,
        gel_prev: &ModelTree,
        fusion: FusionRule,
        overrides: &FineTuneOverrides,
        seed: u64,
    ) -> Result<NodeReport> {
        let incumbents = match &self.b2m {
            Some(b) if self.round >= 1 => b.clone(),
            _ => return Err(EflError::contract("next round requested before the first round")),
        };
        if gel_prev.input_dim() != self.data.train.dim() {
            return Err(EflError::DimensionMismatch { expected: self.data.train.dim(), actual: gel_prev.input_dim() });
        }
        let tuned = Arc::new(fine_tune(gel_prev, &self.data.train, overrides, seed)?);
        self.remember(&tuned);
        let challenger = evaluate(tuned, &self.data.test, self.positive_label)?;

        let candidates = [incumbents[0].clone(), incumbents[1].clone(), challenger];
        let accuracies =
            candidates.iter().map(|e| AccuracyEntry { id: e.id().clone(), accuracy: e.accuracy }).collect();
        let best = choose_best2(&candidates)?;
        let changed = !same_label_set(
            [&best[0].id().label, &best[1].id().label],
            [&incumbents[0].id().label, &incumbents[1].id().label],
        );
        self.round += 1;
        let lel = make_lel([best[0].model.clone(), best[1].model.clone()], fusion, self.round, self.node_id);
        self.b2m = Some(best);
        self.report(lel, accuracies, changed)
    }
}
