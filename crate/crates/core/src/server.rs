//! Server side of the round protocol and the federation driver.
//!
//! Round one runs the roster on every node. Each later round sends the
//! previous global ensemble out, collects one report per node, and stops as
//! soon as no node's best-two label set changed. Otherwise the local
//! ensembles are fused into the next global ensemble and broadcast.
//!
//! Message delivery is abstracted behind [`Network`], so the same driver runs
//! sequentially in-process ([`LocalNetwork`]) or over threaded channels.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::codec::{decode_broadcast, decode_report, encode_broadcast, encode_report, GlobalBroadcast};
use crate::data::{LabeledDataset, NodeData};
use crate::ensemble::{gel_label, make_gel};
use crate::error::{EflError, Result};
use crate::learners::{default_roster, FineTuneOverrides, RosterEntry};
use crate::metrics::{confusion, ScoreReport};
use crate::model::{FusionRule, ModelId, ModelTree, Origin};
use crate::node::{same_label_set, NodeReport, NodeState};
use crate::seed::round_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub n_nodes: u32,
    pub roster: Vec<RosterEntry>,
    pub fusion: FusionRule,
    /// Safety cap on the number of rounds.
    pub max_rounds: u32,
    pub master_seed: u64,
    pub finetune: FineTuneOverrides,
    /// Label whose one-vs-rest scores are reported as the positive class.
    pub positive_label: usize,
    /// Build each global ensemble over the unique base leaves instead of
    /// over the local ensembles. Debug option.
    pub flatten_gel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_nodes: 5,
            roster: default_roster(),
            fusion: FusionRule::MaxProb,
            max_rounds: 50,
            master_seed: 0,
            finetune: FineTuneOverrides::default(),
            positive_label: 1,
            flatten_gel: false,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EflError::InvalidConfig(m));
        if self.n_nodes < 2 {
            return bad(format!("n_nodes must be at least 2, got {}", self.n_nodes));
        }
        if self.roster.len() < 3 {
            return bad(format!("roster needs more than 2 models, got {}", self.roster.len()));
        }
        if self.max_rounds < 1 {
            return bad("max_rounds must be at least 1".into());
        }
        let mut labels: Vec<&str> = self.roster.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        if labels.iter().any(|l| l.is_empty()) {
            return bad("roster labels must be non-empty".into());
        }
        if let Some(w) = labels.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate roster label {:?}", w[0]));
        }
        for e in &self.roster {
            e.config.validate().map_err(|err| EflError::InvalidConfig(format!("roster {}: {err}", e.label)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAccuracy {
    pub label: String,
    pub version: u32,
    pub accuracy: f64,
}

/// One node's line in a round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRoundEntry {
    pub node_id: u32,
    /// Every model that competed on the node this round.
    pub accuracies: Vec<ModelAccuracy>,
    pub b2m: [String; 2],
    pub b2m_accuracies: [f64; 2],
    pub lel: String,
    pub lel_accuracy: f64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub nodes: Vec<NodeRoundEntry>,
    /// Global ensemble built at the end of this round, if any.
    pub gel: Option<String>,
    /// Serialized message bytes exchanged during this round.
    pub bytes: u64,
}

impl RoundRecord {
    fn from_reports(round: u32, reports: &[NodeReport]) -> Self {
        let nodes = reports
            .iter()
            .map(|r| NodeRoundEntry {
                node_id: r.node_id,
                accuracies: r
                    .accuracies
                    .iter()
                    .map(|e| ModelAccuracy { label: e.id.label.clone(), version: e.id.version, accuracy: e.accuracy })
                    .collect(),
                b2m: [r.b2m[0].id.label.clone(), r.b2m[1].id.label.clone()],
                b2m_accuracies: [r.b2m[0].accuracy, r.b2m[1].accuracy],
                lel: r.lel.label().into(),
                lel_accuracy: r.lel_accuracy,
                changed: r.changed,
            })
            .collect();
        Self { round, nodes, gel: None, bytes: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    B2MStable,
    MaxRoundsReached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationTrace {
    pub config: FederationConfig,
    pub rounds: Vec<RoundRecord>,
    pub termination: TerminationReason,
    /// The last global ensemble built.
    pub final_gel: Arc<ModelTree>,
}

/// A finished federation: the trace plus every node's final state.
#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub trace: FederationTrace,
    pub nodes: Vec<NodeState>,
}

/// The work each node performs in one round.
#[derive(Debug, Clone, Copy)]
pub enum StepKind<'a> {
    First { roster: &'a [RosterEntry] },
    Next { overrides: &'a FineTuneOverrides },
}

#[derive(Debug, Clone, Copy)]
pub struct NodeStep<'a> {
    pub round: u32,
    pub fusion: FusionRule,
    pub master_seed: u64,
    pub kind: StepKind<'a>,
}

impl NodeStep<'_> {
    /// Runs this step on one node. `gel` is the broadcast the node received
    /// and is required for every round after the first.
    pub fn run(&self, node: &mut NodeState, gel: Option<&ModelTree>) -> Result<NodeReport> {
        let seed = round_seed(self.master_seed, self.round, node.node_id());
        match self.kind {
            StepKind::First { roster } => node.first_round(roster, self.fusion, seed),
            StepKind::Next { overrides } => {
                let gel = gel.ok_or_else(|| {
                    EflError::contract("no global ensemble delivered").in_node(node.node_id(), self.round)
                })?;
                node.next_round(gel, self.fusion, overrides, seed)
            }
        }
    }
}

/// Carries protocol messages between the server and the nodes.
pub trait Network {
    /// Runs `step` on every node and returns the reports as received by the
    /// server, in ascending node-id order.
    fn run_round(&mut self, nodes: &mut [NodeState], step: &NodeStep<'_>) -> Result<Vec<NodeReport>>;

    /// Delivers a global ensemble to every node.
    fn broadcast(&mut self, msg: &GlobalBroadcast) -> Result<()>;

    /// Serialized bytes moved during `round`.
    fn round_bytes(&self, round: u32) -> u64;
}

/// Sequential in-process network with FIFO inboxes and a byte ledger.
#[derive(Debug, Default)]
pub struct LocalNetwork {
    inboxes: BTreeMap<u32, VecDeque<Vec<u8>>>,
    ledger: BTreeMap<u32, u64>,
}

impl LocalNetwork {
    pub fn new(node_ids: impl IntoIterator<Item = u32>) -> Self {
        Self { inboxes: node_ids.into_iter().map(|id| (id, VecDeque::new())).collect(), ledger: BTreeMap::new() }
    }
}

impl Network for LocalNetwork {
    fn run_round(&mut self, nodes: &mut [NodeState], step: &NodeStep<'_>) -> Result<Vec<NodeReport>> {
        let mut out = Vec::with_capacity(nodes.len());
        for node in nodes.iter_mut() {
            let inbox = self
                .inboxes
                .get_mut(&node.node_id())
                .ok_or_else(|| EflError::contract(format!("node {} is not registered", node.node_id())))?;
            let gel = match step.kind {
                StepKind::First { .. } => None,
                StepKind::Next { .. } => Some(decode_broadcast(&inbox.pop_front().ok_or(EflError::Shutdown)?)?.gel),
            };
            let report = step.run(node, gel.as_deref())?;
            let bytes = encode_report(&report);
            *self.ledger.entry(step.round).or_default() += bytes.len() as u64;
            out.push(decode_report(&bytes)?);
        }
        Ok(out)
    }

    fn broadcast(&mut self, msg: &GlobalBroadcast) -> Result<()> {
        let bytes = encode_broadcast(msg);
        for inbox in self.inboxes.values_mut() {
            *self.ledger.entry(msg.round).or_default() += bytes.len() as u64;
            inbox.push_back(bytes.clone());
        }
        Ok(())
    }

    fn round_bytes(&self, round: u32) -> u64 {
        self.ledger.get(&round).copied().unwrap_or(0)
    }
}

/// True iff every node kept the same best-two label set.
pub fn should_stop(reports: &[NodeReport], previous: &[NodeReport]) -> Result<bool> {
    let ids = |rs: &[NodeReport]| {
        let mut v: Vec<u32> = rs.iter().map(|r| r.node_id).collect();
        v.sort_unstable();
        v
    };
    if ids(reports) != ids(previous) {
        return Err(EflError::contract("stopping check over different node sets"));
    }
    Ok(reports.iter().all(|r| {
        let prev = previous.iter().find(|p| p.node_id == r.node_id).expect("same id set");
        same_label_set(r.b2m_labels(), prev.b2m_labels())
    }))
}

/// Scores a global ensemble on pooled test data.
pub fn evaluate_global(gel: &ModelTree, pooled_test: &LabeledDataset, positive_label: usize) -> Result<ScoreReport> {
    let pred = gel.predict(pooled_test.features())?;
    let cm = confusion(&pred, pooled_test.labels(), pooled_test.n_labels(), positive_label)?;
    Ok(ScoreReport::from_confusion(&cm))
}

/// Runs rounds until the best-two sets settle or the cap is reached.
pub fn run_federation(
    config: &FederationConfig,
    data: Vec<NodeData>,
    network: &mut dyn Network,
) -> Result<FederationOutcome> {
    config.validate()?;
    if data.len() != config.n_nodes as usize {
        return Err(EflError::InvalidConfig(format!("{} node datasets for n_nodes = {}", data.len(), config.n_nodes)));
    }
    let mut data = data;
    data.sort_by_key(|d| d.node_id);
    if let Some(w) = data.windows(2).find(|w| w[0].node_id == w[1].node_id) {
        return Err(EflError::InvalidConfig(format!("duplicate node id {}", w[0].node_id)));
    }
    let mut nodes: Vec<NodeState> = data.into_iter().map(|d| NodeState::new(d, config.positive_label)).collect();

    let mut rounds = Vec::new();
    let mut previous: Option<Vec<NodeReport>> = None;
    let mut final_gel: Option<Arc<ModelTree>> = None;
    let mut termination = TerminationReason::MaxRoundsReached;
    for round in 1..=config.max_rounds {
        let kind = if round == 1 {
            StepKind::First { roster: &config.roster }
        } else {
            StepKind::Next { overrides: &config.finetune }
        };
        let step = NodeStep { round, fusion: config.fusion, master_seed: config.master_seed, kind };
        let reports = network.run_round(&mut nodes, &step)?;
        check_reports(&reports, &nodes, round)?;
        let mut record = RoundRecord::from_reports(round, &reports);

        if let Some(prev) = &previous {
            if should_stop(&reports, prev)? {
                record.bytes = network.round_bytes(round);
                rounds.push(record);
                termination = TerminationReason::B2MStable;
                break;
            }
        }

        let lels = reports.iter().map(|r| r.lel.clone()).collect();
        let mut gel = make_gel(lels, config.fusion, round)?;
        if config.flatten_gel {
            let id = ModelId { label: gel_label(round), origin: Origin::GlobalRound(round), ..gel.id().clone() };
            gel = gel.flattened(id, config.fusion)?;
        }
        let gel = Arc::new(gel);
        network.broadcast(&GlobalBroadcast { round, gel: gel.clone() })?;
        record.gel = Some(gel.label().into());
        record.bytes = network.round_bytes(round);
        rounds.push(record);
        final_gel = Some(gel);
        previous = Some(reports);
    }

    let final_gel = final_gel.expect("round one always builds a global ensemble");
    Ok(FederationOutcome { trace: FederationTrace { config: config.clone(), rounds, termination, final_gel }, nodes })
}

fn check_reports(reports: &[NodeReport], nodes: &[NodeState], round: u32) -> Result<()> {
    if reports.len() != nodes.len() {
        return Err(EflError::contract(format!("round {round}: {} reports for {} nodes", reports.len(), nodes.len())));
    }
    for (r, n) in reports.iter().zip(nodes) {
        if r.node_id != n.node_id() || r.round != round {
            return Err(EflError::contract(format!(
                "expected node {} round {round}, got node {} round {}",
                n.node_id(),
                r.node_id,
                r.round
            )));
        }
    }
    Ok(())
}
