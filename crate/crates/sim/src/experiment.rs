//! From a config to data, a federation run, and files on disk.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use eflsim_core::codec::serialize_model;
use eflsim_core::data::{
    generate_synthetic, paper_5node, partition, LabeledDataset, NodeData, Partition, PartitionSpec, PartitionStrategy,
    SyntheticSpec,
};
use eflsim_core::ensemble::evaluate;
use eflsim_core::metrics::ScoreReport;
use eflsim_core::model::Origin;
use eflsim_core::seed::{hash_str, hash_words};
use eflsim_core::server::{evaluate_global, run_federation, FederationOutcome};
use eflsim_core::ModelTree;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig, OutputConfig, PartitionConfig};
use crate::csvio::{load_csv, write_csv, write_file};
use crate::error::{Result, SimError};
use crate::network::ThreadedNetwork;
use crate::report;
use crate::trace::{provenance, ArtifactInfo, TraceDocument};

/// Seeds for data generation and partitioning, split off the master seed.
pub fn data_seed(master: u64) -> u64 {
    hash_words(&[master, hash_str("data")])
}

pub fn partition_seed(master: u64) -> u64 {
    hash_words(&[master, hash_str("partition")])
}

/// Source data and its split, ready to federate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub source_train: LabeledDataset,
    pub source_test: LabeledDataset,
    pub partition: Partition,
    /// Node data after any per-node feature shift.
    pub nodes: Vec<NodeData>,
    pub pooled_test: LabeledDataset,
    pub warnings: Vec<String>,
}

fn strategy(cfg: &ExperimentConfig, train: &LabeledDataset, test: &LabeledDataset) -> Result<PartitionStrategy> {
    Ok(match &cfg.partition {
        PartitionConfig::Uniform => PartitionStrategy::UniformIid,
        PartitionConfig::Dirichlet { alpha } => PartitionStrategy::DirichletSkew { alpha: *alpha },
        PartitionConfig::Table { train, test } => {
            PartitionStrategy::ProportionTable { train: train.clone(), test: test.clone() }
        }
        PartitionConfig::Paper5Node => paper_5node(&train.label_counts(), &test.label_counts())
            .map_err(|e| SimError::Config(format!("partition: {e}")))?,
    })
}

/// Loads or generates the source data and partitions it.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    let (train, test, shift) = match &cfg.data {
        DataConfig::Synthetic { train_per_label, test_per_label, dim, separation, node_shift } => {
            let seed = data_seed(cfg.seed);
            let spec = |n: &Vec<usize>| SyntheticSpec {
                n_per_label: n.clone(),
                dim: *dim,
                separation: *separation,
                shift: Vec::new(),
            };
            let train =
                generate_synthetic(&spec(train_per_label), seed).map_err(|e| SimError::Config(format!("data: {e}")))?;
            let test = generate_synthetic(&spec(test_per_label), hash_words(&[seed, 1]))
                .map_err(|e| SimError::Config(format!("data: {e}")))?;
            (train, test, *node_shift)
        }
        DataConfig::Csv { train, test, header } => {
            let a = load_csv(train, *header)?;
            let b = load_csv(test, *header)?;
            warnings.extend(a.warnings);
            warnings.extend(b.warnings);
            (a.dataset, b.dataset, 0.0)
        }
    };
    if train.dim() != test.dim() || train.n_labels() != test.n_labels() {
        return Err(SimError::Config(format!(
            "train has {} features and {} labels, test has {} and {}",
            train.dim(),
            train.n_labels(),
            test.dim(),
            test.n_labels()
        )));
    }
    if cfg.positive_label >= train.n_labels() {
        return Err(SimError::Config(format!(
            "positive_label {} out of range for {} labels",
            cfg.positive_label,
            train.n_labels()
        )));
    }
    let spec =
        PartitionSpec { strategy: strategy(cfg, &train, &test)?, n_nodes: cfg.nodes, seed: partition_seed(cfg.seed) };
    let part = partition(&train, &test, &spec)?;
    let nodes = shift_nodes(&part.nodes, shift)?;
    let pooled_test = LabeledDataset::concat(nodes.iter().map(|n| &n.test))?;
    Ok(Prepared { source_train: train, source_test: test, partition: part, nodes, pooled_test, warnings })
}

fn shift_nodes(nodes: &[NodeData], shift: f64) -> Result<Vec<NodeData>> {
    if shift == 0.0 {
        return Ok(nodes.to_vec());
    }
    let n = nodes.len() as f64;
    nodes
        .iter()
        .map(|nd| {
            let dim = nd.train.dim();
            let mut offset = vec![0.0; dim];
            offset[dim - 1] = shift * (nd.node_id as f64 - (n + 1.0) / 2.0);
            Ok(NodeData::new(nd.node_id, nd.train.translated(&offset)?, nd.test.translated(&offset)?)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleModelScore {
    pub node_id: u32,
    pub label: String,
    pub pooled_accuracy: f64,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub artifact: ArtifactInfo,
    pub rounds: u32,
    pub termination: eflsim_core::server::TerminationReason,
    pub final_gel: String,
    pub final_gel_pooled: ScoreReport,
    /// Every roster model trained in round one, scored on the pooled test set.
    pub round1_single_models: Vec<SingleModelScore>,
    pub best_round1_single: SingleModelScore,
    pub bytes_total: u64,
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub prepared: Prepared,
    pub outcome: FederationOutcome,
    pub gel_pooled: ScoreReport,
}

/// Runs a prepared experiment on `threads` workers.
pub fn run_prepared(cfg: &ExperimentConfig, prepared: Prepared, threads: usize) -> Result<Experiment> {
    let fed = cfg.federation();
    let mut net = ThreadedNetwork::new(prepared.nodes.iter().map(|n| n.node_id), threads)?;
    let outcome = run_federation(&fed, prepared.nodes.clone(), &mut net)?;
    let gel_pooled = evaluate_global(&outcome.trace.final_gel, &prepared.pooled_test, cfg.positive_label)?;
    Ok(Experiment { config: cfg.clone(), prepared, outcome, gel_pooled })
}

pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<Experiment> {
    let prepared = prepare(cfg)?;
    run_prepared(cfg, prepared, threads)
}

impl Experiment {
    pub fn trace_document(&self) -> TraceDocument {
        let trace = &self.outcome.trace;
        let mut echo = self.config.clone();
        echo.output = OutputConfig::default();
        TraceDocument {
            artifact: ArtifactInfo::current(self.config.seed),
            experiment: echo,
            federation: trace.config.clone(),
            rounds: trace.rounds.clone(),
            termination: trace.termination,
            final_gel: TraceDocument::final_gel_info(&trace.final_gel, self.gel_pooled),
        }
    }

    /// Round-one roster models of every node, scored on the pooled test set,
    /// in node then roster order.
    pub fn round1_single_models(&self) -> Result<Vec<SingleModelScore>> {
        let mut out = Vec::new();
        for node in &self.outcome.nodes {
            let mut roster: Vec<&Arc<ModelTree>> =
                node.models().filter(|m| matches!(m.id().origin, Origin::Roster(_))).collect();
            roster.sort_by_key(|m| match m.id().origin {
                Origin::Roster(i) => i,
                _ => u32::MAX,
            });
            for m in roster {
                let e = evaluate(Arc::clone(m), &self.prepared.pooled_test, self.config.positive_label)?;
                out.push(SingleModelScore {
                    node_id: node.node_id(),
                    label: m.label().into(),
                    pooled_accuracy: e.accuracy,
                });
            }
        }
        Ok(out)
    }

    pub fn summary(&self) -> Result<Summary> {
        let singles = self.round1_single_models()?;
        let best = singles
            .iter()
            .fold(None::<&SingleModelScore>, |b, s| match b {
                Some(b) if b.pooled_accuracy >= s.pooled_accuracy => Some(b),
                _ => Some(s),
            })
            .cloned()
            .ok_or_else(|| SimError::Trace("no round-one models".into()))?;
        let trace = &self.outcome.trace;
        Ok(Summary {
            artifact: ArtifactInfo::current(self.config.seed),
            rounds: trace.rounds.len() as u32,
            termination: trace.termination,
            final_gel: trace.final_gel.label().into(),
            final_gel_pooled: self.gel_pooled,
            round1_single_models: singles,
            best_round1_single: best,
            bytes_total: trace.rounds.iter().map(|r| r.bytes).sum(),
        })
    }

    /// `round,node,model,version,accuracy,in_b2m` for every candidate model.
    pub fn rounds_csv(&self) -> String {
        let mut s = format!("# {}\n", provenance(self.config.seed));
        s.push_str("round,node,model,version,accuracy,in_b2m\n");
        for r in &self.outcome.trace.rounds {
            for n in &r.nodes {
                for m in &n.accuracies {
                    let in_b2m = n.b2m.contains(&m.label);
                    s.push_str(&format!(
                        "{},{},{},{},{},{}\n",
                        r.round, n.node_id, m.label, m.version, m.accuracy, in_b2m as u8
                    ));
                }
            }
        }
        s
    }

    /// Writes the trace, tables, checkpoints, node data and report files.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |rel: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(rel);
            write_file(&p, bytes)?;
            written.push(p);
            Ok(())
        };
        let doc = self.trace_document();
        put("trace.json", doc.to_json().as_bytes())?;
        put("rounds.csv", self.rounds_csv().as_bytes())?;
        let mut summary = serde_json::to_string_pretty(&self.summary()?).expect("summary serializes");
        summary.push('\n');
        put("summary.json", summary.as_bytes())?;
        put("config.toml", format!("# {}\n{}", provenance(self.config.seed), self.config.to_toml()).as_bytes())?;
        if self.config.output.checkpoints {
            put("models/final_gel.eflmodel", &serialize_model(&self.outcome.trace.final_gel))?;
            for node in &self.outcome.nodes {
                for m in node.models() {
                    let rel = format!("models/node{}/{}.v{}.eflmodel", node.node_id(), m.label(), m.id().version);
                    put(&rel, &serialize_model(m))?;
                }
            }
        }
        written.extend(write_node_data(dir, &self.prepared, self.config.seed)?);
        written.extend(report::write_reports(&doc, dir, self.config.output.svg)?);
        Ok(written)
    }
}

/// `data/node{k}_{train,test}.csv` plus `data/partition.csv`, the per-node
/// label counts.
pub fn write_node_data(dir: &Path, prepared: &Prepared, seed: u64) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for nd in &prepared.nodes {
        for (which, ds) in [("train", &nd.train), ("test", &nd.test)] {
            let p = dir.join(format!("data/node{}_{which}.csv", nd.node_id));
            let comment = vec![provenance(seed), format!("node {} {which}", nd.node_id)];
            write_csv(&p, ds, &comment)?;
            written.push(p);
        }
    }
    let p = dir.join("data/partition.csv");
    write_file(&p, format!("# {}\n{}", provenance(seed), partition_table(prepared).to_csv()).as_bytes())?;
    written.push(p);
    Ok(written)
}

/// Per-node label counts laid out with one row per (split, label) and one
/// column per node, plus the source total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionTable {
    pub node_ids: Vec<u32>,
    /// `(split, label, per-node counts, source total)`.
    pub rows: Vec<(&'static str, usize, Vec<usize>, usize)>,
}

pub fn partition_table(p: &Prepared) -> PartitionTable {
    let node_ids = p.nodes.iter().map(|n| n.node_id).collect();
    let mut rows = Vec::new();
    for (split, source, pick) in [
        ("train", &p.source_train, (|n: &NodeData| &n.train) as fn(&NodeData) -> &LabeledDataset),
        ("test", &p.source_test, |n: &NodeData| &n.test),
    ] {
        let totals = source.label_counts();
        let per_node: Vec<Vec<usize>> = p.nodes.iter().map(|n| pick(n).label_counts()).collect();
        for (label, total) in totals.iter().enumerate() {
            rows.push((split, label, per_node.iter().map(|c| c[label]).collect(), *total));
        }
    }
    PartitionTable { node_ids, rows }
}

impl PartitionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,label");
        for id in &self.node_ids {
            s.push_str(&format!(",n{id}"));
        }
        s.push_str(",full\n");
        for (split, label, counts, total) in &self.rows {
            s.push_str(&format!("{split},{label}"));
            for c in counts {
                s.push_str(&format!(",{c}"));
            }
            s.push_str(&format!(",{total}\n"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14}", "");
        for id in &self.node_ids {
            s.push_str(&format!("{:>8}", format!("N{id}")));
        }
        s.push_str(&format!("{:>10}\n", "Full data"));
        for (split, label, counts, total) in &self.rows {
            s.push_str(&format!("{:<14}", format!("{split} label {label}")));
            for c in counts {
                s.push_str(&format!("{c:>8}"));
            }
            s.push_str(&format!("{total:>10}\n"));
        }
        s
    }
}
