//! Labeled datasets, the synthetic generator, and the node partitioner.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EflError, Result};
use crate::linalg::Matrix;
use crate::seed::{hash_words, mix64};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    n_labels: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_labels: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(EflError::contract("dataset has no samples"));
        }
        if features.rows() != labels.len() {
            return Err(EflError::contract(format!("{} feature rows but {} labels", features.rows(), labels.len())));
        }
        if let Some(i) = labels.iter().position(|&l| l >= n_labels) {
            return Err(EflError::contract(format!("sample {i} has label {} >= {n_labels}", labels[i])));
        }
        if let Some(i) = features.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(EflError::contract(format!("feature value {i} is not finite")));
        }
        Ok(Self { features, labels, n_labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_labels];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Samples at `idx`, in that order. `idx` must be non-empty.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.features.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect(), self.n_labels)
    }

    /// Concatenation of several datasets sharing dimension and label count.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a LabeledDataset>) -> Result<Self> {
        let mut it = parts.into_iter();
        let first = it.next().ok_or_else(|| EflError::contract("concat of no datasets"))?;
        let mut features = first.features.clone();
        let mut labels = first.labels.clone();
        for p in it {
            if p.n_labels != first.n_labels {
                return Err(EflError::contract("concat of datasets with different label counts"));
            }
            features = features.vstack(&p.features)?;
            labels.extend_from_slice(&p.labels);
        }
        Self::new(features, labels, first.n_labels)
    }

    /// Copy with `offset` added to every feature row.
    pub fn translated(&self, offset: &[f64]) -> Result<Self> {
        if offset.len() != self.dim() {
            return Err(EflError::DimensionMismatch { expected: self.dim(), actual: offset.len() });
        }
        let mut f = self.features.clone();
        for i in 0..f.rows() {
            for (v, o) in f.row_mut(i).iter_mut().zip(offset) {
                *v += o;
            }
        }
        Self::new(f, self.labels.clone(), self.n_labels)
    }

    /// Content hash over shape, feature bits and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut h = hash_words(&[self.len() as u64, self.dim() as u64, self.n_labels as u64]);
        for &v in self.features.as_slice() {
            h = mix64(h ^ v.to_bits());
        }
        for &l in &self.labels {
            h = mix64(h ^ l as u64);
        }
        h
    }
}

/// One node's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub node_id: u32,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl NodeData {
    pub fn new(node_id: u32, train: LabeledDataset, test: LabeledDataset) -> Result<Self> {
        if train.dim() != test.dim() {
            return Err(EflError::DimensionMismatch { expected: train.dim(), actual: test.dim() });
        }
        if train.n_labels() != test.n_labels() {
            return Err(EflError::contract(format!(
                "node {node_id}: train has {} labels, test has {}",
                train.n_labels(),
                test.n_labels()
            )));
        }
        Ok(Self { node_id, train, test })
    }
}

/// Gaussian blobs, one per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Sample count for each label; its length is the label count.
    pub n_per_label: Vec<usize>,
    pub dim: usize,
    /// Distance between consecutive label means along the first axis.
    pub separation: f64,
    /// Offset added to every mean; empty for none.
    #[serde(default)]
    pub shift: Vec<f64>,
}

/// Unit-variance Gaussian blobs, label-major order. Label `k`'s mean sits at
/// `(k - (C - 1) / 2) * separation` on the first axis, plus `shift`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<LabeledDataset> {
    let c = spec.n_per_label.len();
    if c < 2 {
        return Err(EflError::contract("synthetic data needs at least two labels"));
    }
    if spec.n_per_label.iter().any(|&n| n < 2) {
        return Err(EflError::contract(format!("every label needs >= 2 samples, got {:?}", spec.n_per_label)));
    }
    if spec.dim == 0 {
        return Err(EflError::contract("dimension must be >= 1"));
    }
    if !(spec.separation.is_finite() && spec.separation >= 0.0) {
        return Err(EflError::contract(format!("separation must be finite and >= 0, got {}", spec.separation)));
    }
    if !spec.shift.is_empty() && spec.shift.len() != spec.dim {
        return Err(EflError::DimensionMismatch { expected: spec.dim, actual: spec.shift.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = spec.n_per_label.iter().sum();
    let mut values = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let center = (c as f64 - 1.0) / 2.0;
    for (k, &count) in spec.n_per_label.iter().enumerate() {
        for _ in 0..count {
            for j in 0..spec.dim {
                let mut mean = if j == 0 { (k as f64 - center) * spec.separation } else { 0.0 };
                if let Some(s) = spec.shift.get(j) {
                    mean += s;
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                values.push(mean + z);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(Matrix::from_vec(n, spec.dim, values)?, labels, c)
}

/// How source samples are dealt to nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum PartitionStrategy {
    /// Shuffle each label, then deal round-robin across nodes.
    UniformIid,
    /// Exact per-node, per-label counts (`rows[node][label]`).
    ProportionTable { train: Vec<Vec<usize>>, test: Vec<Vec<usize>> },
    /// Per-label node shares drawn from a symmetric Dirichlet.
    DirichletSkew { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    #[serde(flatten)]
    pub strategy: PartitionStrategy,
    pub n_nodes: u32,
    pub seed: u64,
}

/// Node datasets plus the source indices behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub nodes: Vec<NodeData>,
    /// `train_assignment[k]` lists the source train rows given to node `k + 1`.
    pub train_assignment: Vec<Vec<usize>>,
    pub test_assignment: Vec<Vec<usize>>,
    /// Source rows no node received. Only a table that does not cover the
    /// source totals leaves anything here.
    pub unassigned_train: Vec<usize>,
    pub unassigned_test: Vec<usize>,
}

// Per-node label counts of the five-hospital chest X-ray split, columns
// ordered (normal, pneumonia), with the full-data totals they were cut from.
const PAPER_TRAIN: [[usize; 2]; 5] = [[288, 755], [269, 744], [260, 783], [265, 778], [259, 784]];
const PAPER_TEST: [[usize; 2]; 5] = [[50, 74], [48, 76], [53, 71], [36, 88], [46, 78]];
const PAPER_TRAIN_TOTALS: [usize; 2] = [1349, 3883];
const PAPER_TEST_TOTALS: [usize; 2] = [234, 390];

/// The "paper-5node" preset scaled to the given per-label totals.
///
/// Each cell is kept as its fraction of the original label total and
/// rounded half-up, so totals equal to the original reproduce the table
/// exactly. Label 0 plays "normal" and label 1 "pneumonia".
pub fn paper_5node(train_totals: &[usize], test_totals: &[usize]) -> Result<PartitionStrategy> {
    if train_totals.len() != 2 || test_totals.len() != 2 {
        return Err(EflError::contract("the paper-5node preset needs exactly two labels"));
    }
    Ok(PartitionStrategy::ProportionTable {
        train: scale_table(&PAPER_TRAIN, &PAPER_TRAIN_TOTALS, train_totals),
        test: scale_table(&PAPER_TEST, &PAPER_TEST_TOTALS, test_totals),
    })
}

fn scale_table(table: &[[usize; 2]; 5], full: &[usize; 2], actual: &[usize]) -> Vec<Vec<usize>> {
    let mut rows: Vec<Vec<usize>> =
        table.iter().map(|r| (0..2).map(|l| (2 * r[l] * actual[l] + full[l]) / (2 * full[l])).collect()).collect();
    for l in 0..2 {
        while rows.iter().map(|r| r[l]).sum::<usize>() > actual[l] {
            let k = (0..rows.len()).max_by_key(|&k| (rows[k][l], core::cmp::Reverse(k))).expect("five rows");
            rows[k][l] -= 1;
        }
    }
    rows
}

fn shuffled_by_label(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_label = vec![Vec::new(); ds.n_labels()];
    for (i, &l) in ds.labels().iter().enumerate() {
        by_label[l].push(i);
    }
    for v in &mut by_label {
        v.shuffle(rng);
    }
    by_label
}

/// Largest-remainder apportionment of `total` by `shares`; ties go to the
/// lower index.
fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| libm::floor(*q) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - libm::floor(quotas[a]);
        let rb = quotas[b] - libm::floor(quotas[b]);
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Deals `by_label` to nodes according to `counts[node][label]`.
fn assign_counts(by_label: &[Vec<usize>], counts: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut nodes = vec![Vec::new(); counts.len()];
    let mut rest = Vec::new();
    for (l, idx) in by_label.iter().enumerate() {
        let mut pos = 0;
        for (k, row) in counts.iter().enumerate() {
            nodes[k].extend_from_slice(&idx[pos..pos + row[l]]);
            pos += row[l];
        }
        rest.extend_from_slice(&idx[pos..]);
    }
    for v in &mut nodes {
        v.sort_unstable();
    }
    rest.sort_unstable();
    (nodes, rest)
}

fn deal_round_robin(by_label: &[Vec<usize>], n_nodes: usize) -> Vec<Vec<usize>> {
    let mut nodes = vec![Vec::new(); n_nodes];
    let mut k = 0;
    for idx in by_label {
        for &i in idx {
            nodes[k % n_nodes].push(i);
            k += 1;
        }
    }
    for v in &mut nodes {
        v.sort_unstable();
    }
    nodes
}

fn check_table(table: &[Vec<usize>], totals: &[usize], n_nodes: usize, set: &str) -> Result<()> {
    if table.len() != n_nodes {
        return Err(EflError::contract(format!("{set} table has {} rows for {n_nodes} nodes", table.len())));
    }
    for (k, row) in table.iter().enumerate() {
        if row.len() != totals.len() {
            return Err(EflError::contract(format!(
                "{set} table row {} has {} columns for {} labels",
                k + 1,
                row.len(),
                totals.len()
            )));
        }
    }
    for (l, &avail) in totals.iter().enumerate() {
        let want: usize = table.iter().map(|r| r[l]).sum();
        if want > avail {
            return Err(EflError::InfeasiblePartition {
                label: l,
                reason: format!("{set} table asks for {want} samples but the source has {avail}"),
            });
        }
    }
    Ok(())
}

/// Splits a source train/test pair across `spec.n_nodes` nodes.
pub fn partition(train: &LabeledDataset, test: &LabeledDataset, spec: &PartitionSpec) -> Result<Partition> {
    let n_nodes = spec.n_nodes as usize;
    if n_nodes < 2 {
        return Err(EflError::InvalidConfig(format!("partition needs >= 2 nodes, got {n_nodes}")));
    }
    if train.n_labels() != test.n_labels() || train.dim() != test.dim() {
        return Err(EflError::contract("train and test sources disagree on dimension or label count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train_by_label = shuffled_by_label(train, &mut rng);
    let test_by_label = shuffled_by_label(test, &mut rng);
    let train_totals = train.label_counts();
    let test_totals = test.label_counts();

    let (train_assignment, test_assignment, unassigned_train, unassigned_test) = match &spec.strategy {
        PartitionStrategy::UniformIid => (
            deal_round_robin(&train_by_label, n_nodes),
            deal_round_robin(&test_by_label, n_nodes),
            Vec::new(),
            Vec::new(),
        ),
        PartitionStrategy::ProportionTable { train: tt, test: ts } => {
            check_table(tt, &train_totals, n_nodes, "train")?;
            check_table(ts, &test_totals, n_nodes, "test")?;
            let (a, ra) = assign_counts(&train_by_label, tt);
            let (b, rb) = assign_counts(&test_by_label, ts);
            (a, b, ra, rb)
        }
        PartitionStrategy::DirichletSkew { alpha } => {
            if !(alpha.is_finite() && *alpha > 0.0) {
                return Err(EflError::InvalidConfig(format!("dirichlet alpha must be > 0, got {alpha}")));
            }
            let gamma = Gamma::new(*alpha, 1.0)
                .map_err(|e| EflError::InvalidConfig(format!("dirichlet alpha {alpha}: {e}")))?;
            let mut tt = vec![vec![0; train.n_labels()]; n_nodes];
            let mut ts = vec![vec![0; train.n_labels()]; n_nodes];
            for l in 0..train.n_labels() {
                let mut shares: Vec<f64> = (0..n_nodes).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = shares.iter().sum();
                if total.is_nan() || total <= 0.0 {
                    // every draw underflowed; give the label to one node
                    let k = rng.random_range(0..n_nodes);
                    shares = (0..n_nodes).map(|i| if i == k { 1.0 } else { 0.0 }).collect();
                }
                for (k, c) in largest_remainder(&shares, train_totals[l]).into_iter().enumerate() {
                    tt[k][l] = c;
                }
                for (k, c) in largest_remainder(&shares, test_totals[l]).into_iter().enumerate() {
                    ts[k][l] = c;
                }
            }
            let (a, _) = assign_counts(&train_by_label, &tt);
            let (b, _) = assign_counts(&test_by_label, &ts);
            (a, b, Vec::new(), Vec::new())
        }
    };

    let mut nodes = Vec::with_capacity(n_nodes);
    for k in 0..n_nodes {
        let node_id = k as u32 + 1;
        if train_assignment[k].is_empty() {
            return Err(EflError::EmptyNode { node_id, which: "train" });
        }
        if test_assignment[k].is_empty() {
            return Err(EflError::EmptyNode { node_id, which: "test" });
        }
        nodes.push(NodeData::new(node_id, train.subset(&train_assignment[k])?, test.subset(&test_assignment[k])?)?);
    }
    Ok(Partition { nodes, train_assignment, test_assignment, unassigned_train, unassigned_test })
}
