//! Learner roster and the shared minibatch training loop.
//!
//! Training minimizes categorical cross-entropy with Adam, holds out the tail
//! of a seeded shuffle as a validation split, and stops once validation loss
//! has not improved for `early_stop_patience` epochs. Parameters are restored
//! to the best validation epoch; the starting point counts as epoch 0, so
//! fine-tuning never returns a model with worse validation loss than it got.

pub mod net;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use net::Activation;

use crate::data::LabeledDataset;
use crate::error::{EflError, Result};
use crate::model::{ModelId, ModelTree, ParamVector};
use crate::seed::{hash_str, hash_words};

/// Learning rate of the "paper-finetune" preset.
pub const PAPER_FINETUNE_LR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerConfig {
    /// Hidden widths; empty means multinomial logistic regression.
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub early_stop_patience: u32,
    pub validation_fraction: f64,
    pub l2_penalty: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden_layers: Vec::new(),
            activation: Activation::Relu,
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 20,
            early_stop_patience: 3,
            validation_fraction: 0.1,
            l2_penalty: 0.0,
        }
    }
}

impl LearnerConfig {
    pub fn with_hidden(hidden: &[usize], activation: Activation) -> Self {
        Self { hidden_layers: hidden.to_vec(), activation, ..Self::default() }
    }

    /// Layer widths for `d` inputs and `c` labels.
    pub fn dims(&self, d: usize, c: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(d);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(c);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_allowing_zero_epochs()?;
        if self.max_epochs == 0 {
            return Err(EflError::InvalidConfig("max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn validate_allowing_zero_epochs(&self) -> Result<()> {
        let bad = |m: String| Err(EflError::InvalidConfig(m));
        if self.hidden_layers.contains(&0) {
            return bad(format!("hidden widths must be >= 1, got {:?}", self.hidden_layers));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        if !(self.l2_penalty.is_finite() && self.l2_penalty >= 0.0) {
            return bad(format!("l2_penalty must be finite and >= 0, got {}", self.l2_penalty));
        }
        Ok(())
    }

    /// Stable hash of every field.
    pub fn fingerprint(&self) -> u64 {
        let mut words: Vec<u64> = self.hidden_layers.iter().map(|&w| w as u64).collect();
        words.push(u64::MAX);
        words.extend([
            self.activation as u64,
            self.learning_rate.to_bits(),
            self.batch_size as u64,
            u64::from(self.max_epochs),
            u64::from(self.early_stop_patience),
            self.validation_fraction.to_bits(),
            self.l2_penalty.to_bits(),
        ]);
        hash_words(&words)
    }
}

/// A named roster slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub label: String,
    pub config: LearnerConfig,
}

/// The eight desk-scale learners every node trains in round one.
pub fn default_roster() -> Vec<RosterEntry> {
    use Activation::{Relu, Tanh};
    let shapes: [(&[usize], Activation); 8] = [
        (&[], Relu),
        (&[8], Relu),
        (&[16], Relu),
        (&[32], Relu),
        (&[16, 16], Relu),
        (&[32, 16], Relu),
        (&[8], Tanh),
        (&[64], Relu),
    ];
    shapes
        .iter()
        .enumerate()
        .map(|(i, (h, a))| RosterEntry { label: format!("mlp-{}", i + 1), config: LearnerConfig::with_hidden(h, *a) })
        .collect()
}

/// Per-run changes applied to every leaf's own config when fine-tuning.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneOverrides {
    pub max_epochs: Option<u32>,
    pub learning_rate: Option<f64>,
}

impl FineTuneOverrides {
    /// The small fine-tuning rate used on pretrained networks.
    pub fn paper_finetune() -> Self {
        Self { max_epochs: None, learning_rate: Some(PAPER_FINETUNE_LR) }
    }

    fn apply(&self, cfg: &LearnerConfig) -> LearnerConfig {
        let mut out = cfg.clone();
        if let Some(e) = self.max_epochs {
            out.max_epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            out.learning_rate = lr;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ModelTree,
    pub epochs_run: u32,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(self.t));
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }
}

/// Glorot-uniform weights, zero biases.
fn init_params(dims: &[usize], rng: &mut ChaCha8Rng) -> ParamVector {
    let mut values = Vec::with_capacity(ParamVector::expected_len(dims));
    for w in dims.windows(2) {
        let limit = libm::sqrt(6.0 / (w[0] + w[1]) as f64);
        for _ in 0..w[0] * w[1] {
            values.push(rng.random_range(-limit..=limit));
        }
        values.extend(core::iter::repeat_n(0.0, w[1]));
    }
    ParamVector::new(dims.to_vec(), values).expect("initializer honors the shape manifest")
}

fn check_trainable(data: &LabeledDataset) -> Result<()> {
    if data.len() < 2 {
        return Err(EflError::DegenerateData(format!("{} training sample(s); need at least 2", data.len())));
    }
    let first = data.labels()[0];
    if data.labels().iter().all(|&l| l == first) {
        return Err(EflError::DegenerateData(format!("every training sample has label {first}")));
    }
    Ok(())
}

struct Fit {
    params: Vec<f64>,
    epochs_run: u32,
    best_validation_loss: f64,
    stopped_early: bool,
}

fn fit(start: &ParamVector, cfg: &LearnerConfig, data: &LabeledDataset, rng: &mut ChaCha8Rng) -> Result<Fit> {
    let layout = net::Layout::new(start.dims());
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = (libm::ceil(cfg.validation_fraction * n as f64) as usize).clamp(1, n - 1);
    let (train_idx, val_idx) = order.split_at(n - n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();
    let batch = cfg.batch_size.min(train_idx.len());

    let x = data.features();
    let y = data.labels();
    let mut ws = net::Workspace::default();
    let mut params = start.values().to_vec();
    let mut best_params = params.clone();
    let mut best = net::mean_loss(&layout, &params, cfg.activation, x, y, &val_idx, &mut ws);
    if !best.is_finite() {
        return Err(EflError::Divergence { epoch: 0 });
    }

    let mut grad = vec![0.0; params.len()];
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut stale = 0;
    let mut epochs_run = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(rng);
        for chunk in train_idx.chunks(batch) {
            let loss =
                net::loss_and_grad(&layout, &params, cfg.activation, cfg.l2_penalty, x, y, chunk, &mut ws, &mut grad);
            if !loss.is_finite() {
                return Err(EflError::Divergence { epoch });
            }
            adam.step(&mut params, &grad);
        }
        epochs_run = epoch;
        let val = net::mean_loss(&layout, &params, cfg.activation, x, y, &val_idx, &mut ws);
        if !val.is_finite() {
            return Err(EflError::Divergence { epoch });
        }
        if val < best {
            best = val;
            best_params.copy_from_slice(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(Fit { params: best_params, epochs_run, best_validation_loss: best, stopped_early })
}

/// Trains a fresh base model for `config` on `data`.
pub fn train(id: ModelId, config: &LearnerConfig, data: &LabeledDataset, seed: u64) -> Result<TrainOutcome> {
    config.validate()?;
    check_trainable(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = init_params(&config.dims(data.dim(), data.n_labels()), &mut rng);
    let fit = fit(&init, config, data, &mut rng)?;
    let params = init.with_values(fit.params);
    Ok(TrainOutcome {
        model: ModelTree::base(id, config.clone(), params),
        epochs_run: fit.epochs_run,
        best_validation_loss: fit.best_validation_loss,
        stopped_early: fit.stopped_early,
    })
}

/// Seed for one leaf inside a fine-tuning job.
fn leaf_seed(seed: u64, id: &ModelId) -> u64 {
    hash_words(&[seed, id.lineage, u64::from(id.version), hash_str(&id.label)])
}

/// Continues training every unique base leaf of `model` on `data`.
///
/// Returns a new tree with the same structure in which every node carries a
/// bumped version; the input tree is untouched. A leaf shared by several
/// branches is trained once.
pub fn fine_tune(
    model: &ModelTree,
    data: &LabeledDataset,
    overrides: &FineTuneOverrides,
    seed: u64,
) -> Result<ModelTree> {
    if model.input_dim() != data.dim() {
        return Err(EflError::DimensionMismatch { expected: model.input_dim(), actual: data.dim() });
    }
    check_trainable(data)?;
    let mut tuned: BTreeMap<(String, u32, u64), Arc<ModelTree>> = BTreeMap::new();
    for leaf in model.unique_base_leaves() {
        let cfg = overrides.apply(&leaf.config);
        cfg.validate_allowing_zero_epochs().map_err(|e| e.in_model(&leaf.id.label))?;
        let mut rng = ChaCha8Rng::seed_from_u64(leaf_seed(seed, &leaf.id));
        let fit = fit(&leaf.params, &cfg, data, &mut rng).map_err(|e| e.in_model(&leaf.id.label))?;
        let new = ModelTree::base(leaf.id.bumped(seed), leaf.config.clone(), leaf.params.with_values(fit.params));
        tuned.insert((leaf.id.label.clone(), leaf.id.version, leaf.id.lineage), Arc::new(new));
    }
    Ok(rebuild(model, &tuned, seed))
}

fn rebuild(tree: &ModelTree, tuned: &BTreeMap<(String, u32, u64), Arc<ModelTree>>, seed: u64) -> ModelTree {
    match tree {
        ModelTree::Base(b) => {
            let key = (b.id.label.clone(), b.id.version, b.id.lineage);
            (*tuned[&key]).clone()
        }
        ModelTree::Ensemble(e) => {
            let children = e.children.iter().map(|c| rebuild_arc(c, tuned, seed)).collect();
            ModelTree::Ensemble(crate::model::EnsembleModel { id: e.id.bumped(seed), children, fusion: e.fusion })
        }
    }
}

fn rebuild_arc(tree: &ModelTree, tuned: &BTreeMap<(String, u32, u64), Arc<ModelTree>>, seed: u64) -> Arc<ModelTree> {
    match tree {
        ModelTree::Base(b) => tuned[&(b.id.label.clone(), b.id.version, b.id.lineage)].clone(),
        ModelTree::Ensemble(_) => Arc::new(rebuild(tree, tuned, seed)),
    }
}
