//! Acceptance suite. Each test checks one criterion and prints a
//! `[PASS]`/`[FAIL]` line for it, whether or not output capture is on.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use eflsim::config::ExperimentConfig;
use eflsim::experiment::{self, Experiment};
use eflsim::network::thread_count;
use eflsim_core::codec::{deserialize_model, serialize_model};
use eflsim_core::data::{
    generate_synthetic, paper_5node, partition, NodeData, PartitionSpec, PartitionStrategy, SyntheticSpec,
};
use eflsim_core::learners::net::{cross_entropy, gradient, Activation};
use eflsim_core::learners::{default_roster, fine_tune, train, FineTuneOverrides, LearnerConfig, RosterEntry};
use eflsim_core::linalg::argmax;
use eflsim_core::metrics::{confusion, scores, Averaging};
use eflsim_core::model::fuse;
use eflsim_core::seed::{roster_seed, round_seed};
use eflsim_core::server::{run_federation, FederationConfig, LocalNetwork, TerminationReason};
use eflsim_core::{FusionRule, Matrix, ModelId, ModelTree, Origin, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, what: &str, ok: bool, detail: &str) {
    let line = format!("\n[{}] {id} {what}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{id} failed: {detail}");
}

fn paper_shape() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/paper-shape.toml");
    ExperimentConfig::load(&path).expect("bundled benchmark config loads")
}

// ---------------------------------------------------------------- AC1

/// Precision, recall, F1 and accuracy of the positive class from raw counts.
fn eq1(pred: &[usize], truth: &[usize]) -> [f64; 4] {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1.0,
            (1, 0) => fp += 1.0,
            (0, 1) => fn_ += 1.0,
            _ => tn += 1.0,
        }
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    [precision, recall, f1, (tp + tn) / (tp + tn + fp + fn_)]
}

#[test]
fn ac1_metric_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let s = scores(&confusion(&pred, &truth, 2, 1).unwrap(), Averaging::PositiveClass);
        for (got, want) in [s.precision, s.recall, s.f1, s.accuracy].iter().zip(eq1(&pred, &truth)) {
            worst = worst.max((got - want).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "AC1",
        "metric exactness",
        worst <= 1e-12 && elapsed < Duration::from_secs(1),
        &format!("200 cases, max |error| {worst:e} (tol 1e-12), {elapsed:?} (limit 1s)"),
    );
}

// ---------------------------------------------------------------- AC2

#[test]
fn ac2_fusion_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (k, n, c) = (rng.random_range(1..=5), rng.random_range(1..=20), rng.random_range(2..=4));
        let children: Vec<Matrix> = (0..k)
            .map(|_| {
                let v = (0..n * c).map(|_| rng.random_range(0.0..1.0)).collect();
                Matrix::from_vec(n, c, v).unwrap()
            })
            .collect();
        let max = fuse(&children, FusionRule::MaxProb).unwrap();
        let mean = fuse(&children, FusionRule::MeanProb).unwrap();
        for i in 0..n {
            let mut want_max = vec![0.0; c];
            let mut want_mean = vec![0.0; c];
            for j in 0..c {
                let col: Vec<f64> = children.iter().map(|m| m.get(i, j)).collect();
                want_max[j] = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                want_mean[j] = col.iter().sum::<f64>() / k as f64;
            }
            // First index holding the maximum.
            let top = |row: &[f64]| (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let ok = max.row(i) == want_max.as_slice()
                && mean.row(i) == want_mean.as_slice()
                && argmax(max.row(i)) == top(&want_max)
                && argmax(mean.row(i)) == top(&want_mean);
            mismatches += usize::from(!ok);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "AC2",
        "fusion oracle",
        mismatches == 0 && elapsed < Duration::from_secs(1),
        &format!("500 child sets, {mismatches} mismatching rows, {elapsed:?} (limit 1s)"),
    );
}

// ---------------------------------------------------------------- AC3

fn min_hidden_preactivation(dims: &[usize], values: &[f64], x: &Matrix) -> f64 {
    let mut min = f64::INFINITY;
    for row in x.iter_rows() {
        let mut a = row.to_vec();
        let mut off = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let z: Vec<f64> = (0..fo)
                .map(|o| values[off + fi * fo + o] + (0..fi).map(|i| values[off + o * fi + i] * a[i]).sum::<f64>())
                .collect();
            off += fi * fo + fo;
            if l + 2 < dims.len() {
                min = z.iter().fold(min, |m, v| m.min(v.abs()));
            }
            a = z.iter().map(|v| v.max(0.0)).collect();
        }
    }
    min
}

#[test]
fn ac3_gradient_check() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (k, entry) in default_roster().iter().enumerate() {
        let cfg = &entry.config;
        let dims = cfg.dims(4, 2);
        let len = ParamVector::expected_len(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(30 + k as u64);
        let (values, x) = loop {
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-0.8..0.8)).collect();
            let x = Matrix::from_vec(5, 4, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            // Finite differences do not apply across a ReLU kink.
            if cfg.activation == Activation::Tanh || min_hidden_preactivation(&dims, &v, &x) > 1e-3 {
                break (v, x);
            }
        };
        let y = [0, 1, 1, 0, 1];
        let g = gradient(&ParamVector::new(dims.clone(), values.clone()).unwrap(), cfg.activation, 0.0, &x, &y);
        for i in 0..len {
            let at = |h: f64| {
                let mut v = values.clone();
                v[i] += h;
                cross_entropy(&ParamVector::new(dims.clone(), v).unwrap(), cfg.activation, 0.0, &x, &y)
            };
            let numeric = (at(1e-5) - at(-1e-5)) / 2e-5;
            let rel = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "AC3",
        "gradient check",
        worst <= 1e-4 && elapsed < Duration::from_secs(5),
        &format!("8 roster architectures, max relative error {worst:e} (tol 1e-4), {elapsed:?} (limit 5s)"),
    );
}

// ---------------------------------------------------------------- AC4

#[derive(Debug, Clone, PartialEq)]
struct OracleNodeRound {
    accuracies: Vec<(String, u32, f64)>,
    b2m: [String; 2],
    lel_accuracy: f64,
    changed: bool,
}

fn oracle_accuracy(model: &ModelTree, data: &eflsim_core::data::LabeledDataset) -> f64 {
    let pred = model.predict(data.features()).unwrap();
    let correct = pred.iter().zip(data.labels()).filter(|(p, t)| p == t).count();
    correct as f64 / data.len() as f64
}

/// Best two by accuracy, then earlier creation round, then label.
fn oracle_best_two(c: &[(Arc<ModelTree>, u32, f64)]) -> [(Arc<ModelTree>, u32, f64); 2] {
    let mut v = c.to_vec();
    v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)).then_with(|| a.0.label().cmp(b.0.label())));
    [v[0].clone(), v[1].clone()]
}

fn ensemble(label: String, origin: Origin, children: Vec<Arc<ModelTree>>, fusion: FusionRule) -> ModelTree {
    ModelTree::ensemble(ModelId::new(label, origin, 0), children, fusion).unwrap()
}

/// Node and server algorithms written out as one loop.
fn replay(
    data: &[NodeData],
    roster: &[RosterEntry],
    master: u64,
    fusion: FusionRule,
    max_rounds: u32,
) -> (Vec<Vec<OracleNodeRound>>, bool) {
    // Per node: current best two as (model, creation round, accuracy).
    let mut b2m: Vec<[(Arc<ModelTree>, u32, f64); 2]> = Vec::new();
    let mut rounds: Vec<Vec<OracleNodeRound>> = Vec::new();
    let mut gel: Option<Arc<ModelTree>> = None;
    for r in 1..=max_rounds {
        let mut this_round = Vec::new();
        let mut lels = Vec::new();
        for (k, nd) in data.iter().enumerate() {
            let seed = round_seed(master, r, nd.node_id);
            let candidates: Vec<(Arc<ModelTree>, u32, f64)> = if r == 1 {
                roster
                    .iter()
                    .enumerate()
                    .map(|(i, e)| {
                        let s = roster_seed(seed, nd.node_id, &e.label);
                        let id = ModelId::new(e.label.clone(), Origin::Roster(i as u32 + 1), s);
                        let m = Arc::new(train(id, &e.config, &nd.train, s).unwrap().model);
                        let acc = oracle_accuracy(&m, &nd.test);
                        (m, 0, acc)
                    })
                    .collect()
            } else {
                let tuned =
                    Arc::new(fine_tune(gel.as_ref().unwrap(), &nd.train, &FineTuneOverrides::default(), seed).unwrap());
                let acc = oracle_accuracy(&tuned, &nd.test);
                vec![b2m[k][0].clone(), b2m[k][1].clone(), (tuned, r - 1, acc)]
            };
            let best = oracle_best_two(&candidates);
            let changed = r == 1 || {
                let old = [b2m[k][0].0.label(), b2m[k][1].0.label()];
                let new = [best[0].0.label(), best[1].0.label()];
                !(old == new || old == [new[1], new[0]])
            };
            let lel = Arc::new(ensemble(
                format!("LEL@n{}r{r}", nd.node_id),
                Origin::Local { node: nd.node_id, round: r },
                vec![best[0].0.clone(), best[1].0.clone()],
                fusion,
            ));
            this_round.push(OracleNodeRound {
                accuracies: candidates.iter().map(|(m, _, a)| (m.label().to_string(), m.id().version, *a)).collect(),
                b2m: [best[0].0.label().into(), best[1].0.label().into()],
                lel_accuracy: oracle_accuracy(&lel, &nd.test),
                changed,
            });
            lels.push(lel);
            if r == 1 {
                b2m.push(best);
            } else {
                b2m[k] = best;
            }
        }
        let stop = r > 1 && this_round.iter().all(|n| !n.changed);
        rounds.push(this_round);
        if stop {
            return (rounds, true);
        }
        gel = Some(Arc::new(ensemble(format!("GEL@r{r}"), Origin::GlobalRound(r), lels, fusion)));
    }
    (rounds, false)
}

#[test]
fn ac4_protocol_replay() {
    let start = Instant::now();
    let master = 42;
    let gen = |n: usize, seed| {
        generate_synthetic(&SyntheticSpec { n_per_label: vec![n, n], dim: 2, separation: 1.5, shift: vec![] }, seed)
            .unwrap()
    };
    let spec = PartitionSpec { strategy: PartitionStrategy::UniformIid, n_nodes: 2, seed: master };
    let data = partition(&gen(100, master), &gen(50, master + 1), &spec).unwrap().nodes;
    let roster: Vec<RosterEntry> = default_roster().into_iter().take(3).collect();
    let cfg = FederationConfig { n_nodes: 2, roster: roster.clone(), master_seed: master, ..Default::default() };

    let (oracle, stable) = replay(&data, &roster, master, cfg.fusion, cfg.max_rounds);
    let mut net = LocalNetwork::new([1, 2]);
    let trace = run_federation(&cfg, data, &mut net).unwrap().trace;

    let mut problems = Vec::new();
    if oracle.len() != trace.rounds.len() {
        problems.push(format!("oracle stopped after {} rounds, simulator after {}", oracle.len(), trace.rounds.len()));
    }
    if stable != (trace.termination == TerminationReason::B2MStable) {
        problems.push(format!("termination differs: oracle stable={stable}, simulator {:?}", trace.termination));
    }
    let mut worst = 0.0f64;
    for (o_round, t_round) in oracle.iter().zip(&trace.rounds) {
        for (o, t) in o_round.iter().zip(&t_round.nodes) {
            if o.b2m != t.b2m || o.changed != t.changed || o.accuracies.len() != t.accuracies.len() {
                problems.push(format!("round {} node {}: {o:?} vs {t:?}", t_round.round, t.node_id));
            }
            for ((label, version, acc), m) in o.accuracies.iter().zip(&t.accuracies) {
                if *label != m.label || *version != m.version {
                    problems.push(format!(
                        "round {}: candidate {label} v{version} vs {} v{}",
                        t_round.round, m.label, m.version
                    ));
                }
                worst = worst.max((acc - m.accuracy).abs());
            }
            worst = worst.max((o.lel_accuracy - t.lel_accuracy).abs());
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "AC4",
        "protocol replay oracle",
        problems.is_empty() && worst <= 1e-12 && elapsed < Duration::from_secs(30),
        &format!(
            "{} rounds ({:?}), max accuracy gap {worst:e} (tol 1e-12), {} mismatches{}, {elapsed:?} (limit 30s)",
            trace.rounds.len(),
            trace.termination,
            problems.len(),
            problems.first().map(|p| format!(" first: {p}")).unwrap_or_default()
        ),
    );
}

// ------------------------------------------------------------ AC5, AC6

struct SeededRuns {
    runs: Vec<Experiment>,
    elapsed: Duration,
}

fn seeded_runs() -> &'static SeededRuns {
    static RUNS: OnceLock<SeededRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let base = paper_shape();
        let runs = (1..=20u64)
            .map(|seed| {
                let mut cfg = base.clone();
                cfg.seed = seed;
                experiment::run(&cfg, thread_count(None, cfg.nodes as usize)).unwrap()
            })
            .collect();
        SeededRuns { runs, elapsed: start.elapsed() }
    })
}

#[test]
fn ac5_best_two_monotonicity() {
    let s = seeded_runs();
    let mut violations = Vec::new();
    for exp in &s.runs {
        let rounds = &exp.outcome.trace.rounds;
        for w in rounds.windows(2) {
            for (prev, now) in w[0].nodes.iter().zip(&w[1].nodes) {
                let sorted = |a: [f64; 2]| if a[0] >= a[1] { a } else { [a[1], a[0]] };
                let (p, n) = (sorted(prev.b2m_accuracies), sorted(now.b2m_accuracies));
                if n[0] < p[0] || n[1] < p[1] {
                    violations.push(format!("seed {} node {} round {}", exp.config.seed, now.node_id, w[1].round));
                }
            }
        }
    }
    verdict(
        "AC5",
        "best-two monotonicity",
        violations.is_empty() && s.elapsed < Duration::from_secs(300),
        &format!("20 seeded 5-node runs, {} violations, {:.1?} total (limit 5 min)", violations.len(), s.elapsed),
    );
}

#[test]
fn ac6_termination() {
    let s = seeded_runs();
    let stable = s.runs.iter().filter(|e| e.outcome.trace.termination == TerminationReason::B2MStable).count();
    let all_valid = s.runs.iter().all(|e| {
        let t = &e.outcome.trace;
        t.rounds.len() <= 50
            && (t.termination == TerminationReason::B2MStable || t.rounds.len() == t.config.max_rounds as usize)
    });
    let lengths: Vec<usize> = s.runs.iter().map(|e| e.outcome.trace.rounds.len()).collect();
    verdict(
        "AC6",
        "termination",
        all_valid && stable >= 15,
        &format!("{stable}/20 stopped on stable best-two sets (need 15), round counts {lengths:?}"),
    );
}

// ---------------------------------------------------------------- AC7

#[test]
fn ac7_parallel_determinism() {
    let start = Instant::now();
    let cfg = paper_shape();
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for threads in [1, 5] {
        let out = dir.path().join(format!("t{threads}"));
        experiment::run(&cfg, threads).unwrap().write(&out).unwrap();
        traces.push(std::fs::read(out.join("trace.json")).unwrap());
    }
    let elapsed = start.elapsed();
    verdict(
        "AC7",
        "determinism under parallelism",
        traces[0] == traces[1] && elapsed < Duration::from_secs(60),
        &format!(
            "trace.json with 1 and 5 worker threads: {} vs {} bytes, identical={}, {elapsed:?} (limit 1 min)",
            traces[0].len(),
            traces[1].len(),
            traces[0] == traces[1]
        ),
    );
}

// ---------------------------------------------------------------- AC8

#[test]
fn ac8_partition_fidelity() {
    // Rows N1..N5, columns (normal, pneumonia).
    const TRAIN: [[usize; 2]; 5] = [[288, 755], [269, 744], [260, 783], [265, 778], [259, 784]];
    const TEST: [[usize; 2]; 5] = [[50, 74], [48, 76], [53, 71], [36, 88], [46, 78]];
    let gen = |counts: Vec<usize>, seed| {
        generate_synthetic(&SyntheticSpec { n_per_label: counts, dim: 2, separation: 1.0, shift: vec![] }, seed)
            .unwrap()
    };
    let train = gen(vec![1349, 3883], 1);
    let test = gen(vec![234, 390], 2);
    let strategy = paper_5node(&train.label_counts(), &test.label_counts()).unwrap();
    let part = partition(&train, &test, &PartitionSpec { strategy, n_nodes: 5, seed: 8 }).unwrap();
    let mut wrong = 0;
    for (k, nd) in part.nodes.iter().enumerate() {
        wrong += usize::from(nd.train.label_counts() != TRAIN[k]);
        wrong += usize::from(nd.test.label_counts() != TEST[k]);
    }
    verdict(
        "AC8",
        "partition fidelity",
        wrong == 0 && part.nodes.len() == 5,
        &format!("paper-5node on totals 3883/1349 train, 390/234 test: {wrong} of 10 node rows differ from the table"),
    );
}

// ---------------------------------------------------------------- AC9

#[test]
fn ac9_benefit_of_federation() {
    let cfg = paper_shape();
    let exp = experiment::run(&cfg, thread_count(None, cfg.nodes as usize)).unwrap();
    let summary = exp.summary().unwrap();
    let gel = summary.final_gel_pooled.accuracy();
    let best = summary.best_round1_single.pooled_accuracy;
    verdict(
        "AC9",
        "benefit of federation",
        gel >= best - 0.02,
        &format!(
            "final {} pooled accuracy {gel:.4} vs best round-one single model {} (node {}) {best:.4}, slack 0.02",
            summary.final_gel, summary.best_round1_single.label, summary.best_round1_single.node_id
        ),
    );
}

// --------------------------------------------------------------- AC10

fn random_tree(rng: &mut ChaCha8Rng) -> ModelTree {
    let (d, c) = (rng.random_range(1..6), rng.random_range(2..4));
    let pool: Vec<Arc<ModelTree>> = (0..rng.random_range(1..5))
        .map(|i| {
            let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..8)).collect();
            let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
            let cfg = LearnerConfig::with_hidden(&hidden, act);
            let dims = cfg.dims(d, c);
            let values = (0..ParamVector::expected_len(&dims)).map(|_| rng.random_range(-1e3..1e3) / 7.0).collect();
            let mut id = ModelId::new(format!("leaf-{i}"), Origin::Roster(i + 1), rng.random());
            id.version = rng.random_range(0..5);
            Arc::new(ModelTree::base(id, cfg, ParamVector::new(dims, values).unwrap()))
        })
        .collect();
    fn grow(rng: &mut ChaCha8Rng, pool: &[Arc<ModelTree>], depth: u32) -> Arc<ModelTree> {
        if depth == 0 || rng.random_bool(0.25) {
            return pool[rng.random_range(0..pool.len())].clone();
        }
        let children = (0..rng.random_range(1..4)).map(|_| grow(rng, pool, depth - 1)).collect();
        let fusion = if rng.random_bool(0.5) { FusionRule::MaxProb } else { FusionRule::MeanProb };
        let r = rng.random_range(1..10);
        let id = ModelId::new(format!("GEL@r{r}"), Origin::GlobalRound(r), rng.random());
        Arc::new(ModelTree::ensemble(id, children, fusion).unwrap())
    }
    (*grow(rng, &pool, 4)).clone()
}

#[test]
fn ac10_serialization_round_trip() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = 0;
    for _ in 0..200 {
        let tree = random_tree(&mut rng);
        let back = deserialize_model(&serialize_model(&tree)).unwrap();
        let same_params = tree.unique_base_leaves().iter().zip(back.unique_base_leaves()).all(|(a, b)| {
            a.id == b.id && a.params.values().iter().zip(b.params.values()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        let x = Matrix::from_vec(
            8,
            tree.input_dim(),
            (0..8 * tree.input_dim()).map(|_| rng.random_range(-10.0..10.0)).collect(),
        )
        .unwrap();
        let (p, q) = (tree.predict_proba(&x).unwrap(), back.predict_proba(&x).unwrap());
        let same_pred = p.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        failures += usize::from(!(same_params && same_pred && back == tree));
    }
    let elapsed = start.elapsed();
    verdict(
        "AC10",
        "serialization round-trip",
        failures == 0 && elapsed < Duration::from_secs(5),
        &format!("200 random trees, {failures} failures, {elapsed:?} (limit 5s)"),
    );
}
