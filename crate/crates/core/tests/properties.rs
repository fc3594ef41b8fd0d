//! Property tests over fusion, leaf dedupe, best-two selection, metrics,
//! the wire codec and partitioning.

use std::sync::Arc;

use eflsim_core::codec::{
    decode_broadcast, decode_report, deserialize_model, encode_broadcast, encode_report, serialize_model,
    GlobalBroadcast,
};
use eflsim_core::data::{partition, LabeledDataset, PartitionSpec, PartitionStrategy};
use eflsim_core::ensemble::{best_two_indices, choose_best2, evaluate, make_gel, make_lel};
use eflsim_core::learners::net::Activation;
use eflsim_core::learners::LearnerConfig;
use eflsim_core::linalg::argmax;
use eflsim_core::metrics::{confusion, scores, Averaging};
use eflsim_core::model::fuse;
use eflsim_core::node::{AccuracyEntry, NodeReport};
use eflsim_core::{FusionRule, Matrix, ModelId, ModelTree, Origin, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_base(rng: &mut ChaCha8Rng, label: &str, d: usize, c: usize) -> ModelTree {
    let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..6)).collect();
    let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let config = LearnerConfig::with_hidden(&hidden, act);
    let dims = config.dims(d, c);
    let values = (0..ParamVector::expected_len(&dims)).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut id = ModelId::new(label, Origin::Roster(rng.random_range(1..9)), rng.random());
    id.version = rng.random_range(0..4);
    ModelTree::base(id, config, ParamVector::new(dims, values).unwrap())
}

/// A random nested tree whose leaves are drawn, with repetition, from a
/// small pool so that shared leaves are common.
fn random_tree(seed: u64) -> ModelTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, c) = (rng.random_range(1..5), rng.random_range(2..4));
    let pool: Vec<Arc<ModelTree>> =
        (0..rng.random_range(1..5)).map(|i| Arc::new(random_base(&mut rng, &format!("m{i}"), d, c))).collect();
    fn build(rng: &mut ChaCha8Rng, pool: &[Arc<ModelTree>], depth: u32, serial: &mut u32) -> Arc<ModelTree> {
        if depth == 0 || rng.random_bool(0.3) {
            return pool[rng.random_range(0..pool.len())].clone();
        }
        let children = (0..rng.random_range(1..4)).map(|_| build(rng, pool, depth - 1, serial)).collect();
        *serial += 1;
        let fusion = if rng.random_bool(0.5) { FusionRule::MaxProb } else { FusionRule::MeanProb };
        let id = ModelId::new(format!("E{serial}"), Origin::GlobalRound(*serial), rng.random());
        Arc::new(ModelTree::ensemble(id, children, fusion).unwrap())
    }
    let mut serial = 0;
    let depth = rng.random_range(0..4);
    let t = build(&mut rng, &pool, depth, &mut serial);
    Arc::try_unwrap(t).unwrap_or_else(|a| (*a).clone())
}

fn random_features(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap()
}

fn prob_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Matrix {
    let mut v = Vec::with_capacity(n * c);
    for _ in 0..n {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        v.extend(raw.iter().map(|x| x / s));
    }
    Matrix::from_vec(n, c, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn max_fusion_picks_child_entries(seed: u64, k in 1usize..6, n in 1usize..12, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let children: Vec<Matrix> = (0..k).map(|_| prob_rows(&mut rng, n, c)).collect();
        let fused = fuse(&children, FusionRule::MaxProb).unwrap();
        for i in 0..n {
            for j in 0..c {
                let v = fused.get(i, j);
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(children.iter().any(|m| m.get(i, j) == v));
                prop_assert!(children.iter().all(|m| m.get(i, j) <= v));
            }
        }
    }

    #[test]
    fn mean_fusion_rows_sum_to_one(seed: u64, k in 1usize..6, n in 1usize..12, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let children: Vec<Matrix> = (0..k).map(|_| prob_rows(&mut rng, n, c)).collect();
        let fused = fuse(&children, FusionRule::MeanProb).unwrap();
        for row in fused.iter_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn replicated_child_predicts_like_the_child(seed: u64, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Arc::new(random_base(&mut rng, "m", 3, 3));
        let x = random_features(seed, 16, 3);
        let alone = m.predict(&x).unwrap();
        for rule in [FusionRule::MaxProb, FusionRule::MeanProb] {
            let e = ModelTree::ensemble(ModelId::new("e", Origin::GlobalRound(1), 0), vec![m.clone(); k], rule).unwrap();
            prop_assert_eq!(e.predict(&x).unwrap(), alone.clone());
        }
    }

    #[test]
    fn prediction_is_pure(seed: u64) {
        let t = random_tree(seed);
        let x = random_features(seed, 8, t.input_dim());
        let a = t.predict_proba(&x).unwrap();
        let b = t.predict_proba(&x).unwrap();
        prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
        let labels: Vec<usize> = a.iter_rows().map(argmax).collect();
        prop_assert_eq!(t.predict(&x).unwrap(), labels);
    }

    #[test]
    fn unique_leaves_have_no_duplicates(seed: u64) {
        let t = random_tree(seed);
        let leaves = t.unique_base_leaves();
        let mut keys: Vec<_> = leaves.iter().map(|b| b.id.key()).collect();
        let n = keys.len();
        keys.sort();
        keys.dedup();
        prop_assert_eq!(keys.len(), n);
        prop_assert!(n >= 1 && n <= t.leaf_count());
    }

    #[test]
    fn codec_round_trip_preserves_bits_and_predictions(seed: u64) {
        let t = random_tree(seed);
        let bytes = serialize_model(&t);
        prop_assert_eq!(&serialize_model(&t), &bytes);
        let back = deserialize_model(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        let x = random_features(seed, 10, t.input_dim());
        let (p, q) = (t.predict_proba(&x).unwrap(), back.predict_proba(&x).unwrap());
        prop_assert!(p.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_models_fail_to_decode(seed: u64, cut in 0.0f64..1.0) {
        let bytes = serialize_model(&random_tree(seed));
        let at = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(deserialize_model(&bytes[..at]).is_err());
    }

    #[test]
    fn messages_round_trip(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Arc::new(random_base(&mut rng, "a", 2, 2));
        let b = Arc::new(random_base(&mut rng, "b", 2, 2));
        let lel = Arc::new(make_lel([a.clone(), b.clone()], FusionRule::MaxProb, 3, 2));
        let entry = |m: &ModelTree, acc: f64| AccuracyEntry { id: m.id().clone(), accuracy: acc };
        let report = NodeReport {
            node_id: 2,
            round: 3,
            lel: lel.clone(),
            lel_accuracy: rng.random(),
            b2m: [entry(&a, 0.75), entry(&b, 0.5)],
            accuracies: vec![entry(&a, 0.75), entry(&b, 0.5)],
            changed: rng.random_bool(0.5),
        };
        prop_assert_eq!(decode_report(&encode_report(&report)).unwrap(), report);
        let gel = Arc::new(make_gel(vec![lel.clone(), lel], FusionRule::MaxProb, 3).unwrap());
        let msg = GlobalBroadcast { round: 3, gel };
        prop_assert_eq!(decode_broadcast(&encode_broadcast(&msg)).unwrap(), msg);
    }
}

/// Pair chosen by exhaustive comparison: the first beats every other
/// candidate, the second beats every candidate except the first.
fn brute_force_pair(c: &[(ModelId, f64)]) -> (usize, usize) {
    let beats = |i: usize, j: usize| {
        let (a, b) = (&c[i], &c[j]);
        if a.1 != b.1 {
            return a.1 > b.1;
        }
        if a.0.origin.round() != b.0.origin.round() {
            return a.0.origin.round() < b.0.origin.round();
        }
        if a.0.label != b.0.label {
            return a.0.label < b.0.label;
        }
        i < j
    };
    for i in 0..c.len() {
        if (0..c.len()).all(|j| j == i || beats(i, j)) {
            for k in 0..c.len() {
                if k != i && (0..c.len()).all(|j| j == i || j == k || beats(k, j)) {
                    return (i, k);
                }
            }
        }
    }
    unreachable!("a strict total order always has a maximum")
}

fn candidate_strategy() -> impl Strategy<Value = Vec<(ModelId, f64)>> {
    prop::collection::vec((0u8..6, 0u32..4, 0u32..8), 2..9).prop_map(|raw| {
        raw.into_iter()
            .map(|(l, r, a)| {
                let origin = if r == 0 { Origin::Roster(1) } else { Origin::GlobalRound(r) };
                // Dyadic accuracies keep ties and shifts exact.
                (ModelId::new(format!("m{l}"), origin, 0), f64::from(a) / 8.0)
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn best_two_matches_brute_force(c in candidate_strategy()) {
        let keyed: Vec<(&ModelId, f64)> = c.iter().map(|(id, a)| (id, *a)).collect();
        prop_assert_eq!(best_two_indices(&keyed).unwrap(), brute_force_pair(&c));
    }

    #[test]
    fn selection_is_shift_invariant(c in candidate_strategy(), k in 0u32..16) {
        let shift = f64::from(k) / 16.0;
        let keyed: Vec<(&ModelId, f64)> = c.iter().map(|(id, a)| (id, *a)).collect();
        let shifted: Vec<(&ModelId, f64)> = c.iter().map(|(id, a)| (id, *a + shift)).collect();
        let (i, j) = best_two_indices(&keyed).unwrap();
        let (p, q) = best_two_indices(&shifted).unwrap();
        prop_assert_eq!((&c[i].0.label, &c[j].0.label), (&c[p].0.label, &c[q].0.label));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metric_identities(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..60), perm_seed: u64) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let cm = confusion(&pred, &truth, 2, 1).unwrap();
        let (tp, fp, fn_, tn) = cm.one_vs_rest(1);
        let pc = scores(&cm, Averaging::PositiveClass);
        let w = scores(&cm, Averaging::Weighted);
        prop_assert_eq!(pc.accuracy, (tp + tn) as f64 / (tp + tn + fp + fn_) as f64);
        prop_assert_eq!(pc.accuracy, w.accuracy);
        if pc.precision + pc.recall > 0.0 {
            let f1 = 2.0 * pc.precision * pc.recall / (pc.precision + pc.recall);
            prop_assert!((pc.f1 - f1).abs() <= 1e-12);
        }
        for s in [pc, w] {
            for v in [s.precision, s.recall, s.f1, s.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        let mut shuffled = pairs.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let (p2, t2): (Vec<usize>, Vec<usize>) = shuffled.into_iter().unzip();
        let cm2 = confusion(&p2, &t2, 2, 1).unwrap();
        prop_assert_eq!(scores(&cm2, Averaging::PositiveClass), pc);
        prop_assert_eq!(scores(&cm2, Averaging::Weighted), w);
    }
}

fn labeled(seed: u64, counts: &[usize]) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat_n(l, n)).collect();
    // Feature 0 is the row index, so rows stay identifiable after a split.
    let values = (0..labels.len()).flat_map(|i| [i as f64, rng.random_range(-1.0..1.0)]).collect();
    LabeledDataset::new(Matrix::from_vec(labels.len(), 2, values).unwrap(), labels, counts.len()).unwrap()
}

fn row_ids(ds: &LabeledDataset) -> Vec<usize> {
    ds.features().iter_rows().map(|r| r[0] as usize).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partitions_are_disjoint_and_exhaustive(
        seed: u64,
        n_nodes in 2u32..7,
        train in prop::collection::vec(20usize..80, 2..4),
        alpha in 0.1f64..50.0,
        dirichlet: bool,
    ) {
        let test: Vec<usize> = train.iter().map(|n| n / 2).collect();
        let (src_train, src_test) = (labeled(seed, &train), labeled(seed ^ 1, &test));
        let strategy = if dirichlet { PartitionStrategy::DirichletSkew { alpha } } else { PartitionStrategy::UniformIid };
        let spec = PartitionSpec { strategy, n_nodes, seed };
        let part = match partition(&src_train, &src_test, &spec) {
            Ok(p) => p,
            // A skewed draw may leave a node without data; that is reported, not hidden.
            Err(_) if dirichlet => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        prop_assert_eq!(part.nodes.len(), n_nodes as usize);
        for (split, src) in [(0, &src_train), (1, &src_test)] {
            let mut all: Vec<usize> = part
                .nodes
                .iter()
                .flat_map(|n| row_ids(if split == 0 { &n.train } else { &n.test }))
                .collect();
            all.extend(if split == 0 { &part.unassigned_train } else { &part.unassigned_test });
            all.sort_unstable();
            prop_assert_eq!(all, (0..src.len()).collect::<Vec<_>>());
        }
        prop_assert!(part.unassigned_train.is_empty() && part.unassigned_test.is_empty());
        prop_assert_eq!(partition(&src_train, &src_test, &spec).unwrap(), part);
    }
}

#[test]
fn choose_best2_agrees_with_index_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = labeled(5, &[10, 10]);
    let models: Vec<_> =
        (0..6).map(|i| evaluate(Arc::new(random_base(&mut rng, &format!("m{i}"), 2, 2)), &data, 1).unwrap()).collect();
    let keyed: Vec<(&ModelId, f64)> = models.iter().map(|m| (m.id(), m.accuracy)).collect();
    let (i, j) = best_two_indices(&keyed).unwrap();
    let pair = choose_best2(&models).unwrap();
    assert_eq!((pair[0].id(), pair[1].id()), (models[i].id(), models[j].id()));
}
