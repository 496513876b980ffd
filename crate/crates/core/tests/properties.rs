//! Property tests for invariants that hold across the public API.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use seqanomaly::data::{fit_and_normalize, split_train_test, NormalizationStats};
use seqanomaly::dual::{gram_matrix, smo_sweep_observed, DualSolution, PairRule};
use seqanomaly::eval::{auc_of, roc_curve, two_fold_split};
use seqanomaly::ocsvm::{hinge, smooth_hinge, OcsvmDual};
use seqanomaly::rnn::embed_sequence;
use seqanomaly::stiefel::{cayley_step, init_orthogonal, orthogonality_error};
use seqanomaly::svdd::SvddDual;
use seqanomaly::{CellKind, Label, PoolingMode, RnnParams, Sequence, SequenceBatch};

fn labels_strategy(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(prop::bool::ANY, n)
        .prop_filter("both classes present", |v| v.iter().any(|b| *b) && v.iter().any(|b| !*b))
        .prop_map(|v| {
            v.into_iter()
                .map(|b| if b { Label::Normal } else { Label::Anomalous })
                .collect()
        })
}

/// Integer-valued scores so that ties occur and transforms stay exact.
fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<Label>)> {
    labels_strategy(2..40).prop_flat_map(|labels| {
        let n = labels.len();
        (prop::collection::vec((-10i32..10).prop_map(f64::from), n), Just(labels))
    })
}

/// Fraction of (normal, anomalous) pairs ranked correctly, ties counting half.
fn mann_whitney(scores: &[f64], labels: &[Label]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, li) in labels.iter().enumerate() {
        for (j, lj) in labels.iter().enumerate() {
            if *li == Label::Normal && *lj == Label::Anomalous {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn flip(l: Label) -> Label {
    match l {
        Label::Normal => Label::Anomalous,
        Label::Anomalous => Label::Normal,
    }
}

fn batch_strategy(labeled: bool) -> impl Strategy<Value = SequenceBatch> {
    (1usize..4, 1usize..25).prop_flat_map(move |(p, n)| {
        prop::collection::vec(
            (1usize..8, prop::bool::ANY).prop_flat_map(move |(d, normal)| {
                (prop::collection::vec(-100.0f64..100.0, p * d), Just((d, normal)))
            }),
            n,
        )
        .prop_map(move |rows| {
            let items = rows
                .into_iter()
                .enumerate()
                .map(|(i, (vals, (d, normal)))| Sequence {
                    id: format!("s{i}"),
                    values: DMatrix::from_column_slice(p, d, &vals),
                    label: labeled.then_some(if normal { Label::Normal } else { Label::Anomalous }),
                })
                .collect();
            SequenceBatch::new(p, items).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn auc_equals_mann_whitney((scores, labels) in scored_labels()) {
        let auc = auc_of(&scores, &labels).unwrap();
        prop_assert!((auc - mann_whitney(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform((scores, labels) in scored_labels()) {
        let transformed: Vec<f64> = scores.iter().map(|s| (s / 4.0).exp() * 3.0 - 7.0).collect();
        prop_assert_eq!(auc_of(&scores, &labels).unwrap(), auc_of(&transformed, &labels).unwrap());
    }

    #[test]
    fn auc_label_flip_symmetry((scores, labels) in scored_labels()) {
        let auc = auc_of(&scores, &labels).unwrap();
        let flipped: Vec<Label> = labels.iter().copied().map(flip).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc_of(&scores, &flipped).unwrap() - (1.0 - auc)).abs() <= 1e-12);
        prop_assert!((auc_of(&negated, &flipped).unwrap() - auc).abs() <= 1e-12);
    }

    #[test]
    fn roc_is_monotone_from_origin_to_corner((scores, labels) in scored_labels()) {
        let curve = roc_curve(&scores, &labels).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
    }

    #[test]
    fn smooth_hinge_sandwiches_hinge(omega in -1e3f64..1e3, tau in 0.01f64..1e3) {
        let gap = smooth_hinge(omega, tau) - hinge(omega);
        prop_assert!(gap >= 0.0);
        prop_assert!(gap <= std::f64::consts::LN_2 / tau + 1e-12);
    }

    #[test]
    fn smooth_hinge_is_non_decreasing(a in -100.0f64..100.0, b in -100.0f64..100.0, tau in 0.1f64..100.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(smooth_hinge(lo, tau) <= smooth_hinge(hi, tau));
    }

    #[test]
    fn cayley_step_stays_on_manifold(
        (r, c) in (1usize..7).prop_flat_map(|r| (Just(r), 1..=r)),
        seed in any::<u64>(),
        mu in 0.0f64..5.0,
        g in prop::collection::vec(-10.0f64..10.0, 36),
    ) {
        let point = init_orthogonal(r, c, seed).unwrap();
        let grad = DMatrix::from_fn(r, c, |i, j| g[i * c + j]);
        let next = cayley_step(&point, &grad, mu).unwrap();
        prop_assert!(orthogonality_error(next.value()) <= 1e-10);
    }

    #[test]
    fn smo_sweeps_stay_feasible_and_descend(
        n in 2usize..7,
        lambda in 0.2f64..1.0,
        vals in prop::collection::vec(-3.0f64..3.0, 7 * 3),
        sphere in prop::bool::ANY,
    ) {
        let embs: Vec<DVector<f64>> = (0..n).map(|i| DVector::from_column_slice(&vals[3 * i..3 * i + 3])).collect();
        let k = gram_matrix(&embs);
        let objective = |a: &[f64]| if sphere { SvddDual.objective(&k, a) } else { OcsvmDual.objective(&k, a) };
        let mut sol = DualSolution::uniform(n, lambda).unwrap();
        let mut last = objective(&sol.alpha);
        let mut increased = false;
        for _ in 0..5 {
            let mut observer = |a: &[f64]| {
                let v = objective(a);
                increased |= v > last + 1e-12 * last.abs().max(1.0);
                last = v;
            };
            sol = if sphere {
                smo_sweep_observed(&SvddDual, &sol, &k, &mut observer).unwrap()
            } else {
                smo_sweep_observed(&OcsvmDual, &sol, &k, &mut observer).unwrap()
            };
            prop_assert!(sol.feasibility_error() <= 1e-10);
        }
        prop_assert!(!increased);
    }

    #[test]
    fn normalization_round_trips(batch in batch_strategy(false)) {
        let (normalized, stats) = fit_and_normalize(&batch).unwrap();
        for s in normalized.items() {
            prop_assert!(s.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let back = stats.invert(&normalized);
        for (a, b) in batch.items().iter().zip(back.items()) {
            for k in 0..batch.p() {
                if stats.is_constant(k) {
                    continue;
                }
                for (x, y) in a.values.row(k).iter().zip(b.values.row(k).iter()) {
                    prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn normalization_stats_round_trip_through_json(batch in batch_strategy(false)) {
        let stats = NormalizationStats::fit(&batch).unwrap();
        let text = serde_json::to_string(&stats).unwrap();
        prop_assert_eq!(serde_json::from_str::<NormalizationStats>(&text).unwrap(), stats);
    }

    #[test]
    fn split_is_a_partition(j in 1usize..6, seed in any::<u64>()) {
        // 50j items with 5j anomalies split into 30j/20j parts with exactly
        // 3j and 2j anomalies
        let (n, n_anom) = (50 * j, 5 * j);
        let items: Vec<Sequence> = (0..n)
            .map(|i| Sequence {
                id: format!("s{i}"),
                values: DMatrix::from_element(1, 2, i as f64),
                label: Some(if i < n - n_anom { Label::Normal } else { Label::Anomalous }),
            })
            .collect();
        let batch = SequenceBatch::new(1, items).unwrap();
        let (train, test) = split_train_test(&batch, 0.6, 0.1, seed).unwrap();
        let mut ids: Vec<String> = train.items().iter().chain(test.items()).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut all: Vec<String> = batch.items().iter().map(|s| s.id.clone()).collect();
        all.sort();
        prop_assert_eq!(ids, all);
        prop_assert_eq!(train.len(), 30 * j);
        prop_assert_eq!(train.count_label(Label::Anomalous), 3 * j);
        prop_assert_eq!(test.count_label(Label::Anomalous), 2 * j);
    }

    #[test]
    fn two_fold_split_is_stratified(batch in batch_strategy(true), seed in any::<u64>()) {
        let n_pos = batch.count_label(Label::Normal);
        let n_neg = batch.count_label(Label::Anomalous);
        prop_assume!(n_pos >= 2 && n_neg >= 2);
        let [a, b] = two_fold_split(&batch, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), batch.len());
        for class in [Label::Normal, Label::Anomalous] {
            let diff = a.count_label(class) as i64 - b.count_label(class) as i64;
            prop_assert!(diff.abs() <= 1);
        }
    }

    #[test]
    fn rnn_params_round_trip_through_json(
        m in 1usize..5,
        p in 1usize..4,
        seed in any::<u64>(),
        gru in prop::bool::ANY,
    ) {
        let kind = if gru { CellKind::Gru } else { CellKind::Lstm };
        let params = RnnParams::init_orthogonal(kind, m, p, seed);
        prop_assert!(params.constraint_error() <= 1e-10);
        let text = serde_json::to_string(&params).unwrap();
        prop_assert_eq!(serde_json::from_str::<RnnParams>(&text).unwrap(), params);
    }

    #[test]
    fn embeddings_are_bounded(
        m in 1usize..5,
        d in 1usize..10,
        seed in any::<u64>(),
        vals in prop::collection::vec(-50.0f64..50.0, 2 * 10),
        gru in prop::bool::ANY,
        pooling_ix in 0usize..3,
    ) {
        let kind = if gru { CellKind::Gru } else { CellKind::Lstm };
        let pooling = [PoolingMode::Mean, PoolingMode::Last, PoolingMode::Max][pooling_ix];
        let params = RnnParams::init_orthogonal(kind, m, 2, seed);
        let x = DMatrix::from_column_slice(2, d, &vals[..2 * d]);
        let e = embed_sequence(&x, &params, pooling).unwrap();
        prop_assert_eq!(e.h_bar.len(), m);
        prop_assert!(e.h_bar.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
}
