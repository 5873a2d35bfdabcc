use proptest::prelude::*;

use ravar::fusion::{cross_attention, fuse_predictions, HierarchyAttnParams};
use ravar::metrics::{self, iou, EvalRecord};
use ravar::numerics::{linear, softmax, DenseMatrix};
use ravar::retrieval::{build_trajectory_set, TrajectoryKind, VisualTokenGrid};
use ravar::semantics::{build_scene_attribute_tokens, tokenize_and_filter, Detection, StopSet, SyntheticEncoder};
use ravar::ssm::{ssm_scan, SsmLayerParams};

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = DenseMatrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |d| DenseMatrix::new(rows, cols, d).unwrap())
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

/// Stable SSM layer: `A` scaled so every row sums to less than one in absolute value.
fn ssm_params(d: usize, ds: usize, n: usize) -> impl Strategy<Value = SsmLayerParams> {
    (
        matrix(d, ds, -1.0, 1.0),
        matrix(n, n, -0.9, 0.9),
        matrix(n, ds, -1.0, 1.0),
        matrix(ds, n, -1.0, 1.0),
    )
        .prop_map(move |(in_proj, a, b, c)| SsmLayerParams {
            in_proj,
            a: a.scale(1.0 / n as f64),
            b,
            c,
        })
}

fn scan_case() -> impl Strategy<Value = (usize, SsmLayerParams, DenseMatrix, DenseMatrix)> {
    (1usize..12, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(len, d, ds, n)| {
        (
            Just(len),
            ssm_params(d, ds, n),
            matrix(len, d, -2.0, 2.0),
            matrix(len, d, -2.0, 2.0),
        )
    })
}

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (0.0..0.9f64, 0.0..0.9f64, 0.01..0.5f64, 0.01..0.5f64)
        .prop_map(|(x, y, w, h)| [x, y, (x + w).min(1.0), (y + h).min(1.0)])
}

fn eval_records() -> impl Strategy<Value = Vec<EvalRecord>> {
    (2usize..8, 1usize..4).prop_flat_map(|(n, c)| {
        prop::collection::vec(
            (prop::collection::vec(any::<bool>(), c), prop::collection::vec(0.0..1.0f64, c)),
            n,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (gt_labels, pred_scores))| EvalRecord {
                    sample_id: format!("s{i}"),
                    gt_bbox: [0.1, 0.1, 0.5, 0.5],
                    pred_bbox: [0.2, 0.2, 0.6, 0.6],
                    gt_labels,
                    pred_scores,
                })
                .collect()
        })
    })
}

fn same_metric(a: ravar::Result<f64>, b: ravar::Result<f64>) -> bool {
    match (a, b) {
        (Ok(x), Ok(y)) => (x - y).abs() <= 1e-12,
        (Err(_), Err(_)) => true,
        _ => false,
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in prop::collection::vec(-30.0..30.0f64, 1..10), shift in -50.0..50.0f64) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        prop_assert!(close(&p, &softmax(&shifted).unwrap(), 1e-10));
    }

    #[test]
    fn linear_is_additive_in_the_input(
        (x, y, w) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(r, i, o)| (matrix(r, i, -3.0, 3.0), matrix(r, i, -3.0, 3.0), matrix(i, o, -3.0, 3.0)))
    ) {
        let zero = vec![0.0; w.cols()];
        let lhs = linear(&x.add(&y).unwrap(), &w, &zero).unwrap();
        let rhs = linear(&x, &w, &zero).unwrap().add(&linear(&y, &w, &zero).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn scan_is_linear((_, p, x, y) in scan_case(), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let mixed = x.scale(alpha).add(&y.scale(beta)).unwrap();
        let lhs = ssm_scan(&mixed, &p).unwrap().outputs;
        let rhs = ssm_scan(&x, &p).unwrap().outputs.scale(alpha)
            .add(&ssm_scan(&y, &p).unwrap().outputs.scale(beta)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-9);
    }

    #[test]
    fn scan_prefixes_agree((len, p, x, _) in scan_case(), cut in 1usize..12) {
        let cut = cut.min(len);
        let full = ssm_scan(&x, &p).unwrap().outputs;
        let head = DenseMatrix::new(cut, x.cols(), x.data()[..cut * x.cols()].to_vec()).unwrap();
        let part = ssm_scan(&head, &p).unwrap().outputs;
        prop_assert_eq!(part.data(), &full.data()[..cut * full.cols()]);
    }

    #[test]
    fn trajectories_follow_query_order(
        (grid, queries, perm) in (1usize..4, 1usize..6, 1usize..4, 1usize..5).prop_flat_map(|(frames, cells, d, k)| (
            prop::collection::vec(-1.0..1.0f64, frames * cells * d)
                .prop_map(move |t| VisualTokenGrid::new(frames, cells, d, t).unwrap()),
            matrix(k, d, -1.0, 1.0),
            Just((0..k).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let permuted = DenseMatrix::from_rows(&perm.iter().map(|&i| queries.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let base = build_trajectory_set(&queries, &grid, TrajectoryKind::Keyword).unwrap();
        let moved = build_trajectory_set(&permuted, &grid, TrajectoryKind::Keyword).unwrap();
        for (slot, &src) in perm.iter().enumerate() {
            prop_assert_eq!(&moved.trajectories[slot].steps, &base.trajectories[src].steps);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(records in eval_records()) {
        let squashed: Vec<EvalRecord> = records.iter().map(|r| EvalRecord {
            pred_scores: r.pred_scores.iter().map(|s| (3.0 * s).exp() / 10.0).collect(),
            ..r.clone()
        }).collect();
        prop_assert!(same_metric(metrics::multilabel_map(&records), metrics::multilabel_map(&squashed)));
        prop_assert!(same_metric(metrics::auroc(&records), metrics::auroc(&squashed)));
    }

    #[test]
    fn attention_rows_are_convex_combinations(
        (q, c, w_q, w_k, w_v, prompts) in (1usize..4, 1usize..6, 1usize..4, 1usize..4, 0usize..3).prop_flat_map(|(nq, nc, d, da, np)| (
            matrix(nq, d, -2.0, 2.0), matrix(nc, d, -2.0, 2.0),
            matrix(d, da, -1.0, 1.0), matrix(d, da, -1.0, 1.0), matrix(d, da, -1.0, 1.0),
            matrix(np, da, -1.0, 1.0),
        ))
    ) {
        let params = HierarchyAttnParams { w_q, w_k, w_v: w_v.clone(), prompts: prompts.clone() };
        let out = cross_attention(&q, &c, &params).unwrap();
        prop_assert_eq!(out.rows(), q.rows() + prompts.rows());
        let v = c.matmul(&w_v).unwrap();
        for col in 0..v.cols() {
            let vals: Vec<f64> = (0..v.rows()).map(|r| v.get(r, col)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in 0..out.rows() {
                prop_assert!(out.get(r, col) >= lo - 1e-12 && out.get(r, col) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn attention_commutes_with_query_and_context_order(
        (q, c, w, qperm, cperm) in (1usize..5, 1usize..6, 1usize..4, 1usize..4).prop_flat_map(|(nq, nc, d, da)| (
            matrix(nq, d, -2.0, 2.0), matrix(nc, d, -2.0, 2.0),
            (matrix(d, da, -1.0, 1.0), matrix(d, da, -1.0, 1.0), matrix(d, da, -1.0, 1.0), matrix(2, da, -1.0, 1.0)),
            Just((0..nq).collect::<Vec<_>>()).prop_shuffle(),
            Just((0..nc).collect::<Vec<_>>()).prop_shuffle(),
        ))
    ) {
        let params = HierarchyAttnParams { w_q: w.0, w_k: w.1, w_v: w.2, prompts: w.3 };
        let pick = |m: &DenseMatrix, order: &[usize]| DenseMatrix::from_rows(&order.iter().map(|&i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let base = cross_attention(&q, &c, &params).unwrap();
        let moved = cross_attention(&pick(&q, &qperm), &pick(&c, &cperm), &params).unwrap();
        for (slot, &src) in qperm.iter().enumerate() {
            prop_assert!(close(moved.row(slot), base.row(src), 1e-12));
        }
        for r in q.rows()..base.rows() {
            prop_assert!(close(moved.row(r), base.row(r), 1e-12));
        }
    }

    #[test]
    fn fusion_is_commutative(a in boxes(), b in boxes(), pa in prop::collection::vec(0.0..1.0f64, 3), pb in prop::collection::vec(0.0..1.0f64, 3)) {
        prop_assert_eq!(fuse_predictions((&a, &pa), (&b, &pb)), fuse_predictions((&b, &pb), (&a, &pa)));
    }

    #[test]
    fn stopword_filtering_is_idempotent(words in prop::collection::vec(prop::sample::select(vec![
        "the", "a", "person", "Is", "walking", "toward", "and", "holding", "cup", "of", "to", "door", "slowly",
    ]), 1..10)) {
        let stop = StopSet::default_list();
        let (_, keywords) = tokenize_and_filter(&words.join(" "), &stop).unwrap();
        prop_assume!(!keywords.is_empty());
        let (_, again) = tokenize_and_filter(&keywords.join(" "), &stop).unwrap();
        prop_assert_eq!(again, keywords);
    }

    #[test]
    fn fewer_scene_tokens_at_higher_thresholds(
        confs in prop::collection::vec(0.0..1.0f64, 0..8),
        t1 in 0.0..1.0f64,
        t2 in 0.0..1.0f64,
        cap in 1usize..6,
    ) {
        let detections: Vec<Detection> = confs.iter().map(|&confidence| Detection {
            bbox: [0.1, 0.1, 0.4, 0.4],
            category: "cup".into(),
            confidence,
        }).collect();
        let encoder = SyntheticEncoder { dim: 4, seed: 0 };
        let weight = DenseMatrix::filled(8, 3, 0.1);
        let bias = [0.0; 3];
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let count = |t| build_scene_attribute_tokens(&detections, &encoder, &weight, &bias, t, cap).unwrap().len();
        prop_assert!(count(hi) <= count(lo));
        prop_assert!(count(lo) <= cap);
    }
}
