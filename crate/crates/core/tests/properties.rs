use matr_core::alignment::{align, extract_span, hard_dtw, soft_dtw, AlignMode, CostMatrix};
use matr_core::autodiff::{xavier_init, Array, ParamStore, Tape};
use matr_core::datakit::{
    labels_to_timestamps, sample_pretrain, timestamps_to_labels, FeatureSequence, PretrainConfig,
};
use matr_core::heads::{decode_segments, nms_1d, rank_order, Prediction, Segment};
use matr_core::metrics::temporal_iou;
use matr_core::objectives::{giou_1d, smooth_l1, MomentLabels};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cost_matrix(max_m: usize, max_n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_m, 1..=max_n).prop_flat_map(|(m, n)| prop::collection::vec(prop::collection::vec(0.0..2.0f64, n), m))
}

fn mode() -> impl Strategy<Value = AlignMode> {
    prop_oneof![Just(AlignMode::Global), Just(AlignMode::Subsequence)]
}

fn segment() -> impl Strategy<Value = Segment> {
    (0.0..50.0f64, 0.0..20.0f64, 0.0..1.0f64).prop_map(|(s, l, p)| Segment::new(s, s + l, p))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn soft_cost_bounded_by_hard(c in cost_matrix(7, 6), mode in mode(), gamma in 1e-3..2.0f64) {
        let cm = CostMatrix::from_rows(&c).unwrap();
        let soft = soft_dtw(&cm, gamma, mode).unwrap().soft_cost;
        let (hard, _) = hard_dtw(&cm, mode);
        prop_assert!(soft <= hard + 1e-12);
    }

    #[test]
    fn soft_cost_non_increasing_in_gamma(c in cost_matrix(6, 6), mode in mode(), g in 1e-3..1.0f64, k in 1.0..5.0f64) {
        let cm = CostMatrix::from_rows(&c).unwrap();
        let lo = soft_dtw(&cm, g, mode).unwrap().soft_cost;
        let hi = soft_dtw(&cm, g * k, mode).unwrap().soft_cost;
        prop_assert!(hi <= lo + 1e-12);
    }

    #[test]
    fn expected_alignment_in_unit_interval(c in cost_matrix(7, 6), mode in mode(), gamma in 1e-3..2.0f64) {
        let e = soft_dtw(&CostMatrix::from_rows(&c).unwrap(), gamma, mode).unwrap().expected_alignment;
        prop_assert!(e.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hard_path_is_a_monotone_walk(c in cost_matrix(8, 6), mode in mode()) {
        let (m, n) = (c.len(), c[0].len());
        let (cost, path) = hard_dtw(&CostMatrix::from_rows(&c).unwrap(), mode);
        let mut cells = Vec::new();
        for i in 0..m {
            for j in 0..n {
                if path.get2(i, j) == 1.0 {
                    cells.push((i, j));
                }
            }
        }
        // row-major order of a monotone path is its walk order
        cells.sort_by_key(|&(i, j)| (i, j));
        for w in cells.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 as isize - w[0].1 as isize);
            prop_assert!(matches!((di, dj), (1, 0) | (0, 1) | (1, 1)), "step {:?}", w);
        }
        prop_assert_eq!(cells.first().unwrap().1, 0);
        prop_assert_eq!(cells.last().unwrap().1, n - 1);
        if mode == AlignMode::Global {
            prop_assert_eq!(cells[0], (0, 0));
            prop_assert_eq!(*cells.last().unwrap(), (m - 1, n - 1));
        }
        let total: f64 = cells.iter().map(|&(i, j)| c[i][j]).sum();
        prop_assert!((total - cost).abs() < 1e-9);
        // matched target rows form an interval
        let (s, e) = extract_span(&path).unwrap();
        for i in s..=e {
            prop_assert!(cells.iter().any(|&(r, _)| r == i));
        }
    }

    #[test]
    fn slice_query_is_recovered(m in 6usize..16, len in 2usize..5, start_frac in 0.0..1.0f64, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = 8;
        let target = Array::new(vec![m, d], (0..m * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let s = ((m - len) as f64 * start_frac) as usize;
        let query = Array::new(vec![len, d], target.data()[s * d..(s + len) * d].to_vec()).unwrap();
        let cost = matr_core::alignment::cosine_cost(&target, &query).unwrap();
        let res = align(&cost, 1e-3, AlignMode::Subsequence).unwrap();
        prop_assert!(res.soft_cost <= 0.01);
        let (ps, pe) = res.span.unwrap();
        prop_assert!(ps >= s && pe <= s + len - 1, "span ({}, {}) vs planted ({}, {})", ps, pe, s, s + len - 1);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-30.0..30.0f64, 5), 1..6)) {
        let ps = ParamStore::new();
        let mut t = Tape::eval(&ps);
        let x = t.constant(Array::from_rows(&rows).unwrap());
        let y = t.softmax_rows(x);
        for row in t.value(y).to_rows() {
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn xavier_within_bound(fi in 1usize..40, fo in 1usize..40, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = xavier_init(&[fi, fo], &mut r).unwrap();
        let bound = (6.0 / (fi + fo) as f64).sqrt();
        prop_assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in segment(), b in segment()) {
        let x = temporal_iou(&a, &b);
        prop_assert_eq!(x, temporal_iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        if a.length() > 0.0 {
            prop_assert_eq!(temporal_iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn nms_output_is_ranked_sparse_subset(segs in prop::collection::vec(segment(), 0..20), thr in 0.0..1.0f64) {
        let kept = nms_1d(&segs, thr);
        prop_assert!(kept.iter().all(|k| segs.contains(k)));
        for w in kept.windows(2) {
            prop_assert!(rank_order(&w[0], &w[1]) != std::cmp::Ordering::Greater);
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(temporal_iou(a, b) <= thr);
            }
        }
        prop_assert_eq!(kept.is_empty(), segs.is_empty());
    }

    #[test]
    fn decoded_segments_stay_inside_video(
        probs in prop::collection::vec(0.0..1.0f64, 1..30),
        offs in prop::collection::vec((0.0..40.0f64, 0.0..40.0f64), 30),
        period in 0.1..5.0f64,
    ) {
        let m = probs.len();
        let pred = Prediction { fg_probs: probs.clone(), offsets: offs[..m].to_vec() };
        let segs = decode_segments(&pred, period).unwrap();
        let end = (m - 1) as f64 * period;
        for (s, p) in segs.iter().zip(&probs) {
            prop_assert!(0.0 <= s.start_sec && s.start_sec <= s.end_sec && s.end_sec <= end + 1e-9);
            prop_assert_eq!(s.score, *p);
        }
    }

    #[test]
    fn labels_round_trip(m in 1usize..60, a in 0usize..60, b in 0usize..60, period in 0.5..3.0f64) {
        let (s, e) = (a.min(b) % m, a.max(b) % m);
        let (s, e) = (s.min(e), s.max(e));
        let (ts, te) = labels_to_timestamps((s, e), period);
        let labels = timestamps_to_labels((ts, te), m, period).unwrap();
        prop_assert_eq!(labels.span(), Some((s, e)));
        prop_assert!(labels.validate().is_ok());
    }

    #[test]
    fn giou_and_smooth_l1_ranges(a1 in -10.0..10.0f64, l1 in 0.0..10.0f64, a2 in -10.0..10.0f64, l2 in 0.0..10.0f64, r in -5.0..5.0f64) {
        let g = giou_1d(a1, a1 + l1, a2, a2 + l2);
        prop_assert!((-1.0..=1.0).contains(&g));
        let (v, dv) = smooth_l1(r);
        prop_assert!(v >= 0.0 && dv.abs() <= 1.0);
    }

    #[test]
    fn pretrain_labels_consistent(len in 4usize..40, seed in any::<u64>(), augment in any::<bool>()) {
        use rand::Rng;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let feats = Array::new(vec![len, 3], (0..len * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let v = FeatureSequence::new("v", feats, 2.0).unwrap();
        let cfg = PretrainConfig { augment, ..PretrainConfig::default() };
        for s in sample_pretrain(&v, seed, &cfg).unwrap() {
            prop_assert!(s.labels.validate().is_ok());
            let (a, b) = s.span;
            prop_assert!(b - a + 1 >= 2 && b - a < len / 2);
            prop_assert_eq!(s.labels.span(), Some(s.span));
        }
    }
}

#[test]
fn moment_labels_reject_bad_spans() {
    assert!(MomentLabels::from_span(5, 3, 2).is_err());
    assert!(MomentLabels::from_span(5, 0, 5).is_err());
}
