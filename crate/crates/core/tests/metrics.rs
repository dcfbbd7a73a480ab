mod common;

use kanseg::metrics::{foreground, scores_from_counts, ConfusionMatrix, Report, CLUTTER, VOID};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn scores_equal_per_pixel_recount_on_random_maps() {
    let mut r = common::rng(77);
    for trial in 0..100 {
        // Skew some maps so that classes go missing and undefined scores get exercised.
        let classes = if trial % 3 == 0 { 3 } else { 6 };
        let truth: Vec<u8> = (0..32 * 32).map(|_| if r.gen_bool(0.05) { VOID } else { r.gen_range(0..classes) }).collect();
        let pred: Vec<u8> = (0..32 * 32).map(|_| r.gen_range(0..6)).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.update(&pred, &truth).unwrap();

        let mut f1s = Vec::new();
        let mut ious = Vec::new();
        for c in 0..6u8 {
            let got = cm.class_scores(c as usize).unwrap().map(|s| (s.f1, s.iou));
            let want = common::recount_scores(&pred, &truth, c);
            assert_eq!(got, want, "trial {trial} class {c}");
            if c as usize != CLUTTER {
                if let Some((f, i)) = want {
                    f1s.push(f);
                    ious.push(i);
                }
            }
        }
        let m = cm.mean_scores(&foreground(6)).unwrap();
        assert_eq!(m.mf1, f1s.iter().sum::<f64>() / f1s.len() as f64);
        assert_eq!(m.miou, ious.iter().sum::<f64>() / ious.len() as f64);
    }
}

#[test]
fn worked_example_counts() {
    let s = scores_from_counts((8, 2, 2)).unwrap();
    assert_eq!(s.precision, 0.8);
    assert_eq!(s.recall, 0.8);
    assert!((s.f1 - 0.8).abs() < 1e-15);
    assert!((s.iou - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn degenerate_counts() {
    assert!(scores_from_counts((0, 0, 0)).is_none());
    let s = scores_from_counts((0, 3, 4)).unwrap();
    assert_eq!((s.f1, s.iou), (0.0, 0.0));
}

#[test]
fn void_pixels_are_not_counted() {
    let mut cm = ConfusionMatrix::new(6);
    cm.update(&[0, 1, 2, 3], &[0, VOID, VOID, 3]).unwrap();
    assert_eq!(cm.total(), 2);
    assert_eq!(cm.get(0, 0), 1);
    assert_eq!(cm.get(3, 3), 1);
}

#[test]
fn rejects_out_of_range_labels_and_length_mismatch() {
    let mut cm = ConfusionMatrix::new(6);
    assert!(cm.update(&[6], &[0]).is_err());
    assert!(cm.update(&[0], &[9]).is_err());
    assert!(cm.update(&[0, 1], &[0]).is_err());
    assert!(cm.merge(&ConfusionMatrix::new(5)).is_err());
}

#[test]
fn clutter_is_excluded_from_means() {
    assert_eq!(foreground(6), vec![0, 1, 2, 3, 4]);
    let mut cm = ConfusionMatrix::new(6);
    // Perfect on class 0, all clutter pixels wrong.
    cm.update(&[0, 0, 0, 1], &[0, 0, 0, 5]).unwrap();
    let m = cm.mean_scores(&foreground(6)).unwrap();
    // Class 1 is defined (one false positive) with zero scores.
    assert_eq!(m.mf1, 0.5);
    assert_eq!(m.miou, 0.5);
}

#[test]
fn report_layout() {
    let mut cm = ConfusionMatrix::new(6);
    cm.update(&[0, 1, 1, 2, 4, 5], &[0, 1, 2, 2, 4, 5]).unwrap();
    let text = Report::new(cm).to_string();
    assert!(text.contains("impervious"));
    assert!(text.contains("tree") && text.contains("undefined"));
    assert!(text.contains("clutter") && text.contains("excluded"));
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[lines.len() - 2].starts_with("mF1 "));
    assert!(lines[lines.len() - 1].starts_with("mIoU "));
}

fn label_map(n: usize) -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(prop_oneof![9 => 0u8..6, 1 => Just(VOID)], n)
}

proptest! {
    #[test]
    fn merging_equals_joint_update(a in label_map(64), b in label_map(64), c in label_map(64), d in label_map(64)) {
        let pa: Vec<u8> = a.iter().map(|&v| if v == VOID { 0 } else { v }).collect();
        let pc: Vec<u8> = c.iter().map(|&v| if v == VOID { 1 } else { v }).collect();
        let mut x = ConfusionMatrix::new(6);
        x.update(&pa, &b).unwrap();
        let mut y = ConfusionMatrix::new(6);
        y.update(&pc, &d).unwrap();
        x.merge(&y).unwrap();
        let mut joint = ConfusionMatrix::new(6);
        joint.update(&[pa, pc].concat(), &[b, d].concat()).unwrap();
        prop_assert_eq!(x, joint);
    }

    #[test]
    fn scores_are_bounded_and_ordered(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        if let Some(s) = scores_from_counts((tp, fp, fn_)) {
            for v in [s.precision, s.recall, s.f1, s.iou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.iou <= s.f1 + 1e-15);
            // F1 and IoU are monotone transforms of each other.
            prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_prediction_scores_one(truth in label_map(100)) {
        let pred: Vec<u8> = truth.iter().map(|&v| if v == VOID { 3 } else { v }).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.update(&pred, &truth).unwrap();
        if let Ok(m) = cm.mean_scores(&foreground(6)) {
            prop_assert_eq!(m.mf1, 1.0);
            prop_assert_eq!(m.miou, 1.0);
        }
    }
}
