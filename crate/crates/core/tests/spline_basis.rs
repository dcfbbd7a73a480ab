mod common;

use common::{cox_de_boor, rng, uniform_knots};
use kanseg::spline::{GridSpec, SplineGrid};
use proptest::prelude::*;
use rand::Rng;

fn grid(min: f64, max: f64, g: usize, k: usize) -> SplineGrid {
    SplineGrid::new(GridSpec { range_min: min, range_max: max, intervals: g, order: k }).unwrap()
}

#[test]
fn partition_of_unity_on_random_points() {
    let sg = grid(-1.0, 1.0, 5, 3);
    let mut r = rng(1);
    let worst = (0..10_000)
        .map(|_| {
            let x: f64 = r.gen_range(-1.0..=1.0);
            (sg.basis(x).iter().sum::<f64>() - 1.0).abs()
        })
        .fold(0.0, f64::max);
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

#[test]
fn matches_cox_de_boor_recursion() {
    let sg = grid(-1.0, 1.0, 5, 3);
    let knots = uniform_knots(-1.0, 1.0, 5, 3);
    assert_eq!(sg.knots().len(), knots.len());
    assert!(common::max_diff(sg.knots(), &knots) < 1e-15);
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let x: f64 = r.gen_range(-1.0..1.0);
        let fast = sg.basis(x);
        for (i, v) in fast.iter().enumerate() {
            worst = worst.max((v - cox_de_boor(&knots, i, 3, x)).abs());
        }
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
}

#[test]
fn right_end_is_the_left_limit() {
    let sg = grid(-1.0, 1.0, 5, 3);
    let knots = uniform_knots(-1.0, 1.0, 5, 3);
    let at_end = sg.basis(1.0);
    let near = 1.0 - 1e-12;
    for (i, v) in at_end.iter().enumerate() {
        assert!((v - cox_de_boor(&knots, i, 3, near)).abs() < 1e-9);
    }
}

#[test]
fn inputs_outside_the_range_are_clamped() {
    let sg = grid(-1.0, 1.0, 5, 3);
    assert_eq!(sg.basis(-7.5), sg.basis(-1.0));
    assert_eq!(sg.basis(3.0), sg.basis(1.0));
    assert!(sg.basis_deriv(-1.5).iter().all(|&d| d == 0.0));
    assert!(sg.basis_deriv(1.5).iter().all(|&d| d == 0.0));
}

#[test]
fn derivative_matches_central_difference_of_the_recursion() {
    let sg = grid(-1.0, 1.0, 5, 3);
    let knots = uniform_knots(-1.0, 1.0, 5, 3);
    let h = 1e-6;
    let mut r = rng(3);
    for _ in 0..500 {
        let x: f64 = r.gen_range(-0.99..0.99);
        // Stay clear of knots where the cubic's second derivative jumps.
        let u = (x + 1.0) / 0.4;
        if (u - u.round()).abs() < 1e-4 {
            continue;
        }
        let d = sg.basis_deriv(x);
        for (i, di) in d.iter().enumerate() {
            let fd = (cox_de_boor(&knots, i, 3, x + h) - cox_de_boor(&knots, i, 3, x - h)) / (2.0 * h);
            assert!((di - fd).abs() < 1e-6, "basis {i} at {x}: {di} vs {fd}");
        }
    }
}

#[test]
fn basis_count_and_support() {
    let sg = grid(-1.0, 1.0, 5, 3);
    assert_eq!(sg.num_basis(), 8);
    let b = sg.basis(0.1);
    assert_eq!(b.iter().filter(|&&v| v > 0.0).count(), 4);
    assert!(b.iter().all(|&v| v >= 0.0));
}

proptest! {
    #[test]
    fn unity_and_oracle_for_any_grid(
        min in -3.0f64..0.0,
        width in 0.5f64..4.0,
        g in 1usize..9,
        k in 0usize..6,
        t in 0.0f64..1.0,
    ) {
        let max = min + width;
        let sg = grid(min, max, g, k);
        let x = min + t * width * (1.0 - 1e-9);
        let b = sg.basis(x);
        prop_assert_eq!(b.len(), g + k);
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let knots = uniform_knots(min, max, g, k);
        for (i, v) in b.iter().enumerate() {
            prop_assert!((v - cox_de_boor(&knots, i, k, x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn derivatives_sum_to_zero(t in 0.0f64..1.0, k in 1usize..6) {
        let sg = grid(-1.0, 1.0, 5, k);
        let x = -1.0 + 2.0 * t;
        prop_assert!(sg.basis_deriv(x).iter().sum::<f64>().abs() < 1e-9);
    }
}
