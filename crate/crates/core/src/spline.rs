//! Uniform B-spline grids and banded basis evaluation.

use kanseg_autograd::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Highest spline order the banded evaluator supports.
pub const MAX_ORDER: usize = 7;

/// Construction parameters of a [`SplineGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub range_min: f64,
    pub range_max: f64,
    pub intervals: usize,
    pub order: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { range_min: -1.0, range_max: 1.0, intervals: 5, order: 3 }
    }
}

/// Uniform extended knot vector over `[range_min, range_max]`.
///
/// Knot `j` sits at `range_min + (j - k)·h` for `j = 0..=G + 2k`, so `k` knots
/// extend past each end of the range with the same spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineGrid {
    spec: GridSpec,
    h: f64,
    knots: Vec<f64>,
}

impl SplineGrid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        let GridSpec { range_min, range_max, intervals, order } = spec;
        if intervals == 0 {
            return Err(Error::Config("spline grid needs at least one interval".into()));
        }
        if order > MAX_ORDER {
            return Err(Error::Config(format!("spline order {order} exceeds the supported maximum {MAX_ORDER}")));
        }
        if !(range_min.is_finite() && range_max.is_finite() && range_max > range_min) {
            return Err(Error::Config(format!("spline range [{range_min}, {range_max}] is empty")));
        }
        let h = (range_max - range_min) / intervals as f64;
        let knots: Vec<f64> =
            (0..=intervals + 2 * order).map(|j| range_min + (j as f64 - order as f64) * h).collect();
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("spline knots are not strictly increasing".into()));
        }
        Ok(SplineGrid { spec, h, knots })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn order(&self) -> usize {
        self.spec.order
    }

    pub fn intervals(&self) -> usize {
        self.spec.intervals
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Number of basis functions, `G + k`.
    pub fn num_basis(&self) -> usize {
        self.spec.intervals + self.spec.order
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.spec.range_min, self.spec.range_max)
    }

    /// Whether `x` lies outside the range (and is therefore clamped).
    pub fn is_clamped(&self, x: f64) -> bool {
        x < self.spec.range_min || x > self.spec.range_max
    }

    /// Interval of the clamped `x`, in `0..G`. The right end belongs to the last interval.
    pub fn interval(&self, x: f64) -> usize {
        let u = (self.clamp(x) - self.spec.range_min) / self.h;
        (u.floor().max(0.0) as usize).min(self.spec.intervals - 1)
    }

    /// Evaluates the `k + 1` basis functions that are nonzero at `clamp(x)`.
    ///
    /// Writes `B_{s}, …, B_{s+k}` into `vals[..=k]` and returns `s`.
    pub fn eval_local<T: Real>(&self, x: T, vals: &mut [T]) -> usize {
        let (start, _) = self.local(x, vals, None);
        start
    }

    /// Like [`eval_local`](Self::eval_local), also writing `dB/dx` into `ders`.
    ///
    /// Derivatives are zero when `x` is outside the range, since the clamp is flat there.
    pub fn eval_local_with_deriv<T: Real>(&self, x: T, vals: &mut [T], ders: &mut [T]) -> usize {
        let (start, clamped) = self.local(x, vals, Some(&mut *ders));
        if clamped {
            ders[..=self.spec.order].iter_mut().for_each(|d| *d = T::zero());
        }
        start
    }

    /// Dense vector of all `G + k` basis values at `clamp(x)`.
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut vals = [0.0; MAX_ORDER + 1];
        let s = self.eval_local(x, &mut vals);
        let mut out = vec![0.0; self.num_basis()];
        out[s..=s + self.spec.order].copy_from_slice(&vals[..=self.spec.order]);
        out
    }

    /// Dense derivative vector, zero outside the range.
    pub fn basis_deriv(&self, x: f64) -> Vec<f64> {
        let mut vals = [0.0; MAX_ORDER + 1];
        let mut ders = [0.0; MAX_ORDER + 1];
        let s = self.eval_local_with_deriv(x, &mut vals, &mut ders);
        let mut out = vec![0.0; self.num_basis()];
        out[s..=s + self.spec.order].copy_from_slice(&ders[..=self.spec.order]);
        out
    }

    // Triangular de Boor scheme on the uniform grid. Returns the first nonzero
    // index and whether `x` was clamped.
    fn local<T: Real>(&self, x: T, vals: &mut [T], ders: Option<&mut [T]>) -> (usize, bool) {
        let k = self.spec.order;
        let xf = x.as_f64();
        let clamped = self.is_clamped(xf);
        let j = self.interval(xf);
        let x = T::lit(self.clamp(xf));
        let span = j + k;
        let t = |i: usize| T::lit(self.knots[i]);
        let mut left = [T::zero(); MAX_ORDER + 1];
        let mut right = [T::zero(); MAX_ORDER + 1];
        vals[0] = T::one();
        if k == 0 {
            if let Some(ders) = ders {
                ders[0] = T::zero();
            }
            return (j, clamped);
        }
        let mut ders = ders;
        for d in 1..=k {
            if d == k {
                if let Some(ders) = ders.as_deref_mut() {
                    // dN_{i,k}/dx = (N_{i,k-1} - N_{i+1,k-1}) / h on a uniform grid
                    let inv_h = T::lit(1.0 / self.h);
                    for r in 0..=k {
                        let a = if r > 0 { vals[r - 1] } else { T::zero() };
                        let b = if r < k { vals[r] } else { T::zero() };
                        ders[r] = (a - b) * inv_h;
                    }
                }
            }
            left[d] = x - t(span + 1 - d);
            right[d] = t(span + d) - x;
            let mut saved = T::zero();
            for r in 0..d {
                let tmp = vals[r] / (right[r + 1] + left[d - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[d - r] * tmp;
            }
            vals[d] = saved;
        }
        (j, clamped)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(g: usize, k: usize) -> SplineGrid {
        SplineGrid::new(GridSpec { range_min: -1.0, range_max: 1.0, intervals: g, order: k }).unwrap()
    }

    #[test]
    fn knot_layout() {
        let g = grid(5, 3);
        assert_eq!(g.knots().len(), 5 + 2 * 3 + 1);
        assert!((g.knots()[3] + 1.0).abs() < 1e-15);
        assert!((g.knots()[8] - 1.0).abs() < 1e-15);
        assert_eq!(g.num_basis(), 8);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(SplineGrid::new(GridSpec { intervals: 0, ..Default::default() }).is_err());
        assert!(SplineGrid::new(GridSpec { range_min: 1.0, range_max: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn order_zero_is_an_indicator() {
        let g = grid(4, 0);
        let b = g.basis(-0.3);
        assert_eq!(b, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn right_end_is_in_range() {
        let g = grid(5, 3);
        let s: f64 = g.basis(1.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(g.interval(1.0), 4);
    }
}
