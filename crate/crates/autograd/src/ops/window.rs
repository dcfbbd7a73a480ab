use crate::error::OpError;
use crate::graph::{Forward, Operator, Vjp};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Geometry of a non-overlapping window tiling over an `h×w` map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeom {
    pub h: usize,
    pub w: usize,
    pub wh: usize,
    pub ww: usize,
}

impl WindowGeom {
    pub fn padded(&self) -> (usize, usize) {
        (self.h.div_ceil(self.wh) * self.wh, self.w.div_ceil(self.ww) * self.ww)
    }

    pub fn windows(&self) -> (usize, usize) {
        let (hp, wp) = self.padded();
        (hp / self.wh, wp / self.ww)
    }

    pub fn tokens(&self) -> usize {
        self.wh * self.ww
    }

    /// For every (window, token) slot in batch-major order, the source pixel
    /// `(y, x)` or `None` when the slot is padding.
    pub fn slots(&self) -> impl Iterator<Item = Option<(usize, usize)>> + '_ {
        let (nh, nw) = self.windows();
        (0..nh * nw).flat_map(move |win| {
            let (wy, wx) = (win / nw, win % nw);
            (0..self.tokens()).map(move |t| {
                let y = wy * self.wh + t / self.ww;
                let x = wx * self.ww + t % self.ww;
                (y < self.h && x < self.w).then_some((y, x))
            })
        })
    }
}

fn check_bhwc(op: &str, s: &[usize], g: &WindowGeom) -> Result<(usize, usize), OpError> {
    match *s {
        [b, h, w, c] if h == g.h && w == g.w => Ok((b, c)),
        _ => Err(OpError::new(format!("{op} expects B×{}×{}×C, got {s:?}", g.h, g.w))),
    }
}

/// Gathers B×H×W×C into `(B·windows)×(wh·ww)×C`, zero-padding the bottom/right edges.
#[derive(Debug, Clone, Copy)]
pub struct WindowPartition(pub WindowGeom);

impl<T: Real> Operator<T> for WindowPartition {
    fn name(&self) -> &'static str {
        "window_partition"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let g = self.0;
        let (b, c) = check_bhwc("window_partition", x[0].shape(), &g)?;
        let (nh, nw) = g.windows();
        let xd = x[0].data();
        let mut out = Vec::with_capacity(b * nh * nw * g.tokens() * c);
        for bi in 0..b {
            for slot in g.slots() {
                match slot {
                    Some((y, xx)) => out.extend_from_slice(&xd[((bi * g.h + y) * g.w + xx) * c..][..c]),
                    None => out.extend(std::iter::repeat_n(T::zero(), c)),
                }
            }
        }
        Ok(Forward::plain(Tensor::from_vec(vec![b * nh * nw, g.tokens(), c], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let g = self.0;
        let (b, c) = check_bhwc("window_partition", v.inputs[0].shape(), &g)?;
        let mut gx = vec![T::zero(); v.inputs[0].numel()];
        let per_batch = g.windows().0 * g.windows().1 * g.tokens();
        for bi in 0..b {
            for (s, slot) in g.slots().enumerate() {
                if let Some((y, xx)) = slot {
                    let src = &v.grad_out[(bi * per_batch + s) * c..][..c];
                    gx[((bi * g.h + y) * g.w + xx) * c..][..c].copy_from_slice(src);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}

/// Inverse of [`WindowPartition`]: scatters windows back and crops the padding.
#[derive(Debug, Clone, Copy)]
pub struct WindowMerge(pub WindowGeom);

impl<T: Real> Operator<T> for WindowMerge {
    fn name(&self) -> &'static str {
        "window_merge"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let g = self.0;
        let (nh, nw) = g.windows();
        let s = x[0].shape();
        if s.len() != 3 || s[1] != g.tokens() || !s[0].is_multiple_of(nh * nw) {
            return Err(OpError::new(format!("window_merge got {s:?} for {nh}×{nw} windows of {}", g.tokens())));
        }
        let (b, c) = (s[0] / (nh * nw), s[2]);
        let per_batch = nh * nw * g.tokens();
        let xd = x[0].data();
        let mut out = vec![T::zero(); b * g.h * g.w * c];
        for bi in 0..b {
            for (slot_idx, slot) in g.slots().enumerate() {
                if let Some((y, xx)) = slot {
                    out[((bi * g.h + y) * g.w + xx) * c..][..c]
                        .copy_from_slice(&xd[(bi * per_batch + slot_idx) * c..][..c]);
                }
            }
        }
        Ok(Forward::plain(Tensor::from_vec(vec![b, g.h, g.w, c], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let g = self.0;
        let s = v.inputs[0].shape();
        let (nh, nw) = g.windows();
        let (b, c) = (s[0] / (nh * nw), s[2]);
        let per_batch = nh * nw * g.tokens();
        let mut gx = vec![T::zero(); v.inputs[0].numel()];
        for bi in 0..b {
            for (slot_idx, slot) in g.slots().enumerate() {
                if let Some((y, xx)) = slot {
                    gx[(bi * per_batch + slot_idx) * c..][..c]
                        .copy_from_slice(&v.grad_out[((bi * g.h + y) * g.w + xx) * c..][..c]);
                }
            }
        }
        Ok(vec![Some(gx)])
    }
}
