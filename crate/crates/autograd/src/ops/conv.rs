use crate::error::OpError;
use crate::graph::{Forward, Operator, Saved, Vjp};
use crate::par;
use crate::scalar::{matmul_into, Real};
use crate::tensor::Tensor;

use super::fnv;

fn dims4(op: &str, s: &[usize]) -> Result<(usize, usize, usize, usize), OpError> {
    match *s {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(OpError::new(format!("{op} expects B×C×H×W, got {s:?}"))),
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut col[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..][..self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.iter_mut().for_each(|d| *d = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], x: &mut [T]) {
        let p = self.cols();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &col[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution (cross-correlation) with zero padding.
///
/// Inputs `[x (B×Ci×H×W), w (Co×Ci×kh×kw)]` plus an optional bias `(Co)`.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn geom<T: Real>(&self, x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, ConvGeom), OpError> {
        let (b, ci, h, wd) = dims4("conv2d", x.shape())?;
        let (co, wci, kh, kw) = dims4("conv2d weight", w.shape())?;
        if wci != ci {
            return Err(OpError::new(format!("conv2d weight expects {wci} input channels, got {ci}")));
        }
        if self.stride == 0 || h + 2 * self.pad < kh || wd + 2 * self.pad < kw {
            return Err(OpError::new(format!("conv2d kernel {kh}×{kw} does not fit input {h}×{wd}")));
        }
        let ho = (h + 2 * self.pad - kh) / self.stride + 1;
        let wo = (wd + 2 * self.pad - kw) / self.stride + 1;
        Ok((b, co, ConvGeom { ci, h, w: wd, kh, kw, stride: self.stride, pad: self.pad, ho, wo }))
    }
}

impl<T: Real> Operator<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, co, g) = self.geom(x[0], x[1])?;
        if let Some(bias) = x.get(2) {
            if bias.shape() != [co] {
                return Err(OpError::new(format!("conv2d bias {:?} should be [{co}]", bias.shape())));
            }
        }
        let (xd, wd) = (x[0].data(), x[1].data());
        let (k, p) = (g.rows(), g.cols());
        let in_len = g.ci * g.h * g.w;
        let mut out = vec![T::zero(); b * co * p];
        par::for_each_chunk_mut(&mut out, co * p, |bi, o| {
            let xb = &xd[bi * in_len..][..in_len];
            if let Some(bias) = x.get(2) {
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias.data()[c]);
                }
            }
            let accumulate = x.len() > 2;
            if g.is_pointwise() {
                matmul_into(co, k, p, wd, false, xb, false, o, accumulate);
            } else {
                let mut col = vec![T::zero(); k * p];
                g.im2col(xb, &mut col);
                matmul_into(co, k, p, wd, false, &col, false, o, accumulate);
            }
        });
        Ok(Forward::plain(Tensor::from_vec(vec![b, co, g.ho, g.wo], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (b, co, g) = self.geom(v.inputs[0], v.inputs[1])?;
        let (xd, wd) = (v.inputs[0].data(), v.inputs[1].data());
        let (k, p) = (g.rows(), g.cols());
        let in_len = g.ci * g.h * g.w;
        let (need_x, need_w) = (v.needs[0], v.needs[1]);
        let parts = par::map_indices(b, |bi| {
            let xb = &xd[bi * in_len..][..in_len];
            let gb = &v.grad_out[bi * co * p..][..co * p];
            let col = (need_w && !g.is_pointwise()).then(|| {
                let mut col = vec![T::zero(); k * p];
                g.im2col(xb, &mut col);
                col
            });
            let gw = need_w.then(|| {
                let mut gw = vec![T::zero(); co * k];
                let cols = col.as_deref().unwrap_or(xb);
                matmul_into(co, p, k, gb, false, cols, true, &mut gw, false);
                gw
            });
            let gx = need_x.then(|| {
                let mut dcol = vec![T::zero(); k * p];
                matmul_into(k, co, p, wd, true, gb, false, &mut dcol, false);
                if g.is_pointwise() {
                    dcol
                } else {
                    let mut gx = vec![T::zero(); in_len];
                    g.col2im(&dcol, &mut gx);
                    gx
                }
            });
            (gx, gw)
        });
        let mut gx = need_x.then(|| Vec::with_capacity(xd.len()));
        let mut gw = need_w.then(|| vec![T::zero(); wd.len()]);
        for (px, pw) in parts {
            if let (Some(acc), Some(px)) = (gx.as_mut(), px) {
                acc.extend_from_slice(&px);
            }
            if let (Some(acc), Some(pw)) = (gw.as_mut(), pw) {
                acc.iter_mut().zip(&pw).for_each(|(a, &b)| *a += b);
            }
        }
        let mut grads = vec![gx, gw];
        if v.inputs.len() > 2 {
            grads.push(v.needs[2].then(|| {
                let mut gbias = vec![T::zero(); co];
                for (i, chunk) in v.grad_out.chunks(p).enumerate() {
                    gbias[i % co] += chunk.iter().copied().sum::<T>();
                }
                gbias
            }));
        }
        Ok(grads)
    }
}

/// Depthwise 2-D convolution with `same` zero padding and odd square kernels.
///
/// Inputs `[x (B×C×H×W), w (C×k×k)]` plus an optional bias `(C)`. Output
/// channel `c` reads only input channel `c`.
#[derive(Debug, Clone, Copy)]
pub struct DwConv2d;

impl DwConv2d {
    pub fn check_kernel(k: usize) -> Result<(), OpError> {
        if k.is_multiple_of(2) {
            return Err(OpError::new(format!("depthwise kernel size must be odd, got {k}")));
        }
        Ok(())
    }

    fn geom<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize), OpError> {
        let (b, c, h, wd) = dims4("dwconv2d", x.shape())?;
        let ws = w.shape();
        if ws.len() != 3 || ws[1] != ws[2] {
            return Err(OpError::new(format!("dwconv2d kernel must be C×k×k, got {ws:?}")));
        }
        Self::check_kernel(ws[1])?;
        if ws[0] != c {
            return Err(OpError::new(format!("dwconv2d kernel has {} channels, input has {c}", ws[0])));
        }
        Ok((b, c, h, wd, ws[1]))
    }
}

impl<T: Real> Operator<T> for DwConv2d {
    fn name(&self) -> &'static str {
        "dwconv2d"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (_, c, h, w, k) = Self::geom(x[0], x[1])?;
        let pad = (k / 2) as isize;
        let (xd, kd) = (x[0].data(), x[1].data());
        let bias = x.get(2).map(|b| b.data());
        if let Some(b) = bias {
            if b.len() != c {
                return Err(OpError::new(format!("dwconv2d bias has {} channels, expected {c}", b.len())));
            }
        }
        let mut out = vec![T::zero(); xd.len()];
        par::for_each_chunk_mut(&mut out, h * w, |plane, o| {
            let ch = plane % c;
            let src = &xd[plane * h * w..][..h * w];
            let ker = &kd[ch * k * k..][..k * k];
            let b0 = bias.map_or(T::zero(), |b| b[ch]);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b0;
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                acc += ker[ky * k + kx] * src[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    o[y * w + xx] = acc;
                }
            }
        });
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (b, c, h, w, k) = Self::geom(v.inputs[0], v.inputs[1])?;
        let pad = (k / 2) as isize;
        let (xd, kd) = (v.inputs[0].data(), v.inputs[1].data());
        let parts = par::map_indices(b * c, |plane| {
            let ch = plane % c;
            let src = &xd[plane * h * w..][..h * w];
            let go = &v.grad_out[plane * h * w..][..h * w];
            let ker = &kd[ch * k * k..][..k * k];
            let mut gx = vec![T::zero(); h * w];
            let mut gk = vec![T::zero(); k * k];
            for y in 0..h {
                for xx in 0..w {
                    let g = go[y * w + xx];
                    if g == T::zero() {
                        continue;
                    }
                    for ky in 0..k {
                        let iy = y as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                let idx = iy as usize * w + ix as usize;
                                gx[idx] += g * ker[ky * k + kx];
                                gk[ky * k + kx] += g * src[idx];
                            }
                        }
                    }
                }
            }
            (gx, gk)
        });
        let mut gx = Vec::with_capacity(xd.len());
        let mut gk = vec![T::zero(); kd.len()];
        for (plane, (px, pk)) in parts.into_iter().enumerate() {
            gx.extend_from_slice(&px);
            let ch = plane % c;
            gk[ch * k * k..][..k * k].iter_mut().zip(&pk).for_each(|(a, &b)| *a += b);
        }
        let mut grads = vec![v.needs[0].then_some(gx), v.needs[1].then_some(gk)];
        if v.inputs.len() > 2 {
            grads.push(v.needs[2].then(|| {
                let mut gb = vec![T::zero(); c];
                for (plane, chunk) in v.grad_out.chunks(h * w).enumerate() {
                    gb[plane % c] += chunk.iter().copied().sum::<T>();
                }
                gb
            }));
        }
        Ok(grads)
    }
}

/// Max pooling without padding; ties resolve to the first element in scan order.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Real> Operator<T> for MaxPool2d {
    fn name(&self) -> &'static str {
        "max_pool2d"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, c, h, w) = dims4("max_pool2d", x[0].shape())?;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return Err(OpError::new(format!("pool window {} exceeds input {h}×{w}", self.kernel)));
        }
        let ho = (h - self.kernel) / self.stride + 1;
        let wo = (w - self.kernel) / self.stride + 1;
        let xd = x[0].data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * self.stride * w + ox * self.stride;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let idx = base + (oy * self.stride + ky) * w + ox * self.stride + kx;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let kink = fnv(arg.iter().map(|&a| a as u64));
        Ok(Forward {
            output: Tensor::from_vec(vec![b, c, ho, wo], out),
            saved: Saved { reals: Vec::new(), indices: arg, kink },
        })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let mut g = vec![T::zero(); v.inputs[0].numel()];
        for (&i, &d) in v.saved.indices.iter().zip(v.grad_out) {
            g[i] += d;
        }
        Ok(vec![Some(g)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Bilinear with `align_corners = false` (half-pixel centers).
    Bilinear,
}

/// Integer-factor spatial upsampling of B×C×H×W maps.
#[derive(Debug, Clone, Copy)]
pub struct Upsample {
    pub factor: usize,
    pub mode: UpsampleMode,
}

/// Per output coordinate: (low index, high index, weight of high).
fn axis_taps(n_in: usize, factor: usize, mode: UpsampleMode) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| match mode {
            UpsampleMode::Nearest => (o / factor, o / factor, 0.0),
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, frac)
            }
        })
        .collect()
}

impl<T: Real> Operator<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, c, h, w) = dims4("upsample", x[0].shape())?;
        if self.factor == 0 {
            return Err(OpError::new("upsample factor must be positive"));
        }
        let (ho, wo) = (h * self.factor, w * self.factor);
        let ty = axis_taps(h, self.factor, self.mode);
        let tx = axis_taps(w, self.factor, self.mode);
        let xd = x[0].data();
        let mut out = vec![T::zero(); b * c * ho * wo];
        par::for_each_chunk_mut(&mut out, ho * wo, |plane, o| {
            let src = &xd[plane * h * w..][..h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    o[oy * wo + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        });
        Ok(Forward::plain(Tensor::from_vec(vec![b, c, ho, wo], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (_, _, h, w) = dims4("upsample", v.inputs[0].shape())?;
        let (ho, wo) = (h * self.factor, w * self.factor);
        let ty = axis_taps(h, self.factor, self.mode);
        let tx = axis_taps(w, self.factor, self.mode);
        let mut g = vec![T::zero(); v.inputs[0].numel()];
        par::for_each_chunk_mut(&mut g, h * w, |plane, dst| {
            let go = &v.grad_out[plane * ho * wo..][..ho * wo];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let d = go[oy * wo + ox];
                    dst[y0 * w + x0] += d * (T::one() - ly) * (T::one() - lx);
                    dst[y0 * w + x1] += d * (T::one() - ly) * lx;
                    dst[y1 * w + x0] += d * ly * (T::one() - lx);
                    dst[y1 * w + x1] += d * ly * lx;
                }
            }
        });
        Ok(vec![Some(g)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_taps_match_half_pixel_convention() {
        let t = axis_taps(4, 2, UpsampleMode::Bilinear);
        // output 0 -> src -0.25 clamped to 0; output 1 -> src 0.25
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[1], (0, 1, 0.25));
        assert_eq!(t[2], (0, 1, 0.75));
        assert_eq!(t[7], (3, 3, 0.0));
    }
}
