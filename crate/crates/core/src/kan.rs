//! Spline-parameterized KAN layers.
//!
//! Each edge `(q, p)` carries `φ(x) = w_b·silu(x) + w_s·Σ_i c_i B_i(clamp(x))`
//! and output `q` sums the edges feeding it. The layer is evaluated as one
//! dense product: every input expands to the feature row
//! `[silu(x_p), B_0(x_p), …, B_{n-1}(x_p)]`, and the edge parameters fold into
//! a matching `(n_in·(n+1)) × n_out` weight matrix.

use std::sync::Arc;

use kanseg_autograd::ops::{fnv, silu, silu_grad};
use kanseg_autograd::{matmul_into, par, Forward, Graph, OpError, Operator, Real, Saved, Tensor, Var, Vjp};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::spline::{SplineGrid, MAX_ORDER};

const ROW_CHUNK: usize = 64;

/// Fused KAN layer primitive; inputs `[x (…×n_in), coeffs (n_out×n_in×nb), base_weight, spline_weight]`.
#[derive(Debug, Clone)]
pub struct KanLinear {
    pub grid: Arc<SplineGrid>,
}

struct Dims {
    rows: usize,
    n_in: usize,
    n_out: usize,
    nb: usize,
}

impl Dims {
    fn stride(&self) -> usize {
        self.nb + 1
    }

    fn kdim(&self) -> usize {
        self.n_in * self.stride()
    }
}

impl KanLinear {
    fn dims<T: Real>(&self, x: &[&Tensor<T>]) -> Result<Dims, OpError> {
        let xs = x[0].shape();
        let n_in = *xs.last().ok_or_else(|| OpError::new("kan layer input has rank 0"))?;
        let nb = self.grid.num_basis();
        let cs = x[1].shape();
        if cs.len() != 3 || cs[1] != n_in || cs[2] != nb {
            return Err(OpError::new(format!(
                "kan coefficients {cs:?} do not match input width {n_in} and {nb} basis functions"
            )));
        }
        let n_out = cs[0];
        for (what, t) in [("base", x[2]), ("spline", x[3])] {
            if t.shape() != [n_out, n_in] {
                return Err(OpError::new(format!(
                    "kan {what} weights have shape {:?}, expected [{n_out}, {n_in}]",
                    t.shape()
                )));
            }
        }
        Ok(Dims { rows: x[0].numel() / n_in, n_in, n_out, nb })
    }

    fn weight_matrix<T: Real>(d: &Dims, c: &[T], wb: &[T], ws: &[T]) -> Vec<T> {
        let mut w = vec![T::zero(); d.kdim() * d.n_out];
        for q in 0..d.n_out {
            for p in 0..d.n_in {
                let e = q * d.n_in + p;
                let base = p * d.stride();
                w[base * d.n_out + q] = wb[e];
                for i in 0..d.nb {
                    w[(base + 1 + i) * d.n_out + q] = ws[e] * c[e * d.nb + i];
                }
            }
        }
        w
    }
}

impl<T: Real> Operator<T> for KanLinear {
    fn name(&self) -> &'static str {
        "kan_layer"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let d = self.dims(x)?;
        let k = self.grid.order();
        let (kdim, stride) = (d.kdim(), d.stride());
        let xs = x[0].data();
        let mut feats = vec![T::zero(); d.rows * kdim];
        par::for_each_chunk_mut(&mut feats, kdim * ROW_CHUNK, |ci, chunk| {
            let mut vals = [T::zero(); MAX_ORDER + 1];
            for (r, row) in chunk.chunks_mut(kdim).enumerate() {
                let xr = &xs[(ci * ROW_CHUNK + r) * d.n_in..][..d.n_in];
                for (p, &v) in xr.iter().enumerate() {
                    let f = &mut row[p * stride..][..stride];
                    f[0] = silu(v);
                    let s = self.grid.eval_local(v, &mut vals);
                    f[1 + s..=1 + s + k].copy_from_slice(&vals[..=k]);
                }
            }
        });
        let w = Self::weight_matrix(&d, x[1].data(), x[2].data(), x[3].data());
        let mut out = vec![T::zero(); d.rows * d.n_out];
        matmul_into(d.rows, kdim, d.n_out, &feats, false, &w, false, &mut out, false);
        let kink = fnv(xs.iter().map(|v| {
            let v = v.as_f64();
            self.grid.interval(v) as u64 | (u64::from(self.grid.is_clamped(v)) << 32)
        }));
        let mut shape = x[0].shape().to_vec();
        *shape.last_mut().unwrap() = d.n_out;
        Ok(Forward {
            output: Tensor::from_vec(shape, out),
            saved: Saved { reals: vec![feats, w], indices: Vec::new(), kink },
        })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let d = self.dims(v.inputs)?;
        let k = self.grid.order();
        let (kdim, stride) = (d.kdim(), d.stride());
        let (feats, w) = (&v.saved.reals[0], &v.saved.reals[1]);
        let gx = v.needs[0].then(|| {
            let mut gf = vec![T::zero(); d.rows * kdim];
            matmul_into(d.rows, d.n_out, kdim, v.grad_out, false, w, true, &mut gf, false);
            let xs = v.inputs[0].data();
            let mut gx = vec![T::zero(); xs.len()];
            par::for_each_chunk_mut(&mut gx, d.n_in * ROW_CHUNK, |ci, chunk| {
                let mut vals = [T::zero(); MAX_ORDER + 1];
                let mut ders = [T::zero(); MAX_ORDER + 1];
                for (r, gr) in chunk.chunks_mut(d.n_in).enumerate() {
                    let row = ci * ROW_CHUNK + r;
                    for (p, g) in gr.iter_mut().enumerate() {
                        let x = xs[row * d.n_in + p];
                        let f = &gf[row * kdim + p * stride..][..stride];
                        let s = self.grid.eval_local_with_deriv(x, &mut vals, &mut ders);
                        let mut acc = f[0] * silu_grad(x);
                        for j in 0..=k {
                            acc += f[1 + s + j] * ders[j];
                        }
                        *g = acc;
                    }
                }
            });
            gx
        });
        let any_param = v.needs[1..].iter().any(|&n| n);
        let (mut gc, mut gwb, mut gws) = (None, None, None);
        if any_param {
            let mut gw = vec![T::zero(); kdim * d.n_out];
            matmul_into(kdim, d.rows, d.n_out, feats, true, v.grad_out, false, &mut gw, false);
            let (c, ws) = (v.inputs[1].data(), v.inputs[3].data());
            let mut dc = vec![T::zero(); c.len()];
            let mut dwb = vec![T::zero(); ws.len()];
            let mut dws = vec![T::zero(); ws.len()];
            for q in 0..d.n_out {
                for p in 0..d.n_in {
                    let e = q * d.n_in + p;
                    let base = p * stride;
                    dwb[e] = gw[base * d.n_out + q];
                    let mut acc = T::zero();
                    for i in 0..d.nb {
                        let gwi = gw[(base + 1 + i) * d.n_out + q];
                        dc[e * d.nb + i] = ws[e] * gwi;
                        acc += c[e * d.nb + i] * gwi;
                    }
                    dws[e] = acc;
                }
            }
            gc = v.needs[1].then_some(dc);
            gwb = v.needs[2].then_some(dwb);
            gws = v.needs[3].then_some(dws);
        }
        Ok(vec![gx, gc, gwb, gws])
    }
}

/// Records a KAN layer application on `g`.
pub fn kan_layer<T: Real>(
    g: &mut Graph<T>,
    grid: &Arc<SplineGrid>,
    x: Var,
    coeffs: Var,
    base_weight: Var,
    spline_weight: Var,
) -> kanseg_autograd::Result<Var> {
    g.apply(KanLinear { grid: Arc::clone(grid) }, &[x, coeffs, base_weight, spline_weight])
}

/// Parameters of one KAN layer, `Φ = {φ_{q,p}}`.
#[derive(Debug, Clone)]
pub struct KanLayerParams<T> {
    pub grid: Arc<SplineGrid>,
    /// `n_out × n_in × (G + k)`
    pub coeffs: Tensor<T>,
    /// `n_out × n_in`
    pub base_weight: Tensor<T>,
    /// `n_out × n_in`
    pub spline_weight: Tensor<T>,
}

/// Draws initial values: `c ~ N(0, 0.1/(G+k))`, `w_b ~ U(±1/sqrt(n_in))`, `w_s = 1`.
pub fn init_kan<R: Rng>(grid: &SplineGrid, n_in: usize, n_out: usize, rng: &mut R) -> [Tensor<f64>; 3] {
    let nb = grid.num_basis();
    let normal = Normal::new(0.0, 0.1 / nb as f64).expect("valid std");
    let bound = (1.0 / n_in as f64).sqrt();
    let uniform = Uniform::new_inclusive(-bound, bound);
    let coeffs = Tensor::from_fn(vec![n_out, n_in, nb], |_| normal.sample(rng));
    let base = Tensor::from_fn(vec![n_out, n_in], |_| uniform.sample(rng));
    let spline = Tensor::full(vec![n_out, n_in], 1.0);
    [coeffs, base, spline]
}

impl<T: Real> KanLayerParams<T> {
    pub fn new(grid: Arc<SplineGrid>, coeffs: Tensor<T>, base_weight: Tensor<T>, spline_weight: Tensor<T>) -> Result<Self> {
        let p = KanLayerParams { grid, coeffs, base_weight, spline_weight };
        let (n_out, n_in) = (p.n_out(), p.n_in());
        if p.coeffs.rank() != 3 || p.coeffs.shape()[2] != p.grid.num_basis() {
            return Err(Error::Shape(format!(
                "coefficients {:?} do not match {} basis functions",
                p.coeffs.shape(),
                p.grid.num_basis()
            )));
        }
        if p.base_weight.shape() != [n_out, n_in] || p.spline_weight.shape() != [n_out, n_in] {
            return Err(Error::Shape("edge weights must be n_out × n_in".into()));
        }
        if ![&p.coeffs, &p.base_weight, &p.spline_weight].iter().all(|t| t.all_finite()) {
            return Err(Error::NonFinite("kan layer parameters".into()));
        }
        Ok(p)
    }

    pub fn random<R: Rng>(grid: Arc<SplineGrid>, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let [c, b, s] = init_kan(&grid, n_in, n_out, rng);
        KanLayerParams { grid, coeffs: c.cast(), base_weight: b.cast(), spline_weight: s.cast() }
    }

    pub fn n_out(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn n_in(&self) -> usize {
        self.coeffs.shape()[1]
    }

    /// Registers the parameters as `{prefix}.coeffs` etc. and applies the layer to `x`.
    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        let n_in = *g.shape(x).last().unwrap_or(&0);
        if n_in != self.n_in() {
            return Err(Error::Shape(format!("kan layer expects width {}, got {n_in}", self.n_in())));
        }
        let c = g.input(&format!("{prefix}.coeffs"), self.coeffs.clone().with_requires_grad(true));
        let b = g.input(&format!("{prefix}.base_weight"), self.base_weight.clone().with_requires_grad(true));
        let s = g.input(&format!("{prefix}.spline_weight"), self.spline_weight.clone().with_requires_grad(true));
        Ok(kan_layer(g, &self.grid, x, c, b, s)?)
    }
}

/// Composition `Φ_{K-1} ∘ … ∘ Φ_0`, with `Φ_0` applied first.
#[derive(Debug, Clone)]
pub struct KanStack<T> {
    layers: Vec<KanLayerParams<T>>,
}

impl<T: Real> KanStack<T> {
    pub fn new(layers: Vec<KanLayerParams<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("kan stack needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} features but layer {} expects {}",
                    pair[0].n_out(),
                    i + 1,
                    pair[1].n_in()
                )));
            }
        }
        Ok(KanStack { layers })
    }

    pub fn layers(&self) -> &[KanLayerParams<T>] {
        &self.layers
    }

    pub fn forward(&self, g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
        self.layers
            .iter()
            .enumerate()
            .try_fold(x, |h, (i, layer)| layer.forward(g, &format!("{prefix}.{i}"), h))
    }
}
