//! Parameter storage, forward contexts and the basic layers.
//!
//! Layers are lightweight descriptors that know their parameter names. The
//! values live in a [`ParamStore`]; a [`Ctx`] registers them as named graph
//! leaves on first use, so one store serves training (f32) and gradient
//! checking (f64) alike.

use std::collections::BTreeMap;
use std::sync::Arc;

use kanseg_autograd::{Graph, Real, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::kan::{init_kan, kan_layer};
use crate::spline::SplineGrid;

pub type InitRng = ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameters plus batch-norm running statistics.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    batch_norms: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new(), batch_norms: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f64>) {
        self.params.insert(name.into(), value.cast());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = (&str, usize)> {
        self.batch_norms.iter().map(|(k, &c)| (k.as_str(), c))
    }

    fn register_batch_norm(&mut self, name: &str, channels: usize) {
        self.batch_norms.insert(name.to_string(), channels);
    }

    /// Total number of scalar parameters (running statistics excluded).
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |m: &BTreeMap<String, Tensor<T>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ParamStore { params: conv(&self.params), buffers: conv(&self.buffers), batch_norms: self.batch_norms.clone() }
    }

    /// Sets every batch norm's running statistics to mean 0, variance 1.
    pub fn set_identity_stats(&mut self) {
        let bns: Vec<_> = self.batch_norms.iter().map(|(k, &c)| (k.clone(), c)).collect();
        for (name, c) in bns {
            self.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
            self.buffers.insert(format!("{name}.running_var"), Tensor::full(vec![c], T::one()));
        }
    }

    /// Folds batch statistics from a training forward into the running estimates.
    ///
    /// Estimates start from mean 0 / variance 1; the variance update uses the
    /// unbiased batch variance.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let m = T::lit(BN_MOMENTUM);
        for u in updates {
            let c = u.mean.len();
            let mean_key = format!("{}.running_mean", u.name);
            let var_key = format!("{}.running_var", u.name);
            let mut rm = self.buffers.remove(&mean_key).unwrap_or_else(|| Tensor::zeros(vec![c]));
            let mut rv = self.buffers.remove(&var_key).unwrap_or_else(|| Tensor::full(vec![c], T::one()));
            let n = u.count as f64;
            let unbias = T::lit(if u.count > 1 { n / (n - 1.0) } else { 1.0 });
            for (r, &b) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in rv.data_mut().iter_mut().zip(&u.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
            self.buffers.insert(mean_key, rm);
            self.buffers.insert(var_key, rv);
        }
    }
}

/// Batch statistics observed by one batch-norm layer during a training forward.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub count: usize,
}

/// A forward pass under construction.
pub struct Ctx<'s, T: Real> {
    pub graph: Graph<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx { graph: Graph::new(), store, mode, updates: Vec::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Graph leaf for a stored parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.graph.var(name) {
            return Ok(v);
        }
        let t = self.store.param(name)?.clone().with_requires_grad(true);
        Ok(self.graph.input(name, t))
    }

    pub fn input(&mut self, name: &str, t: Tensor<T>) -> Var {
        self.graph.input(name, t)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.graph.shape(v)
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.updates
    }

    pub fn finish(self) -> (Graph<T>, Vec<BnUpdate<T>>) {
        (self.graph, self.updates)
    }
}

fn kaiming<R: rand::Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

fn fan_in_uniform<R: rand::Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| u.sample(rng))
}

/// Dense 2-D convolution, `weight: cout × cin × k × k`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        Conv2d { name: name.into(), cin, cout, k, stride, pad: k / 2, bias }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        let fan_in = self.cin * self.k * self.k;
        store.insert(format!("{}.weight", self.name), kaiming(vec![self.cout, self.cin, self.k, self.k], fan_in, rng));
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.cout]));
        }
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + if self.bias { self.cout } else { 0 }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(ctx.param(&format!("{}.bias", self.name))?) } else { None };
        Ok(ctx.graph.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// Depthwise convolution with same padding, `weight: c × k × k`.
#[derive(Debug, Clone)]
pub struct DwConv2d {
    pub name: String,
    pub channels: usize,
    pub k: usize,
    pub bias: bool,
}

impl DwConv2d {
    pub fn new(name: impl Into<String>, channels: usize, k: usize, bias: bool) -> Self {
        DwConv2d { name: name.into(), channels, k, bias }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        let w = kaiming(vec![self.channels, self.k, self.k], self.k * self.k, rng);
        store.insert(format!("{}.weight", self.name), w);
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.channels]));
        }
    }

    pub fn num_params(&self) -> usize {
        self.channels * self.k * self.k + if self.bias { self.channels } else { 0 }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(ctx.param(&format!("{}.bias", self.name))?) } else { None };
        Ok(ctx.graph.dwconv2d(x, w, b)?)
    }
}

/// Affine map over the last axis, `weight: cin × cout`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Linear { name: name.into(), cin, cout }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        store.insert(format!("{}.weight", self.name), fan_in_uniform(vec![self.cin, self.cout], self.cin, rng));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.cout]));
    }

    pub fn num_params(&self) -> usize {
        self.cin * self.cout + self.cout
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        Ok(ctx.graph.linear(x, w, Some(b))?)
    }
}

/// Batch normalization over axis 1 of `B × C × …` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm { name: name.into(), channels }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.weight", self.name), Tensor::full(vec![self.channels], 1.0));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.channels]));
        store.register_batch_norm(&self.name, self.channels);
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.weight", self.name))?;
        let beta = ctx.param(&format!("{}.bias", self.name))?;
        match ctx.mode {
            Mode::Train => {
                let y = ctx.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let shape = ctx.graph.shape(x);
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let saved = ctx.graph.saved(y);
                ctx.updates.push(BnUpdate {
                    name: self.name.clone(),
                    mean: saved.reals[0].clone(),
                    var: saved.reals[1].clone(),
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let stats = |suffix: &str| {
                    ctx.store.buffer(&format!("{}.{suffix}", self.name)).map(|t| Arc::new(t.data().to_vec()))
                };
                let (Some(mean), Some(var)) = (stats("running_mean"), stats("running_var")) else {
                    return Err(Error::Uninitialized(format!(
                        "batch norm {} has no running statistics; evaluation needs a trained model",
                        self.name
                    )));
                };
                Ok(ctx.graph.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)?)
            }
        }
    }
}

/// Layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm { name: name.into(), channels }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) {
        store.insert(format!("{}.weight", self.name), Tensor::full(vec![self.channels], 1.0));
        store.insert(format!("{}.bias", self.name), Tensor::zeros(vec![self.channels]));
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.weight", self.name))?;
        let beta = ctx.param(&format!("{}.bias", self.name))?;
        Ok(ctx.graph.layer_norm(x, gamma, beta, LN_EPS)?)
    }
}

/// KAN layer over the last axis, stored as `{name}.coeffs`, `.base_weight`, `.spline_weight`.
#[derive(Debug, Clone)]
pub struct KanLayer {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    pub grid: Arc<SplineGrid>,
}

impl KanLayer {
    pub fn new(name: impl Into<String>, n_in: usize, n_out: usize, grid: Arc<SplineGrid>) -> Self {
        KanLayer { name: name.into(), n_in, n_out, grid }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        let [c, b, s] = init_kan(&self.grid, self.n_in, self.n_out, rng);
        store.insert(format!("{}.coeffs", self.name), c);
        store.insert(format!("{}.base_weight", self.name), b);
        store.insert(format!("{}.spline_weight", self.name), s);
    }

    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out * (self.grid.num_basis() + 2)
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let width = ctx.shape(x).last().copied().unwrap_or(0);
        if width != self.n_in {
            return Err(Error::Shape(format!("{} expects {} input features, got {width}", self.name, self.n_in)));
        }
        let c = ctx.param(&format!("{}.coeffs", self.name))?;
        let b = ctx.param(&format!("{}.base_weight", self.name))?;
        let s = ctx.param(&format!("{}.spline_weight", self.name))?;
        Ok(kan_layer(&mut ctx.graph, &self.grid, x, c, b, s)?)
    }
}

/// Converts `B × L × C` tokens (row-major `L = h·w`) to a `B × C × h × w` map.
pub fn tokens_to_map<T: Real>(ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
    let (b, l, c) = dims3(ctx.shape(z))?;
    if l != h * w {
        return Err(Error::Shape(format!("{l} tokens do not factor as {h}×{w}")));
    }
    let t = ctx.graph.permute(z, &[0, 2, 1])?;
    Ok(ctx.graph.reshape(t, &[b, c, h, w])?)
}

/// Inverse of [`tokens_to_map`].
pub fn map_to_tokens<T: Real>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = dims4(ctx.shape(x))?;
    let t = ctx.graph.reshape(x, &[b, c, h * w])?;
    Ok(ctx.graph.permute(t, &[0, 2, 1])?)
}

pub fn dims3(s: &[usize]) -> Result<(usize, usize, usize)> {
    match *s {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Shape(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

pub fn dims4(s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::Shape(format!("expected a rank-4 tensor, got {s:?}"))),
    }
}

/// KAN block: tokenwise KAN layer, depthwise 3×3 on the restored map, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct KanBlock {
    pub kan: KanLayer,
    pub dw: DwConv2d,
    pub bn: BatchNorm,
}

impl KanBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize, grid: Arc<SplineGrid>) -> Self {
        KanBlock {
            kan: KanLayer::new(format!("{name}.kan"), c_in, c_out, grid),
            dw: DwConv2d::new(format!("{name}.dw"), c_out, 3, false),
            bn: BatchNorm::new(format!("{name}.bn"), c_out),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut InitRng) {
        self.kan.init(store, rng);
        self.dw.init(store, rng);
        self.bn.init(store);
    }

    pub fn num_params(&self) -> usize {
        self.kan.num_params() + self.dw.num_params() + self.bn.num_params()
    }

    /// `z: B × L × C_in` with `L = h·w`, returns `B × L × C_out`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, z: Var, h: usize, w: usize) -> Result<Var> {
        let (_, l, _) = dims3(ctx.shape(z))?;
        if l != h * w {
            return Err(Error::Shape(format!("{l} tokens do not factor as {h}×{w}")));
        }
        let y = self.kan.forward(ctx, z)?;
        let m = tokens_to_map(ctx, y, h, w)?;
        let m = self.dw.forward(ctx, m)?;
        let m = self.bn.forward(ctx, m)?;
        let m = ctx.graph.relu(m)?;
        map_to_tokens(ctx, m)
    }
}
