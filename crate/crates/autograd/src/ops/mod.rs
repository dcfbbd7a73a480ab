//! Primitive operators and the [`Graph`] methods that record them.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod window;

use std::sync::Arc;

pub use conv::{Conv2d, DwConv2d, MaxPool2d, Upsample, UpsampleMode};
pub use elementwise::{
    sigmoid, silu, silu_grad, Add, AddConst, Mean, Mul, Permute, Relu, Reshape, Scale, Silu, Softmax, Sum,
    WeightedFuse,
};
pub use linalg::{BatchMatMul, Linear, MatMul};
pub use loss::CrossEntropy;
pub use norm::{BatchNormEval, BatchNormTrain, LayerNorm};
pub use window::{WindowGeom, WindowMerge, WindowPartition};

use crate::error::{OpError, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub(crate) fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<(), OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::new(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// FNV-1a over a stream of words, used for kink signatures.
pub fn fnv(words: impl Iterator<Item = u64>) -> u64 {
    words.fold(0xcbf2_9ce4_8422_2325u64, |h, w| (h ^ w).wrapping_mul(0x100_0000_01b3))
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Scale(c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        self.apply(AddConst(Arc::new(c)), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Relu, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Silu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Softmax, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Mean, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.apply(Permute(perm.to_vec()), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(MatMul, &[a, b])
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.apply(BatchMatMul { trans_b }, &[a, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(Linear, &[x, w, b]),
            None => self.apply(Linear, &[x, w]),
        }
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(BatchNormTrain { eps }, &[x, gamma, beta])
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Arc<Vec<T>>,
        var: Arc<Vec<T>>,
        eps: f64,
    ) -> Result<Var> {
        self.apply(BatchNormEval { mean, var, eps }, &[x, gamma, beta])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let op = Conv2d { stride, pad };
        match b {
            Some(b) => self.apply(op, &[x, w, b]),
            None => self.apply(op, &[x, w]),
        }
    }

    pub fn dwconv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        match b {
            Some(b) => self.apply(DwConv2d, &[x, w, b]),
            None => self.apply(DwConv2d, &[x, w]),
        }
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.apply(MaxPool2d { kernel, stride }, &[x])
    }

    pub fn upsample(&mut self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        self.apply(Upsample { factor, mode }, &[x])
    }

    pub fn window_partition(&mut self, x: Var, geom: WindowGeom) -> Result<Var> {
        self.apply(WindowPartition(geom), &[x])
    }

    pub fn window_merge(&mut self, x: Var, geom: WindowGeom) -> Result<Var> {
        self.apply(WindowMerge(geom), &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<u8>>, ignore_index: u8) -> Result<Var> {
        self.apply(CrossEntropy { targets, ignore_index }, &[logits])
    }

    pub fn weighted_fuse(&mut self, x: Var, skip: Var, weights: Var, eps: f64) -> Result<Var> {
        self.apply(WeightedFuse(eps), &[x, skip, weights])
    }
}
