use std::sync::Arc;

use crate::error::OpError;
use crate::graph::{Forward, Operator, Saved, Vjp};
use crate::scalar::Real;
use crate::tensor::Tensor;

use super::{fnv, same_shape};

#[derive(Debug)]
pub struct Add;

impl<T: Real> Operator<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        same_shape("add", x[0], x[1])?;
        let out = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| a + b).collect();
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        Ok(vec![Some(v.grad_out.to_vec()), Some(v.grad_out.to_vec())])
    }
}

#[derive(Debug)]
pub struct Mul;

impl<T: Real> Operator<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        same_shape("mul", x[0], x[1])?;
        let out = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| a * b).collect();
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (a, b) = (v.inputs[0].data(), v.inputs[1].data());
        let ga = v.needs[0].then(|| v.grad_out.iter().zip(b).map(|(&g, &y)| g * y).collect());
        let gb = v.needs[1].then(|| v.grad_out.iter().zip(a).map(|(&g, &x)| g * x).collect());
        Ok(vec![ga, gb])
    }
}

/// Multiplication by a fixed constant.
#[derive(Debug)]
pub struct Scale(pub f64);

impl<T: Real> Operator<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let c = T::lit(self.0);
        Ok(Forward::plain(x[0].map(|a| a * c)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let c = T::lit(self.0);
        Ok(vec![Some(v.grad_out.iter().map(|&g| g * c).collect())])
    }
}

/// `x + c` for a constant tensor `c` of the same shape (attention masks).
#[derive(Debug)]
pub struct AddConst<T>(pub Arc<Tensor<T>>);

impl<T: Real> Operator<T> for AddConst<T> {
    fn name(&self) -> &'static str {
        "add_const"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        same_shape("add_const", x[0], &self.0)?;
        let out = x[0].data().iter().zip(self.0.data()).map(|(&a, &b)| a + b).collect();
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        Ok(vec![Some(v.grad_out.to_vec())])
    }
}

/// Rectifier; the subgradient at zero is zero.
#[derive(Debug)]
pub struct Relu;

impl<T: Real> Operator<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let out = x[0].map(|a| if a > T::zero() { a } else { T::zero() });
        let kink = fnv(x[0].data().iter().map(|&a| (a > T::zero()) as u64));
        Ok(Forward { output: out, saved: Saved { kink, ..Saved::none() } })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let g = v
            .grad_out
            .iter()
            .zip(v.inputs[0].data())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Ok(vec![Some(g)])
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `x * sigmoid(x)`.
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[derive(Debug)]
pub struct Silu;

impl<T: Real> Operator<T> for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        Ok(Forward::plain(x[0].map(silu)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let g = v.grad_out.iter().zip(v.inputs[0].data()).map(|(&g, &x)| g * silu_grad(x)).collect();
        Ok(vec![Some(g)])
    }
}

/// Softmax over the last axis.
#[derive(Debug)]
pub struct Softmax;

impl<T: Real> Operator<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let n = *x[0].shape().last().unwrap();
        let mut out = x[0].data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for r in row.iter_mut() {
                *r = (*r - m).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let n = *v.output.shape().last().unwrap();
        let mut g = vec![T::zero(); v.grad_out.len()];
        for ((y, dy), dx) in v.output.data().chunks(n).zip(v.grad_out.chunks(n)).zip(g.chunks_mut(n)) {
            let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
            for i in 0..n {
                dx[i] = y[i] * (dy[i] - dot);
            }
        }
        Ok(vec![Some(g)])
    }
}

#[derive(Debug)]
pub struct Sum;

impl<T: Real> Operator<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        Ok(Forward::plain(Tensor::scalar(x[0].sum())))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        Ok(vec![Some(vec![v.grad_out[0]; v.inputs[0].numel()])])
    }
}

#[derive(Debug)]
pub struct Mean;

impl<T: Real> Operator<T> for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let n = T::lit(x[0].numel() as f64);
        Ok(Forward::plain(Tensor::scalar(x[0].sum() / n)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let n = v.inputs[0].numel();
        Ok(vec![Some(vec![v.grad_out[0] / T::lit(n as f64); n])])
    }
}

#[derive(Debug)]
pub struct Reshape(pub Vec<usize>);

impl<T: Real> Operator<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let out = x[0]
            .reshape(self.0.clone())
            .map_err(|_| OpError::new(format!("cannot reshape {:?} to {:?}", x[0].shape(), self.0)))?;
        Ok(Forward::plain(out.with_requires_grad(false)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        Ok(vec![Some(v.grad_out.to_vec())])
    }
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
#[derive(Debug)]
pub struct Permute(pub Vec<usize>);

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the input flat index it reads.
fn permute_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

impl Permute {
    fn validate(&self, rank: usize) -> Result<(), OpError> {
        let mut seen = vec![false; rank];
        if self.0.len() != rank || !self.0.iter().all(|&p| p < rank && !std::mem::replace(&mut seen[p], true)) {
            return Err(OpError::new(format!("{:?} is not a permutation of {rank} axes", self.0)));
        }
        Ok(())
    }
}

impl<T: Real> Operator<T> for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        self.validate(x[0].rank())?;
        let src = x[0].data();
        let out = permute_map(x[0].shape(), &self.0).into_iter().map(|i| src[i]).collect();
        let shape: Vec<usize> = self.0.iter().map(|&p| x[0].shape()[p]).collect();
        Ok(Forward::plain(Tensor::from_vec(shape, out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let mut g = vec![T::zero(); v.grad_out.len()];
        for (o, i) in permute_map(v.inputs[0].shape(), &self.0).into_iter().enumerate() {
            g[i] = v.grad_out[o];
        }
        Ok(vec![Some(g)])
    }
}

/// Normalized two-way blend `(w0·x + w1·s) / (w0 + w1 + eps)`.
///
/// The weights are used as given; callers keep them nonnegative.
#[derive(Debug)]
pub struct WeightedFuse(pub f64);

impl<T: Real> Operator<T> for WeightedFuse {
    fn name(&self) -> &'static str {
        "weighted_fuse"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        same_shape("weighted_fuse", x[0], x[1])?;
        if x[2].numel() != 2 {
            return Err(OpError::new(format!("fusion weights must have 2 elements, got {:?}", x[2].shape())));
        }
        let (w0, w1) = (x[2].data()[0], x[2].data()[1]);
        let z = w0 + w1 + T::lit(self.0);
        let out = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| (w0 * a + w1 * b) / z).collect();
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (a, b, w) = (v.inputs[0].data(), v.inputs[1].data(), v.inputs[2].data());
        let (w0, w1) = (w[0], w[1]);
        let z = w0 + w1 + T::lit(self.0);
        let ga = v.needs[0].then(|| v.grad_out.iter().map(|&g| g * w0 / z).collect());
        let gb = v.needs[1].then(|| v.grad_out.iter().map(|&g| g * w1 / z).collect());
        let gw = v.needs[2].then(|| {
            // d/dw0 = (a - out) / z, d/dw1 = (b - out) / z
            let out = v.output.data();
            let mut d0 = T::zero();
            let mut d1 = T::zero();
            for i in 0..out.len() {
                d0 += v.grad_out[i] * (a[i] - out[i]);
                d1 += v.grad_out[i] * (b[i] - out[i]);
            }
            vec![d0 / z, d1 / z]
        });
        Ok(vec![ga, gb, gw])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_map_transposes() {
        // 2x3 -> 3x2
        assert_eq!(permute_map(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
        assert_eq!(permute_map(&[2, 3], &[0, 1]), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(silu(0.0f64), 0.0);
    }
}
