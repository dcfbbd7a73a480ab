use crate::error::OpError;
use crate::graph::{Forward, Operator, Vjp};
use crate::par;
use crate::scalar::{matmul_into, Real};
use crate::tensor::Tensor;

/// 2-D matrix product `a (m×k) · b (k×n)`.
#[derive(Debug)]
pub struct MatMul;

impl<T: Real> Operator<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (a, b) = (x[0].shape(), x[1].shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(OpError::new(format!("matmul needs m×k · k×n, got {a:?} · {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, x[0].data(), false, x[1].data(), false, &mut out, false);
        Ok(Forward::plain(Tensor::from_vec(vec![m, n], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (m, k, n) = (v.inputs[0].shape()[0], v.inputs[0].shape()[1], v.inputs[1].shape()[1]);
        let ga = v.needs[0].then(|| {
            let mut g = vec![T::zero(); m * k];
            matmul_into(m, n, k, v.grad_out, false, v.inputs[1].data(), true, &mut g, false);
            g
        });
        let gb = v.needs[1].then(|| {
            let mut g = vec![T::zero(); k * n];
            matmul_into(k, m, n, v.inputs[0].data(), true, v.grad_out, false, &mut g, false);
            g
        });
        Ok(vec![ga, gb])
    }
}

/// Batched product `a (B×m×k) · b (B×k×n)`, or `a · bᵀ` with `b` B×n×k.
#[derive(Debug)]
pub struct BatchMatMul {
    pub trans_b: bool,
}

impl BatchMatMul {
    fn dims(&self, a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize), OpError> {
        let ok = a.len() == 3 && b.len() == 3 && a[0] == b[0];
        let (bk, bn) = if self.trans_b { (b.get(2), b.get(1)) } else { (b.get(1), b.get(2)) };
        if !ok || Some(&a[2]) != bk {
            return Err(OpError::new(format!("bmm(trans_b={}) shape mismatch {a:?} · {b:?}", self.trans_b)));
        }
        Ok((a[0], a[1], a[2], *bn.unwrap()))
    }
}

impl<T: Real> Operator<T> for BatchMatMul {
    fn name(&self) -> &'static str {
        "bmm"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (bs, m, k, n) = self.dims(x[0].shape(), x[1].shape())?;
        let mut out = vec![T::zero(); bs * m * n];
        let (a, b) = (x[0].data(), x[1].data());
        par::for_each_chunk_mut(&mut out, m * n, |i, c| {
            matmul_into(m, k, n, &a[i * m * k..][..m * k], false, &b[i * k * n..][..k * n], self.trans_b, c, false)
        });
        Ok(Forward::plain(Tensor::from_vec(vec![bs, m, n], out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (_, m, k, n) = self.dims(v.inputs[0].shape(), v.inputs[1].shape())?;
        let (a, b, g) = (v.inputs[0].data(), v.inputs[1].data(), v.grad_out);
        let ga = v.needs[0].then(|| {
            let mut ga = vec![T::zero(); a.len()];
            // dA = dC · op(B)ᵀ
            par::for_each_chunk_mut(&mut ga, m * k, |i, c| {
                matmul_into(m, n, k, &g[i * m * n..][..m * n], false, &b[i * k * n..][..k * n], !self.trans_b, c, false)
            });
            ga
        });
        let gb = v.needs[1].then(|| {
            let mut gb = vec![T::zero(); b.len()];
            par::for_each_chunk_mut(&mut gb, k * n, |i, c| {
                let (ai, gi) = (&a[i * m * k..][..m * k], &g[i * m * n..][..m * n]);
                if self.trans_b {
                    // B is n×k: dB = dCᵀ · A
                    matmul_into(n, m, k, gi, true, ai, false, c, false)
                } else {
                    matmul_into(k, m, n, ai, true, gi, false, c, false)
                }
            });
            gb
        });
        Ok(vec![ga, gb])
    }
}

/// Affine map over the last axis: `x (…×k) · w (k×n) + b (n)`.
///
/// Inputs are `[x, w]` or `[x, w, b]`.
#[derive(Debug)]
pub struct Linear;

impl<T: Real> Operator<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let xs = x[0].shape();
        let ws = x[1].shape();
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(OpError::new(format!("linear weight {ws:?} does not accept input {xs:?}")));
        }
        let n = ws[1];
        if let Some(b) = x.get(2) {
            if b.shape() != [n] {
                return Err(OpError::new(format!("linear bias {:?} should be [{n}]", b.shape())));
            }
        }
        let rows = x[0].numel() / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(b) = x.get(2) {
            out.chunks_mut(n).for_each(|r| r.copy_from_slice(b.data()));
        }
        matmul_into(rows, k, n, x[0].data(), false, x[1].data(), false, &mut out, x.len() > 2);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Forward::plain(Tensor::from_vec(shape, out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (k, n) = (v.inputs[1].shape()[0], v.inputs[1].shape()[1]);
        let rows = v.inputs[0].numel() / k;
        let gx = v.needs[0].then(|| {
            let mut g = vec![T::zero(); rows * k];
            matmul_into(rows, n, k, v.grad_out, false, v.inputs[1].data(), true, &mut g, false);
            g
        });
        let gw = v.needs[1].then(|| {
            let mut g = vec![T::zero(); k * n];
            matmul_into(k, rows, n, v.inputs[0].data(), true, v.grad_out, false, &mut g, false);
            g
        });
        let mut grads = vec![gx, gw];
        if v.inputs.len() > 2 {
            grads.push(v.needs[2].then(|| {
                let mut g = vec![T::zero(); n];
                for r in v.grad_out.chunks(n) {
                    g.iter_mut().zip(r).for_each(|(a, &b)| *a += b);
                }
                g
            }));
        }
        Ok(grads)
    }
}
