use std::sync::Arc;

use crate::error::OpError;
use crate::graph::{Forward, Operator, Saved, Vjp};
use crate::scalar::Real;
use crate::tensor::Tensor;

fn check_affine<T: Real>(op: &str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(), OpError> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(OpError::new(format!(
            "{op}: affine params {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Normalizes each row of the last axis; inputs `[x, gamma, beta]`.
#[derive(Debug)]
pub struct LayerNorm {
    pub eps: f64,
}

impl<T: Real> Operator<T> for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let c = *x[0].shape().last().unwrap();
        check_affine("layer_norm", c, x[1], x[2])?;
        let (gamma, beta) = (x[1].data(), x[2].data());
        let eps = T::lit(self.eps);
        let inv_c = T::lit(1.0 / c as f64);
        let rows = x[0].numel() / c;
        let mut out = vec![T::zero(); x[0].numel()];
        let mut rstd = Vec::with_capacity(rows);
        for (row, o) in x[0].data().chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            for i in 0..c {
                o[i] = (row[i] - mean) * r * gamma[i] + beta[i];
            }
            rstd.push(r);
        }
        Ok(Forward { output: Tensor::from_vec(x[0].shape(), out), saved: Saved { reals: vec![rstd], ..Saved::none() } })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let c = *v.inputs[0].shape().last().unwrap();
        let gamma = v.inputs[1].data();
        let rstd = &v.saved.reals[0];
        let inv_c = T::lit(1.0 / c as f64);
        let mut gx = vec![T::zero(); v.inputs[0].numel()];
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); c];
        for (r, ((row, dy), dx)) in
            v.inputs[0].data().chunks(c).zip(v.grad_out.chunks(c)).zip(gx.chunks_mut(c)).enumerate()
        {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let mut m1 = T::zero();
            let mut m2 = T::zero();
            for i in 0..c {
                xhat[i] = (row[i] - mean) * rstd[r];
                gg[i] += dy[i] * xhat[i];
                gb[i] += dy[i];
                let d = dy[i] * gamma[i];
                m1 += d;
                m2 += d * xhat[i];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for i in 0..c {
                dx[i] = rstd[r] * (dy[i] * gamma[i] - m1 - xhat[i] * m2);
            }
        }
        Ok(vec![v.needs[0].then_some(gx), v.needs[1].then_some(gg), v.needs[2].then_some(gb)])
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize), OpError> {
    if shape.len() < 2 {
        return Err(OpError::new(format!("batch_norm needs rank >= 2, got {shape:?}")));
    }
    let spatial: usize = shape[2..].iter().product();
    Ok((shape[0], shape[1], spatial))
}

/// Batch normalization with batch statistics over every axis except axis 1.
///
/// Inputs `[x, gamma, beta]`. Saves the per-channel mean and biased variance
/// so the owning layer can update its running estimates.
#[derive(Debug)]
pub struct BatchNormTrain {
    pub eps: f64,
}

impl<T: Real> Operator<T> for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, c, s) = channel_layout(x[0].shape())?;
        check_affine("batch_norm", c, x[1], x[2])?;
        let data = x[0].data();
        let n = T::lit((b * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let plane = &data[(bi * c + ci) * s..][..s];
                mean[ci] += plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ci in 0..c {
                let plane = &data[(bi * c + ci) * s..][..s];
                var[ci] += plane.iter().map(|&v| (v - mean[ci]) * (v - mean[ci])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let eps = T::lit(self.eps);
        let mut out = vec![T::zero(); data.len()];
        let (gamma, beta) = (x[1].data(), x[2].data());
        for bi in 0..b {
            for ci in 0..c {
                let r = T::one() / (var[ci] + eps).sqrt();
                let (scale, shift) = (gamma[ci] * r, beta[ci] - gamma[ci] * r * mean[ci]);
                let off = (bi * c + ci) * s;
                for (o, &v) in out[off..off + s].iter_mut().zip(&data[off..off + s]) {
                    *o = v * scale + shift;
                }
            }
        }
        Ok(Forward {
            output: Tensor::from_vec(x[0].shape(), out),
            saved: Saved { reals: vec![mean, var], ..Saved::none() },
        })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (b, c, s) = channel_layout(v.inputs[0].shape())?;
        let (mean, var) = (&v.saved.reals[0], &v.saved.reals[1]);
        let gamma = v.inputs[1].data();
        let data = v.inputs[0].data();
        let eps = T::lit(self.eps);
        let n = T::lit((b * s) as f64);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                for (&x, &dy) in data[off..off + s].iter().zip(&v.grad_out[off..off + s]) {
                    sum_dy[ci] += dy;
                    sum_dy_xhat[ci] += dy * ((x - mean[ci]) * rstd[ci]);
                }
            }
        }
        let gx = v.needs[0].then(|| {
            let mut gx = vec![T::zero(); data.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * s;
                    let k = gamma[ci] * rstd[ci] / n;
                    for i in off..off + s {
                        let xhat = (data[i] - mean[ci]) * rstd[ci];
                        gx[i] = k * (n * v.grad_out[i] - sum_dy[ci] - xhat * sum_dy_xhat[ci]);
                    }
                }
            }
            gx
        });
        Ok(vec![gx, v.needs[1].then_some(sum_dy_xhat), v.needs[2].then_some(sum_dy)])
    }
}

/// Batch normalization with fixed (running) statistics; inputs `[x, gamma, beta]`.
#[derive(Debug)]
pub struct BatchNormEval<T> {
    pub mean: Arc<Vec<T>>,
    pub var: Arc<Vec<T>>,
    pub eps: f64,
}

impl<T: Real> BatchNormEval<T> {
    fn scale(&self, gamma: &[T]) -> Vec<T> {
        let eps = T::lit(self.eps);
        gamma.iter().zip(self.var.iter()).map(|(&g, &v)| g / (v + eps).sqrt()).collect()
    }
}

impl<T: Real> Operator<T> for BatchNormEval<T> {
    fn name(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, c, s) = channel_layout(x[0].shape())?;
        check_affine("batch_norm_eval", c, x[1], x[2])?;
        if self.mean.len() != c || self.var.len() != c {
            return Err(OpError::new(format!("running stats have {} channels, input has {c}", self.mean.len())));
        }
        let scale = self.scale(x[1].data());
        let beta = x[2].data();
        let mut out = x[0].data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let shift = beta[ci] - scale[ci] * self.mean[ci];
                out[(bi * c + ci) * s..][..s].iter_mut().for_each(|o| *o = *o * scale[ci] + shift);
            }
        }
        Ok(Forward::plain(Tensor::from_vec(x[0].shape(), out)))
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (b, c, s) = channel_layout(v.inputs[0].shape())?;
        let scale = self.scale(v.inputs[1].data());
        let eps = T::lit(self.eps);
        let data = v.inputs[0].data();
        let mut gx = v.grad_out.to_vec();
        let mut gg = vec![T::zero(); c];
        let mut gb = vec![T::zero(); c];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let r = T::one() / (self.var[ci] + eps).sqrt();
                for i in off..off + s {
                    gg[ci] += v.grad_out[i] * (data[i] - self.mean[ci]) * r;
                    gb[ci] += v.grad_out[i];
                    gx[i] *= scale[ci];
                }
            }
        }
        Ok(vec![v.needs[0].then_some(gx), v.needs[1].then_some(gg), v.needs[2].then_some(gb)])
    }
}
