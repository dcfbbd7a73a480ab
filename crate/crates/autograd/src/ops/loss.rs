use std::sync::Arc;

use crate::error::OpError;
use crate::graph::{Forward, Operator, Saved, Vjp};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Mean pixelwise cross-entropy of B×C×H×W logits against B×H×W class indices.
///
/// Pixels labelled `ignore_index` contribute nothing; the mean runs over the
/// remaining pixels, whose count is kept in `saved.indices[0]`.
#[derive(Debug)]
pub struct CrossEntropy {
    pub targets: Arc<Vec<u8>>,
    pub ignore_index: u8,
}

impl CrossEntropy {
    fn layout(&self, s: &[usize]) -> Result<(usize, usize, usize), OpError> {
        if s.len() < 2 {
            return Err(OpError::new(format!("cross_entropy logits must be B×C×…, got {s:?}")));
        }
        let spatial: usize = s[2..].iter().product();
        if s[0] * spatial != self.targets.len() {
            return Err(OpError::new(format!(
                "cross_entropy has {} targets for logits {s:?}",
                self.targets.len()
            )));
        }
        Ok((s[0], s[1], spatial))
    }
}

impl<T: Real> Operator<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, x: &[&Tensor<T>]) -> Result<Forward<T>, OpError> {
        let (b, c, s) = self.layout(x[0].shape())?;
        let xd = x[0].data();
        let mut total = T::zero();
        let mut count = 0usize;
        for bi in 0..b {
            for p in 0..s {
                let t = self.targets[bi * s + p];
                if t == self.ignore_index {
                    continue;
                }
                if t as usize >= c {
                    return Err(OpError::new(format!("target class {t} out of range for {c} classes")));
                }
                let at = |k: usize| xd[(bi * c + k) * s + p];
                let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
                let lse = m + (0..c).map(|k| (at(k) - m).exp()).sum::<T>().ln();
                total += lse - at(t as usize);
                count += 1;
            }
        }
        if count == 0 {
            return Err(OpError::new("every pixel is ignored; the mean loss is undefined"));
        }
        Ok(Forward {
            output: Tensor::scalar(total / T::lit(count as f64)),
            saved: Saved { reals: Vec::new(), indices: vec![count], kink: 0 },
        })
    }

    fn backward(&self, v: Vjp<'_, T>) -> Result<Vec<Option<Vec<T>>>, OpError> {
        let (b, c, s) = self.layout(v.inputs[0].shape())?;
        let scale = v.grad_out[0] / T::lit(v.saved.indices[0] as f64);
        let xd = v.inputs[0].data();
        let mut g = vec![T::zero(); xd.len()];
        let mut probs = vec![T::zero(); c];
        for bi in 0..b {
            for p in 0..s {
                let t = self.targets[bi * s + p];
                if t == self.ignore_index {
                    continue;
                }
                let m = (0..c).map(|k| xd[(bi * c + k) * s + p]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (k, pk) in probs.iter_mut().enumerate() {
                    *pk = (xd[(bi * c + k) * s + p] - m).exp();
                    z += *pk;
                }
                for (k, &pk) in probs.iter().enumerate() {
                    let onehot = if k == t as usize { T::one() } else { T::zero() };
                    g[(bi * c + k) * s + p] = scale * (pk / z - onehot);
                }
            }
        }
        Ok(vec![Some(g)])
    }
}
