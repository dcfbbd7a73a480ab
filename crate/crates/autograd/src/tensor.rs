use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Real};

/// Magic prefix of a serialized tensor.
pub const TENSOR_MAGIC: &[u8; 4] = b"KTSR";

/// Dense row-major n-dimensional array.
///
/// The data buffer is reference counted, so cloning a tensor (or handing it to
/// a [`Graph`](crate::Graph) as a leaf) never copies values. Once built a
/// tensor is treated as immutable; [`Tensor::data_mut`] copies on write when
/// the buffer is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    requires_grad: bool,
    grad: Option<Arc<Vec<T>>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(TensorError::InvalidShape { shape, reason: "extents must be positive" });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength { shape, expected: numel, actual: data.len() });
        }
        Ok(Tensor { shape, data: Arc::new(data), requires_grad: false, grad: None })
    }

    /// Panicking constructor for shapes known to be consistent.
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Self {
        Self::new(shape, data).expect("inconsistent tensor shape")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self::from_vec(shape, (0..n).map(&mut f).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref().map(|g| g.as_slice())
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(Arc::new(grad));
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(TensorError::DataLength { shape, expected: self.numel(), actual: numel });
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data), requires_grad: self.requires_grad, grad: None })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&x| U::lit(x.as_f64())).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Largest absolute elementwise difference; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Option<T> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| (a - b).abs())
                .fold(T::zero(), T::max),
        )
    }

    pub fn bit_eq(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }

    /// Encodes as `KTSR | dtype u8 | rank u8 | extents u32.. | data`, little endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        if self.rank() > u8::MAX as usize {
            return Err(TensorError::Format(format!("rank {} does not fit in u8", self.rank())));
        }
        let mut buf = Vec::with_capacity(6 + 4 * self.rank() + self.numel() * T::DTYPE.size());
        buf.extend_from_slice(TENSOR_MAGIC);
        buf.push(T::DTYPE as u8);
        buf.push(self.rank() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| TensorError::Format(format!("extent {d} does not fit in u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &x in self.data.iter() {
            x.write_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Decodes one tensor; values stored at a different precision are converted.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        if &head[..4] != TENSOR_MAGIC {
            return Err(TensorError::Format("bad tensor magic".into()));
        }
        let dtype = DType::from_code(head[4])
            .ok_or_else(|| TensorError::Format(format!("unknown dtype code {}", head[4])))?;
        let rank = head[5] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut e = [0u8; 4];
            r.read_exact(&mut e)?;
            shape.push(u32::from_le_bytes(e) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * dtype.size()];
        r.read_exact(&mut raw)?;
        let data = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Tensor::new(shape, data)
    }
}

trait ToBits {
    fn to_bits_u64(self) -> u64;
}

impl<T: Real> ToBits for T {
    fn to_bits_u64(self) -> u64 {
        // f64 holds every f32 exactly, so this is injective for both widths.
        self.as_f64().to_bits()
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(vec![2, 1], vec![1.0, -2.0]);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"KTSR");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &1u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 22);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = Tensor::<f64>::scalar(1.0).to_bytes();
        bytes[0] = b'X';
        assert!(Tensor::<f64>::read_from(bytes.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn serialization_round_trips(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
            let t = Tensor::from_vec(shape, data);
            let back = Tensor::<f64>::read_from(t.to_bytes().as_slice()).unwrap();
            prop_assert!(t.bit_eq(&back));
        }
    }
}
