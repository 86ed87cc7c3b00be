//! Dense row-major tensors and their on-disk binary form.
//!
//! Binary layout (all little-endian): `rank: u64`, then `rank` extents as
//! `u64`, then `product(extents)` values as `f32`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use std::io::{Read, Write};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    tracked: bool,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("extents must be positive, got {shape:?}")));
        }
        if numel(&shape) != values.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {} values, got {}",
                numel(&shape),
                values.len()
            )));
        }
        Ok(Self { shape, values, grad: None, tracked: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Self { shape: shape.to_vec(), values: vec![value; numel(shape)], grad: None, tracked: false }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let values = (0..numel(shape)).map(&mut f).collect();
        Self::new(shape.to_vec(), values).expect("extents must be positive")
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![1], values: vec![value], grad: None, tracked: false }
    }

    /// Builds a 2-D tensor from nested rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        let values = rows.iter().flat_map(|r| r.iter().map(|&v| T::of(v))).collect();
        Self::new(vec![rows.len(), cols], values)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn tracked(mut self) -> Self {
        self.tracked = true;
        self
    }

    pub fn set_tracked(&mut self, tracked: bool) {
        self.tracked = tracked;
    }

    pub fn is_tracked(&self) -> bool {
        self.tracked
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.values.len() {
                return Err(Error::dim(format!(
                    "gradient of length {} for tensor of shape {:?}",
                    g.len(),
                    self.shape
                )));
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            flat = flat * d + i;
        }
        self.values[flat]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    /// Converts the element type; gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
            grad: None,
            tracked: self.tracked,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
        }
        Ok(())
    }

    /// Number of bytes `write_binary` emits.
    pub fn binary_len(&self) -> usize {
        8 * (1 + self.shape.len()) + 4 * self.values.len()
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let rank = u64::from_le_bytes(word) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u64::from_le_bytes(word) as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0 && n < (1 << 31))
            .ok_or_else(|| Error::Format(format!("implausible extents {shape:?}")))?;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        Tensor::new(shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_length() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn binary_header_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), t.binary_len());
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.5f32.to_le_bytes());
        assert_eq!(&buf[28..32], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_stream_is_an_error() {
        let t = Tensor::<f32>::zeros(&[3, 3]);
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(Tensor::<f32>::read_binary(buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn binary_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let t = Tensor::<f32>::from_fn(&shape, |i| ((i as u32).wrapping_mul(seed) % 1000) as f32 / 7.0 - 50.0);
            let mut buf = Vec::new();
            t.write_binary(&mut buf).unwrap();
            let back = Tensor::<f32>::read_binary(buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
