//! Dense row-major `f32` tensors.
//!
//! A [`Tensor`] is an immutable-by-convention value: operators never mutate
//! their inputs and always return fresh tensors. In model metadata a tensor
//! serializes as its shape only; the element data travels in the binary
//! weight section of a `.mimo` file.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MimoError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(MimoError::Usage(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(MimoError::Shape {
                op: "from_vec",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f32]) -> Self {
        Tensor::from_vec(vec![values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of dimension `axis`.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(MimoError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(MimoError::Shape {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Rows `index` along axis 0, e.g. output filters of a conv weight.
    pub fn select_axis0(&self, index: &[usize]) -> Result<Tensor> {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= self.shape[0] {
                return Err(MimoError::Usage(format!(
                    "index {i} out of range for axis 0 of {:?}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = index.len();
        Tensor::from_vec(shape, data)
    }

    /// Entries `index` along axis 1, e.g. input channels of a conv weight.
    pub fn select_axis1(&self, index: &[usize]) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(MimoError::Usage("select_axis1 needs rank >= 2".into()));
        }
        let outer = self.shape[0];
        let mid = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                if i >= mid {
                    return Err(MimoError::Usage(format!(
                        "index {i} out of range for axis 1 of {:?}",
                        self.shape
                    )));
                }
                let start = (o * mid + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = index.len();
        Tensor::from_vec(shape, data)
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    shape: Vec<usize>,
}

impl Serialize for Tensor {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        TensorMeta {
            shape: self.shape.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    /// Allocates a zero tensor of the recorded shape; data is filled by the
    /// model loader.
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let meta = TensorMeta::deserialize(deserializer)?;
        if meta.shape.is_empty() || meta.shape.contains(&0) {
            return Err(serde::de::Error::custom(format!(
                "non-positive tensor extent in {:?}",
                meta.shape
            )));
        }
        let n = meta
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= (1 << 32))
            .ok_or_else(|| serde::de::Error::custom("tensor too large"))?;
        Ok(Tensor {
            shape: meta.shape,
            data: vec![0.0; n],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn axis_selection() {
        let t = Tensor::from_vec(vec![2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.select_axis0(&[1]).unwrap().data(), &[3., 4., 5.]);
        let s = t.select_axis1(&[0, 2]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[0., 2., 3., 5.]);
    }

    #[test]
    fn bit_eq_sees_signed_zero() {
        let a = Tensor::vector(&[0.0]);
        let b = Tensor::vector(&[-0.0]);
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }
}
