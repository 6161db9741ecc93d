use rand::Rng;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Feature maps use `N x C x H x W` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    values: Vec<T>,
    /// Gradient slot, populated only on trainable parameters after backward.
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return shape_err("tensor", format!("extents must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            );
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; numel]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::filled(&[1], value)
    }

    /// Uniform samples in `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let values = (0..numel).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
        Self::new(shape.to_vec(), values).expect("positive extents")
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.values.clone())
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => shape_err(op, format!("expected rank-4 tensor, got {:?}", self.shape)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Slice `[start, start + count)` along the leading axis.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let lead = self.shape[0];
        if count == 0 || start + count > lead {
            return shape_err(
                "batch_slice",
                format!("range {start}..{} outside leading extent {lead}", start + count),
            );
        }
        let stride = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Self::new(shape, self.values[start * stride..(start + count) * stride].to_vec())
    }

    /// Concatenate along the leading axis.
    pub fn stack(parts: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("stack", "no tensors to stack");
        };
        let tail = &first.shape[1..];
        let mut values = Vec::new();
        let mut lead = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return shape_err("stack", format!("trailing shape {:?} != {:?}", &p.shape[1..], tail));
            }
            lead += p.shape[0];
            values.extend_from_slice(&p.values);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(shape, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn stack_and_slice_are_inverse() {
        let a = Tensor::<f64>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.batch_slice(1, 2).unwrap().values(), b.values());
    }
}
