//! Dense f32 tensors and a reverse-mode autodiff tape.
//!
//! Tensors are row-major with NCHW layout for image-like data. The tape records
//! every operation of one forward pass and replays it backwards on demand; a
//! fresh tape is used per forward pass.

mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Var, IGNORE_INDEX};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the product of `shape`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, bound: f32, rng: &mut R) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self { shape, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// Element `i` along the leading axis, keeping that axis with size 1.
    pub fn sample(&self, i: usize) -> Tensor {
        let n = self.shape[0];
        assert!(i < n, "sample {i} out of range for batch of {n}");
        let stride = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[i * stride..(i + 1) * stride].to_vec())
    }

    /// Concatenates tensors along the leading axis. All trailing dims must agree.
    pub fn cat_batch(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "cat_batch of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut n = 0;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for p in parts {
            assert_eq!(&p.shape[1..], tail, "cat_batch shape mismatch");
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Tensor::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "stack of zero tensors");
        let inner = parts[0].shape.clone();
        let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
        for p in parts {
            assert_eq!(p.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&p.data);
        }
        let mut shape = Vec::with_capacity(inner.len() + 1);
        shape.push(parts.len());
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirrors the last axis (horizontal flip for NCHW / CHW / HW data).
    pub fn flip_last(&self) -> Tensor {
        let w = *self.shape.last().expect("flip of a scalar");
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_and_cat_round_trip() {
        let t = Tensor::new([3, 2], vec![1., 2., 3., 4., 5., 6.]);
        let parts: Vec<_> = (0..3).map(|i| t.sample(i)).collect();
        assert_eq!(parts[1].data(), &[3., 4.]);
        assert_eq!(Tensor::cat_batch(&parts), t);
    }

    #[test]
    fn flip_last_mirrors_rows() {
        let t = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(t.flip_last().data(), &[3., 2., 1., 6., 5., 4.]);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn new_rejects_bad_length() {
        Tensor::new([2, 2], vec![0.0; 3]);
    }
}
