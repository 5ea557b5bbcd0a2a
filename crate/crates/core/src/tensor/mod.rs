//! Dense 64-bit float tensors and the reverse-mode differentiation tape.
//!
//! The tape records every primitive; its backward pass emits further taped
//! primitives instead of opaque gradient kernels, so gradients are themselves
//! differentiable (second-order gradients fall out of the same machinery).

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi};
pub use kernels::{conv2d_raw, conv_out_dim, conv_transpose_out_dim};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Dense row-major tensor of 64-bit floats. Images use NCHW layout,
/// convolution kernels OIKK as `[out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape(
                "Tensor::new",
                "positive dims",
                format!("{shape:?}"),
            ));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{numel} elements for shape {shape:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    /// Rank-1 scalar wrapper; reductions and losses produce these.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Elementwise draws from N(mean, std).
    pub fn randn(shape: &[usize], mean: f64, std: f64, rng: &mut RngStream) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal_scaled(mean, std)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::shape(
                "Tensor::item",
                "scalar",
                format!("{:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Shape as `(n, c, h, w)`; errors unless rank 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(
                "Tensor::dims4",
                "rank 4",
                format!("{:?}", self.shape),
            )),
        }
    }

    /// First index holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn validate_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(i) => Err(Error::NonFinite(format!(
                "{context}: index {i} is {}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}
