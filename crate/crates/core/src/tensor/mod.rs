//! Dense tensors with real or complex elements plus the reverse-mode
//! differentiation engine built on top of them.

pub mod fft;
pub mod graph;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod stf;

use crate::error::{CoreError, Result};
use rand::Rng;

/// Element kind of a tensor. Complex values are stored as interleaved
/// (real, imaginary) `f32` pairs.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ElemKind {
    Real32,
    Complex64,
}

impl ElemKind {
    /// Number of `f32` storage slots per element.
    pub fn slots(self) -> usize {
        match self {
            ElemKind::Real32 => 1,
            ElemKind::Complex64 => 2,
        }
    }
}

/// A dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    kind: ElemKind,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize], kind: ElemKind) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            kind,
            data: vec![0.0; n * kind.slots()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            kind: ElemKind::Real32,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor {
            shape: vec![1],
            kind: ElemKind::Real32,
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], kind: ElemKind, data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if data.len() != n * kind.slots() {
            return Err(CoreError::shape(format!(
                "data length {} does not match shape {:?} ({} slots expected)",
                data.len(),
                shape,
                n * kind.slots()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            kind,
            data,
        })
    }

    pub fn from_real_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        Tensor::from_vec(shape, ElemKind::Real32, data)
    }

    /// Standard-normal tensor (complex tensors get independent normal
    /// real/imaginary parts).
    pub fn randn(shape: &[usize], kind: ElemKind, rng: &mut impl Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n * kind.slots())
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                v as f32
            })
            .collect();
        Tensor {
            shape: shape.to_vec(),
            kind,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn kind(&self) -> ElemKind {
        self.kind
    }

    pub fn is_complex(&self) -> bool {
        self.kind == ElemKind::Complex64
    }

    /// Number of elements (complex elements count once).
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Number of raw `f32` storage slots.
    pub fn slots(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1 && self.kind == ElemKind::Real32
    }

    /// Value of a real scalar tensor.
    pub fn scalar_value(&self) -> Result<f32> {
        if !self.is_scalar() {
            return Err(CoreError::contract(format!(
                "expected real scalar, got {:?} {:?}",
                self.kind, self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(CoreError::shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    pub fn complex(&self, i: usize) -> (f32, f32) {
        debug_assert!(self.is_complex());
        (self.data[2 * i], self.data[2 * i + 1])
    }

    pub fn set_complex(&mut self, i: usize, re: f32, im: f32) {
        debug_assert!(self.is_complex());
        self.data[2 * i] = re;
        self.data[2 * i + 1] = im;
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Elementwise map over raw storage slots.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            kind: self.kind,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_tensor(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub_tensor(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape || self.kind != other.kind {
            return Err(CoreError::shape(format!(
                "mismatched operands: {:?} {:?} vs {:?} {:?}",
                self.kind, self.shape, other.kind, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            kind: self.kind,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Pointwise complex multiplication.
    pub fn cmul_tensor(&self, other: &Tensor) -> Result<Tensor> {
        if !self.is_complex() || !other.is_complex() || self.shape != other.shape {
            return Err(CoreError::shape(
                "cmul requires complex tensors of equal shape".to_string(),
            ));
        }
        let mut out = Tensor::zeros(&self.shape, ElemKind::Complex64);
        for i in 0..self.numel() {
            let (ar, ai) = self.complex(i);
            let (br, bi) = other.complex(i);
            out.set_complex(i, ar * br - ai * bi, ar * bi + ai * br);
        }
        Ok(out)
    }

    pub fn conj_tensor(&self) -> Tensor {
        debug_assert!(self.is_complex());
        let mut out = self.clone();
        for i in 0..out.numel() {
            out.data[2 * i + 1] = -out.data[2 * i + 1];
        }
        out
    }

    /// Pointwise modulus of a complex tensor, as a real tensor.
    pub fn modulus_tensor(&self) -> Tensor {
        debug_assert!(self.is_complex());
        let mut out = Tensor::zeros(&self.shape, ElemKind::Real32);
        for i in 0..self.numel() {
            let (re, im) = self.complex(i);
            out.data[i] = (re as f64).hypot(im as f64) as f32;
        }
        out
    }

    /// Reinterpret a complex (h, w) image as a real (h, w, 2) channels-last
    /// tensor; storage layouts coincide.
    pub fn complex_as_channels(&self) -> Result<Tensor> {
        let s = self.shape();
        if !self.is_complex() || s.len() != 2 {
            return Err(CoreError::shape(format!(
                "expected complex (h, w), got {:?} {:?}",
                self.kind, s
            )));
        }
        Tensor::from_vec(&[s[0], s[1], 2], ElemKind::Real32, self.data.clone())
    }

    /// Reinterpret a real (h, w, 2) channels-last tensor as complex (h, w).
    pub fn channels_as_complex(&self) -> Result<Tensor> {
        let s = self.shape();
        if self.is_complex() || s.len() != 3 || s[2] != 2 {
            return Err(CoreError::shape(format!(
                "expected real (h, w, 2), got {:?} {:?}",
                self.kind, s
            )));
        }
        Tensor::from_vec(&[s[0], s[1]], ElemKind::Complex64, self.data.clone())
    }

    /// Promote a real tensor to complex with zero imaginary part.
    pub fn to_complex(&self) -> Tensor {
        debug_assert!(!self.is_complex());
        let mut out = Tensor::zeros(&self.shape, ElemKind::Complex64);
        for i in 0..self.numel() {
            out.data[2 * i] = self.data[i];
        }
        out
    }

    /// Sum of squared slot values, in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Real inner product over raw slots (for complex tensors this equals
    /// the real part of the complex inner product).
    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// 2D/3D index helpers for row-major layout.
pub fn idx2(w: usize, y: usize, x: usize) -> usize {
    y * w + x
}

pub fn idx3(w: usize, c: usize, y: usize, x: usize, ch: usize) -> usize {
    (y * w + x) * c + ch
}
