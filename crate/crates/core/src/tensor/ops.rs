//! Forward ops on [`Var`] and their vector-Jacobian products.
//!
//! Every VJP is expressed through public ops, which is what makes the
//! second backward pass for the gradient penalty work unchanged. Complex
//! cotangents follow the adjoint convention: the gradient of a real loss
//! with respect to a complex value z is d/dRe(z) + i d/dIm(z), so the VJP
//! of a complex-linear op is its conjugate adjoint.

use super::fft::fft2_centered;
use super::graph::{Op, Var};
use super::kernels;
use super::{ElemKind, Tensor};
use crate::error::{CoreError, Result};

impl Var {
    // ── Elementwise ──────────────────────────────────────────────────

    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = self.with2(other, |a, b| a.add_tensor(b))??;
        Ok(self.binary(other, value, Op::Add))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = self.with2(other, |a, b| a.sub_tensor(b))??;
        Ok(self.binary(other, value, Op::Sub))
    }

    pub fn neg(&self) -> Var {
        let value = self.with_value(|t| t.map(|v| -v));
        self.unary(value, Op::Neg)
    }

    /// Elementwise product of real tensors.
    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = self.with2(other, |a, b| {
            if a.is_complex() || b.is_complex() {
                return Err(CoreError::contract(
                    "mul is real-only; use cmul for complex operands".to_string(),
                ));
            }
            a.zip_public(b, |x, y| x * y)
        })??;
        Ok(self.binary(other, value, Op::Mul))
    }

    pub fn add_scalar(&self, s: f32) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("add_scalar is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(|v| v + s));
        Ok(self.unary(value, Op::AddScalar))
    }

    /// Multiply all storage slots by a constant (valid for complex too).
    pub fn mul_scalar(&self, s: f32) -> Var {
        let value = self.with_value(|t| t.scaled(s));
        self.unary(value, Op::MulScalar(s))
    }

    pub fn recip(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("recip is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(|v| 1.0 / v));
        Ok(self.unary(value, Op::Recip))
    }

    pub fn sqrt(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("sqrt is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(|v| v.sqrt()));
        Ok(self.unary(value, Op::Sqrt))
    }

    pub fn leaky_relu(&self, slope: f32) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("leaky_relu is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(|v| if v >= 0.0 { v } else { slope * v }));
        Ok(self.unary(value, Op::LeakyRelu(slope)))
    }

    pub fn sigmoid(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("sigmoid is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(sigmoid_stable));
        Ok(self.unary(value, Op::Sigmoid))
    }

    /// Numerically stable log(1 + exp(x)).
    pub fn softplus(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("softplus is real-only".to_string()));
        }
        let value = self.with_value(|t| t.map(softplus_stable));
        Ok(self.unary(value, Op::Softplus))
    }

    pub fn square(&self) -> Result<Var> {
        self.mul(self)
    }

    // ── Matrix ops ───────────────────────────────────────────────────

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = self.with2(other, |a, b| {
            let (sa, sb) = (a.shape(), b.shape());
            if a.is_complex() || b.is_complex() || sa.len() != 2 || sb.len() != 2 {
                return Err(CoreError::shape(format!(
                    "matmul expects real matrices, got {:?} and {:?}",
                    sa, sb
                )));
            }
            if sa[1] != sb[0] {
                return Err(CoreError::shape(format!(
                    "matmul inner extents differ: {:?} vs {:?}",
                    sa, sb
                )));
            }
            let data = kernels::matmul(a.data(), b.data(), sa[0], sa[1], sb[1]);
            Tensor::from_real_vec(&[sa[0], sb[1]], data)
        })??;
        Ok(self.binary(other, value, Op::Matmul))
    }

    pub fn transpose2(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = t.shape();
            if t.is_complex() || s.len() != 2 {
                return Err(CoreError::shape(format!(
                    "transpose2 expects a real matrix, got {:?}",
                    s
                )));
            }
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = t.data()[i * n + j];
                }
            }
            Tensor::from_real_vec(&[n, m], out)
        })?;
        Ok(self.unary(value, Op::Transpose2))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let from = self.shape();
        let value = self.with_value(|t| t.reshaped(shape))?;
        Ok(self.unary(value, Op::Reshape { from }))
    }

    /// Row-stabilized softmax over the last axis of a matrix.
    pub fn softmax_rows(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = t.shape();
            if t.is_complex() || s.len() != 2 {
                return Err(CoreError::shape(format!(
                    "softmax_rows expects a real matrix, got {:?}",
                    s
                )));
            }
            if t.has_nan() {
                return Err(CoreError::numeric(
                    "softmax_rows received non-finite input".to_string(),
                ));
            }
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0f32; m * n];
            for i in 0..m {
                let row = &t.data()[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut denom = 0.0f64;
                let mut ex = vec![0.0f64; n];
                for (j, &v) in row.iter().enumerate() {
                    let e = ((v as f64) - mx).exp();
                    ex[j] = e;
                    denom += e;
                }
                for j in 0..n {
                    out[i * n + j] = (ex[j] / denom) as f32;
                }
            }
            Tensor::from_real_vec(&[m, n], out)
        })?;
        Ok(self.unary(value, Op::SoftmaxRows))
    }

    // ── Reductions and broadcasts ────────────────────────────────────

    pub fn sum_all(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("sum_all is real-only".to_string()));
        }
        let value = self.with_value(|t| {
            let s: f64 = t.data().iter().map(|&v| v as f64).sum();
            Tensor::scalar(s as f32)
        });
        Ok(self.unary(value, Op::SumAll))
    }

    pub fn mean_all(&self) -> Result<Var> {
        if self.kind() != ElemKind::Real32 {
            return Err(CoreError::contract("mean_all is real-only".to_string()));
        }
        let value = self.with_value(|t| {
            let s: f64 = t.data().iter().map(|&v| v as f64).sum();
            Tensor::scalar((s / t.numel() as f64) as f32)
        });
        Ok(self.unary(value, Op::MeanAll))
    }

    /// (m, n) -> (m,): sum over columns of each row.
    pub fn row_sum(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = require_matrix(t, "row_sum")?;
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0f32; m];
            for i in 0..m {
                out[i] = t.data()[i * n..(i + 1) * n]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32;
            }
            Tensor::from_real_vec(&[m], out)
        })?;
        Ok(self.unary(value, Op::RowSum))
    }

    /// (m, n) -> (n,): sum over rows of each column.
    pub fn col_sum(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = require_matrix(t, "col_sum")?;
            let (m, n) = (s[0], s[1]);
            let mut out = vec![0.0f64; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += t.data()[i * n + j] as f64;
                }
            }
            Tensor::from_real_vec(&[n], out.into_iter().map(|v| v as f32).collect())
        })?;
        Ok(self.unary(value, Op::ColSum))
    }

    /// (m, n) -> (n,): mean over rows of each column.
    pub fn col_mean(&self) -> Result<Var> {
        let rows = self.shape()[0];
        Ok(self.col_sum()?.mul_scalar(1.0 / rows as f32))
    }

    /// Scalar -> arbitrary real shape.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let v = t.scalar_value()?;
            Ok(Tensor::full(shape, v))
        })?;
        Ok(self.unary(value, Op::BroadcastScalar))
    }

    /// (n,) -> (rows, n): repeat a row vector.
    pub fn broadcast_row(&self, rows: usize) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = require_vector(t, "broadcast_row")?;
            let mut out = Vec::with_capacity(rows * s);
            for _ in 0..rows {
                out.extend_from_slice(t.data());
            }
            Tensor::from_real_vec(&[rows, s], out)
        })?;
        Ok(self.unary(value, Op::BroadcastRow))
    }

    /// (m,) -> (m, cols): repeat a column vector.
    pub fn broadcast_col(&self, cols: usize) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = require_vector(t, "broadcast_col")?;
            let mut out = Vec::with_capacity(s * cols);
            for &v in t.data() {
                out.extend(std::iter::repeat(v).take(cols));
            }
            Tensor::from_real_vec(&[s, cols], out)
        })?;
        Ok(self.unary(value, Op::BroadcastCol))
    }

    /// (m, n) + (n,) broadcast over rows.
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        let value = self.with2(row, |a, b| row_broadcast(a, b, "add_row", |x, y| x + y))??;
        Ok(self.binary(row, value, Op::AddRow))
    }

    /// (m, n) * (n,) broadcast over rows.
    pub fn mul_row(&self, row: &Var) -> Result<Var> {
        let value = self.with2(row, |a, b| row_broadcast(a, b, "mul_row", |x, y| x * y))??;
        Ok(self.binary(row, value, Op::MulRow))
    }

    /// (m, n) + (m,) broadcast over columns.
    pub fn add_col(&self, col: &Var) -> Result<Var> {
        let value = self.with2(col, |a, b| col_broadcast(a, b, "add_col", |x, y| x + y))??;
        Ok(self.binary(col, value, Op::AddCol))
    }

    /// (m, n) * (m,) broadcast over columns.
    pub fn mul_col(&self, col: &Var) -> Result<Var> {
        let value = self.with2(col, |a, b| col_broadcast(a, b, "mul_col", |x, y| x * y))??;
        Ok(self.binary(col, value, Op::MulCol))
    }

    /// Multiply a real tensor by a real scalar variable.
    pub fn scale_by_scalar(&self, s: &Var) -> Result<Var> {
        let value = self.with2(s, |a, b| {
            if a.is_complex() {
                return Err(CoreError::contract(
                    "scale_by_scalar is real-only".to_string(),
                ));
            }
            let sv = b.scalar_value()?;
            Ok(a.scaled(sv))
        })??;
        Ok(self.binary(s, value, Op::ScaleByScalar))
    }

    // ── Convolution family ───────────────────────────────────────────

    /// Same-padded stride-1 convolution with an odd kernel.
    ///
    /// x: (h, w, c_in), kernel: (r, r, c_in, c_out).
    pub fn conv2d(&self, kernel: &Var) -> Result<Var> {
        let r = {
            let ks = kernel.shape();
            if ks.len() != 4 || ks[0] != ks[1] {
                return Err(CoreError::shape(format!(
                    "conv kernel must be (r, r, c_in, c_out), got {:?}",
                    ks
                )));
            }
            if ks[0] % 2 == 0 {
                return Err(CoreError::shape(format!(
                    "same-padding convolution requires odd kernel extent, got {}",
                    ks[0]
                )));
            }
            ks[0]
        };
        self.conv2d_strided(kernel, 1, r / 2)
    }

    /// General strided zero-padded convolution.
    pub fn conv2d_strided(&self, kernel: &Var, stride: usize, pad: usize) -> Result<Var> {
        let value = self.with2(kernel, |x, k| {
            let (h, w, ci) = require_feature_map(x, "conv2d input")?;
            let ks = k.shape();
            if k.is_complex() || ks.len() != 4 || ks[0] != ks[1] {
                return Err(CoreError::shape(format!(
                    "conv kernel must be real (r, r, c_in, c_out), got {:?}",
                    ks
                )));
            }
            if ks[2] != ci {
                return Err(CoreError::shape(format!(
                    "input has {} channels but kernel expects {}",
                    ci, ks[2]
                )));
            }
            let (r, co) = (ks[0], ks[3]);
            let oh = kernels::conv_out_extent(h, r, stride, pad);
            let ow = kernels::conv_out_extent(w, r, stride, pad);
            let data = kernels::conv2d(x.data(), h, w, ci, k.data(), r, co, stride, pad);
            Tensor::from_real_vec(&[oh, ow, co], data)
        })??;
        Ok(self.binary(kernel, value, Op::Conv2d { stride, pad }))
    }

    /// Adjoint of [`Var::conv2d_strided`] with respect to its input, as a
    /// forward op. With stride 2 this doubles spatial extents, which is how
    /// the learnable transpose-convolution upsampler is realized; the kernel
    /// is (r, r, c_out, c_in) relative to this op's input/output channels.
    pub fn conv_input_adjoint(
        &self,
        kernel: &Var,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = out_hw;
        let value = self.with2(kernel, |gt, k| {
            let (oh, ow, co) = require_feature_map(gt, "conv_input_adjoint input")?;
            let ks = k.shape();
            if k.is_complex() || ks.len() != 4 || ks[0] != ks[1] || ks[3] != co {
                return Err(CoreError::shape(format!(
                    "adjoint kernel must be (r, r, c, {}), got {:?}",
                    co, ks
                )));
            }
            let (r, ci) = (ks[0], ks[2]);
            if kernels::conv_out_extent(h, r, stride, pad) != oh
                || kernels::conv_out_extent(w, r, stride, pad) != ow
            {
                return Err(CoreError::shape(format!(
                    "adjoint target {}x{} inconsistent with source {}x{}",
                    h, w, oh, ow
                )));
            }
            let data = kernels::conv2d_input_adjoint(
                gt.data(),
                oh,
                ow,
                co,
                k.data(),
                r,
                ci,
                stride,
                pad,
                h,
                w,
            );
            Tensor::from_real_vec(&[h, w, ci], data)
        })??;
        Ok(self.binary(kernel, value, Op::ConvInputAdjoint { stride, pad }))
    }

    /// Adjoint of [`Var::conv2d_strided`] with respect to its kernel.
    /// Appears in backward graphs; differentiating through it is out of scope.
    pub(crate) fn conv_kernel_adjoint(
        &self,
        cot: &Var,
        stride: usize,
        pad: usize,
        r: usize,
    ) -> Result<Var> {
        let value = self.with2(cot, |x, g| {
            let (h, w, ci) = require_feature_map(x, "conv_kernel_adjoint input")?;
            let (oh, ow, co) = require_feature_map(g, "conv_kernel_adjoint cotangent")?;
            let data = kernels::conv2d_kernel_adjoint(
                x.data(),
                h,
                w,
                ci,
                g.data(),
                oh,
                ow,
                co,
                r,
                stride,
                pad,
            );
            Tensor::from_real_vec(&[r, r, ci, co], data)
        })??;
        Ok(self.binary(cot, value, Op::ConvKernelAdjoint))
    }

    pub fn avgpool2(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let (h, w, c) = require_feature_map(t, "avgpool2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(CoreError::shape(format!(
                    "avgpool2 requires even extents, got {}x{}",
                    h, w
                )));
            }
            let data = kernels::avgpool2(t.data(), h, w, c);
            Tensor::from_real_vec(&[h / 2, w / 2, c], data)
        })?;
        Ok(self.unary(value, Op::AvgPool2))
    }

    pub fn avgunpool2(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let (h, w, c) = require_feature_map(t, "avgunpool2")?;
            let data = kernels::avgunpool2(t.data(), h, w, c);
            Tensor::from_real_vec(&[2 * h, 2 * w, c], data)
        })?;
        Ok(self.unary(value, Op::AvgUnpool2))
    }

    // ── Spatial slicing ──────────────────────────────────────────────

    /// Crop a (h, w) or (h, w, c) tensor to a window.
    pub fn crop2d(&self, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Var> {
        let (from_h, from_w) = {
            let s = self.shape();
            (s[0], s[1])
        };
        let value = self.with_value(|t| crop_tensor(t, y0, x0, ch, cw))?;
        Ok(self.unary(value, Op::Crop2d { y0, x0, from_h, from_w }))
    }

    /// Zero-embed a (h, w) or (h, w, c) tensor into a larger canvas.
    pub fn pad_embed2d(&self, y0: usize, x0: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let value = self.with_value(|t| pad_embed_tensor(t, y0, x0, out_h, out_w))?;
        Ok(self.unary(value, Op::PadEmbed2d { y0, x0 }))
    }

    // ── Complex ops ──────────────────────────────────────────────────

    /// Centered orthonormal 2D FFT of a complex (h, w) tensor.
    pub fn fft2(&self) -> Result<Var> {
        self.fft2_impl(false)
    }

    /// Centered orthonormal inverse 2D FFT.
    pub fn ifft2(&self) -> Result<Var> {
        self.fft2_impl(true)
    }

    fn fft2_impl(&self, inverse: bool) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = t.shape();
            if !t.is_complex() || s.len() != 2 {
                return Err(CoreError::shape(format!(
                    "fft2 expects a complex (h, w) tensor, got {:?} {:?}",
                    t.kind(),
                    s
                )));
            }
            let data = fft2_centered(t.data(), s[0], s[1], inverse)?;
            Tensor::from_vec(s, ElemKind::Complex64, data)
        })?;
        Ok(self.unary(value, Op::Fft2 { inverse }))
    }

    /// Pointwise complex multiplication.
    pub fn cmul(&self, other: &Var) -> Result<Var> {
        let value = self.with2(other, |a, b| a.cmul_tensor(b))??;
        Ok(self.binary(other, value, Op::CMul))
    }

    pub fn conj(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            if !t.is_complex() {
                return Err(CoreError::contract("conj expects a complex tensor".to_string()));
            }
            Ok(t.conj_tensor())
        })?;
        Ok(self.unary(value, Op::Conj))
    }

    /// Pointwise complex modulus, as a real tensor.
    pub fn modulus(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            if !t.is_complex() {
                return Err(CoreError::contract(
                    "modulus expects a complex tensor".to_string(),
                ));
            }
            Ok(t.modulus_tensor())
        })?;
        Ok(self.unary(value, Op::Modulus))
    }

    fn modulus_vjp(&self, z: &Var) -> Result<Var> {
        let value = self.with2(z, |cot, zt| {
            let mut out = Tensor::zeros(zt.shape(), ElemKind::Complex64);
            for i in 0..zt.numel() {
                let (re, im) = zt.complex(i);
                let m = ((re as f64).hypot(im as f64)).max(1e-12);
                let c = cot.data()[i] as f64;
                out.set_complex(i, (c * re as f64 / m) as f32, (c * im as f64 / m) as f32);
            }
            out
        })?;
        Ok(self.binary(z, value, Op::ModulusVjp))
    }

    /// Reinterpret a real (h, w, 2) channels-last tensor as complex (h, w).
    pub fn channels_to_complex(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = t.shape();
            if t.is_complex() || s.len() != 3 || s[2] != 2 {
                return Err(CoreError::shape(format!(
                    "channels_to_complex expects real (h, w, 2), got {:?}",
                    s
                )));
            }
            // Row-major (h, w, 2) storage is exactly interleaved complex.
            Tensor::from_vec(&[s[0], s[1]], ElemKind::Complex64, t.data().to_vec())
        })?;
        Ok(self.unary(value, Op::ChannelsToComplex))
    }

    /// Reinterpret a complex (h, w) tensor as real (h, w, 2).
    pub fn complex_to_channels(&self) -> Result<Var> {
        let value = self.with_value(|t| {
            let s = t.shape();
            if !t.is_complex() || s.len() != 2 {
                return Err(CoreError::shape(format!(
                    "complex_to_channels expects complex (h, w), got {:?}",
                    s
                )));
            }
            Tensor::from_vec(&[s[0], s[1], 2], ElemKind::Real32, t.data().to_vec())
        })?;
        Ok(self.unary(value, Op::ComplexToChannels))
    }
}

impl Tensor {
    pub(crate) fn zip_public(
        &self,
        other: &Tensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() || self.kind() != other.kind() {
            return Err(CoreError::shape(format!(
                "mismatched operands: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::from_vec(self.shape(), self.kind(), data)
    }
}

fn sigmoid_stable(x: f32) -> f32 {
    let x = x as f64;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y as f32
}

fn softplus_stable(x: f32) -> f32 {
    let x = x as f64;
    (x.max(0.0) + (-x.abs()).exp().ln_1p()) as f32
}

fn require_matrix<'a>(t: &'a Tensor, what: &str) -> Result<&'a [usize]> {
    let s = t.shape();
    if t.is_complex() || s.len() != 2 {
        return Err(CoreError::shape(format!(
            "{} expects a real matrix, got {:?}",
            what, s
        )));
    }
    Ok(s)
}

fn require_vector(t: &Tensor, what: &str) -> Result<usize> {
    let s = t.shape();
    if t.is_complex() || s.len() != 1 {
        return Err(CoreError::shape(format!(
            "{} expects a real vector, got {:?}",
            what, s
        )));
    }
    Ok(s[0])
}

fn require_feature_map(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if t.is_complex() || s.len() != 3 {
        return Err(CoreError::shape(format!(
            "{} expects a real (h, w, c) tensor, got {:?}",
            what, s
        )));
    }
    Ok((s[0], s[1], s[2]))
}

fn row_broadcast(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let s = require_matrix(a, what)?;
    let n = require_vector(b, what)?;
    if s[1] != n {
        return Err(CoreError::shape(format!(
            "{}: matrix {:?} vs row vector ({})",
            what, s, n
        )));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = f(a.data()[i * n + j], b.data()[j]);
        }
    }
    Tensor::from_real_vec(&[m, n], out)
}

fn col_broadcast(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f32, f32) -> f32,
) -> Result<Tensor> {
    let s = require_matrix(a, what)?;
    let m_b = require_vector(b, what)?;
    if s[0] != m_b {
        return Err(CoreError::shape(format!(
            "{}: matrix {:?} vs column vector ({})",
            what, s, m_b
        )));
    }
    let (m, n) = (s[0], s[1]);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let bv = b.data()[i];
        for j in 0..n {
            out[i * n + j] = f(a.data()[i * n + j], bv);
        }
    }
    Tensor::from_real_vec(&[m, n], out)
}

fn crop_tensor(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 && s.len() != 3 {
        return Err(CoreError::shape(format!(
            "crop2d expects rank 2 or 3, got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    if y0 + ch > h || x0 + cw > w {
        return Err(CoreError::shape(format!(
            "crop window {}+{} x {}+{} exceeds {}x{}",
            y0, ch, x0, cw, h, w
        )));
    }
    let slots = c * t.kind().slots();
    let mut out = Vec::with_capacity(ch * cw * slots);
    for y in 0..ch {
        let src = ((y0 + y) * w + x0) * slots;
        out.extend_from_slice(&t.data()[src..src + cw * slots]);
    }
    let mut shape = vec![ch, cw];
    if s.len() == 3 {
        shape.push(c);
    }
    Tensor::from_vec(&shape, t.kind(), out)
}

fn pad_embed_tensor(
    t: &Tensor,
    y0: usize,
    x0: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 && s.len() != 3 {
        return Err(CoreError::shape(format!(
            "pad_embed2d expects rank 2 or 3, got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let c = if s.len() == 3 { s[2] } else { 1 };
    if y0 + h > out_h || x0 + w > out_w {
        return Err(CoreError::shape(format!(
            "embed of {}x{} at ({}, {}) exceeds {}x{}",
            h, w, y0, x0, out_h, out_w
        )));
    }
    let slots = c * t.kind().slots();
    let mut shape = vec![out_h, out_w];
    if s.len() == 3 {
        shape.push(c);
    }
    let mut out = Tensor::zeros(&shape, t.kind());
    for y in 0..h {
        let src = y * w * slots;
        let dst = ((y0 + y) * out_w + x0) * slots;
        out.data_mut()[dst..dst + w * slots].copy_from_slice(&t.data()[src..src + w * slots]);
    }
    Ok(out)
}

/// Cotangents of `op`'s parents given the output cotangent `cot`.
pub(crate) fn vjp(op: &Op, parents: &[Var], out: &Var, cot: &Var) -> Result<Vec<Option<Var>>> {
    let need = |i: usize| parents[i].needs_grad();
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add => vec![Some(cot.clone()), Some(cot.clone())],
        Op::Sub => vec![Some(cot.clone()), Some(cot.neg())],
        Op::Neg => vec![Some(cot.neg())],
        Op::Mul => {
            let ga = if need(0) { Some(cot.mul(&parents[1])?) } else { None };
            let gb = if need(1) { Some(cot.mul(&parents[0])?) } else { None };
            vec![ga, gb]
        }
        Op::AddScalar => vec![Some(cot.clone())],
        Op::MulScalar(s) => vec![Some(cot.mul_scalar(*s))],
        Op::Recip => {
            // y = 1/x, dx = -y^2 * cot
            vec![Some(cot.mul(&out.square()?)?.neg())]
        }
        Op::Sqrt => {
            // dx = cot / (2 sqrt(x))
            vec![Some(cot.mul(&out.recip()?.mul_scalar(0.5))?)]
        }
        Op::LeakyRelu(slope) => {
            let mask = parents[0].with_value(|t| t.map(|v| if v >= 0.0 { 1.0 } else { *slope }));
            let mask = cot.graph.constant(mask);
            vec![Some(cot.mul(&mask)?)]
        }
        Op::Sigmoid => {
            // dx = cot * y * (1 - y)
            let one_minus = out.neg().add_scalar(1.0)?;
            vec![Some(cot.mul(&out.mul(&one_minus)?)?)]
        }
        Op::Softplus => vec![Some(cot.mul(&parents[0].sigmoid()?)?)],
        Op::SoftmaxRows => {
            // dx = y * (cot - rowsum(cot * y) broadcast)
            let n = out.shape()[1];
            let t = cot.mul(out)?;
            let rs = t.row_sum()?.broadcast_col(n)?;
            vec![Some(out.mul(&cot.sub(&rs)?)?)]
        }
        Op::Matmul => {
            let ga = if need(0) {
                Some(cot.matmul(&parents[1].transpose2()?)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(parents[0].transpose2()?.matmul(cot)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Transpose2 => vec![Some(cot.transpose2()?)],
        Op::Reshape { from } => vec![Some(cot.reshape(from)?)],
        Op::SumAll => vec![Some(cot.broadcast_scalar(&parents[0].shape())?)],
        Op::MeanAll => {
            let shape = parents[0].shape();
            let n: usize = shape.iter().product();
            vec![Some(cot.broadcast_scalar(&shape)?.mul_scalar(1.0 / n as f32))]
        }
        Op::RowSum => {
            let n = parents[0].shape()[1];
            vec![Some(cot.broadcast_col(n)?)]
        }
        Op::ColSum => {
            let m = parents[0].shape()[0];
            vec![Some(cot.broadcast_row(m)?)]
        }
        Op::BroadcastScalar => vec![Some(cot.sum_all()?)],
        Op::BroadcastRow => vec![Some(cot.col_sum()?)],
        Op::BroadcastCol => vec![Some(cot.row_sum()?)],
        Op::AddRow => {
            let gb = if need(1) { Some(cot.col_sum()?) } else { None };
            vec![Some(cot.clone()), gb]
        }
        Op::MulRow => {
            let ga = if need(0) { Some(cot.mul_row(&parents[1])?) } else { None };
            let gb = if need(1) {
                Some(cot.mul(&parents[0])?.col_sum()?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::AddCol => {
            let gb = if need(1) { Some(cot.row_sum()?) } else { None };
            vec![Some(cot.clone()), gb]
        }
        Op::MulCol => {
            let ga = if need(0) { Some(cot.mul_col(&parents[1])?) } else { None };
            let gb = if need(1) {
                Some(cot.mul(&parents[0])?.row_sum()?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::ScaleByScalar => {
            let ga = if need(0) {
                Some(cot.scale_by_scalar(&parents[1])?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(cot.mul(&parents[0])?.sum_all()?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Conv2d { stride, pad } => {
            let ks = parents[1].shape();
            let xs = parents[0].shape();
            let ga = if need(0) {
                Some(cot.conv_input_adjoint(&parents[1], *stride, *pad, (xs[0], xs[1]))?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(parents[0].conv_kernel_adjoint(cot, *stride, *pad, ks[0])?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::ConvInputAdjoint { stride, pad } => {
            let ks = parents[1].shape();
            let ga = if need(0) {
                Some(cot.conv2d_strided(&parents[1], *stride, *pad)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(cot.conv_kernel_adjoint(&parents[0], *stride, *pad, ks[0])?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::ConvKernelAdjoint => {
            return Err(CoreError::contract(
                "differentiating through a kernel adjoint is not supported".to_string(),
            ));
        }
        Op::AvgPool2 => vec![Some(cot.avgunpool2()?)],
        Op::AvgUnpool2 => vec![Some(cot.avgpool2()?)],
        Op::Crop2d { y0, x0, from_h, from_w } => {
            vec![Some(cot.pad_embed2d(*y0, *x0, *from_h, *from_w)?)]
        }
        Op::PadEmbed2d { y0, x0 } => {
            let s = parents[0].shape();
            vec![Some(cot.crop2d(*y0, *x0, s[0], s[1])?)]
        }
        Op::Fft2 { inverse } => {
            let g = if *inverse { cot.fft2()? } else { cot.ifft2()? };
            vec![Some(g)]
        }
        Op::CMul => {
            let ga = if need(0) {
                Some(cot.cmul(&parents[1].conj()?)?)
            } else {
                None
            };
            let gb = if need(1) {
                Some(cot.cmul(&parents[0].conj()?)?)
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Conj => vec![Some(cot.conj()?)],
        Op::Modulus => vec![Some(cot.modulus_vjp(&parents[0])?)],
        Op::ModulusVjp => {
            return Err(CoreError::contract(
                "differentiating through a modulus adjoint is not supported".to_string(),
            ));
        }
        Op::ChannelsToComplex => vec![Some(cot.complex_to_channels()?)],
        Op::ComplexToChannels => vec![Some(cot.channels_to_complex()?)],
    })
}
