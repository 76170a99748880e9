//! PSNR and SSIM between magnitude images, normalized to a reference
//! maximum of 1 prior to measurement.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub normalization: String,
}

impl MetricReport {
    /// key=value lines for metrics.txt.
    pub fn to_key_values(&self) -> String {
        let psnr = if self.psnr_db.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.6}", self.psnr_db)
        };
        format!(
            "psnr_db = {}\nssim = {:.6}\nnormalization = {}\n",
            psnr, self.ssim, self.normalization
        )
    }
}

fn magnitude_plane(t: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(CoreError::shape(format!(
            "metrics expect (h, w) images, got {:?}",
            s
        )));
    }
    let (h, w) = (s[0], s[1]);
    let mag: Vec<f64> = if t.is_complex() {
        (0..h * w)
            .map(|i| {
                let (re, im) = t.complex(i);
                (re as f64).hypot(im as f64)
            })
            .collect()
    } else {
        t.data().iter().map(|&v| (v as f64).abs()).collect()
    };
    Ok((mag, h, w))
}

/// Magnitudes of recon and reference, both scaled so the reference peak
/// is 1 (peak-1 dynamic range with errors preserved on the recon side).
fn normalized_pair(recon: &Tensor, reference: &Tensor) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if recon.shape() != reference.shape() {
        return Err(CoreError::shape(format!(
            "image extents differ: {:?} vs {:?}",
            recon.shape(),
            reference.shape()
        )));
    }
    let (mut a, h, w) = magnitude_plane(recon)?;
    let (mut b, _, _) = magnitude_plane(reference)?;
    let peak = b.iter().cloned().fold(0.0f64, f64::max);
    if peak > 0.0 {
        for v in a.iter_mut() {
            *v /= peak;
        }
        for v in b.iter_mut() {
            *v /= peak;
        }
    }
    Ok((a, b, h, w))
}

/// Peak signal-to-noise ratio in dB with peak 1 after normalization.
/// Identical images report +infinity.
pub fn psnr(recon: &Tensor, reference: &Tensor) -> Result<f64> {
    let (a, b, _, _) = normalized_pair(recon, reference)?;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= s;
    }
    w
}

/// Valid-region separable correlation with a 1D window along both axes.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * img[y * w + x + k];
            }
            tmp[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                s += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean local SSIM over valid 11x11 Gaussian windows, dynamic range 1.
pub fn ssim(recon: &Tensor, reference: &Tensor) -> Result<f64> {
    let (a, b, h, w) = normalized_pair(recon, reference)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::config(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(&a, h, w, &win);
    let mu_b = filter_valid(&b, h, w, &win);
    let m_aa = filter_valid(&aa, h, w, &win);
    let m_bb = filter_valid(&bb, h, w, &win);
    let m_ab = filter_valid(&ab, h, w, &win);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut acc = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = m_aa[i] - ma * ma;
        let vb = m_bb[i] - mb * mb;
        let cov = m_ab[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(acc / mu_a.len() as f64)
}

/// Both metrics at once, with the normalization recorded.
pub fn evaluate(recon: &Tensor, reference: &Tensor) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(recon, reference)?,
        ssim: ssim(recon, reference)?,
        normalization: "reference-peak-1".to_string(),
    })
}
