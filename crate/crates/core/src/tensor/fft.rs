//! Centered, orthonormal 2D FFT over interleaved complex storage.
//!
//! Conventions: DC sits at index (h/2, w/2) in both image and spectrum
//! (shift, transform, shift back), and both directions carry a 1/sqrt(N)
//! factor so the transform is unitary. Extents must be powers of two.
//! Butterflies run in f64 and results are stored back as f32.

use crate::error::{CoreError, Result};

pub fn is_power_of_two(n: usize) -> bool {
    n > 0 && n & (n - 1) == 0
}

/// In-place radix-2 FFT of one line, no normalization.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut start = 0;
        while start < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let a = start + k;
                let b = start + k + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            start += len;
        }
        len <<= 1;
    }
}

/// Centered orthonormal 2D FFT of an (h, w) interleaved complex slice.
///
/// `inverse = false` maps image to spectrum; `inverse = true` maps back.
pub fn fft2_centered(data: &[f32], h: usize, w: usize, inverse: bool) -> Result<Vec<f32>> {
    if !is_power_of_two(h) || !is_power_of_two(w) {
        return Err(CoreError::shape(format!(
            "fft2 requires power-of-two extents, got {}x{}",
            h, w
        )));
    }
    if data.len() != 2 * h * w {
        return Err(CoreError::shape(format!(
            "fft2 buffer length {} does not match {}x{} complex",
            data.len(),
            h,
            w
        )));
    }
    // Load into f64 planes with an ifftshift applied (centered convention;
    // for even extents ifftshift == fftshift == rotate by half).
    let mut re = vec![0.0f64; h * w];
    let mut im = vec![0.0f64; h * w];
    let (sy, sx) = (h / 2, w / 2);
    for y in 0..h {
        for x in 0..w {
            let src = ((y + sy) % h) * w + ((x + sx) % w);
            re[y * w + x] = data[2 * src] as f64;
            im[y * w + x] = data[2 * src + 1] as f64;
        }
    }
    // Rows.
    let mut row_re = vec![0.0f64; w];
    let mut row_im = vec![0.0f64; w];
    for y in 0..h {
        row_re.copy_from_slice(&re[y * w..(y + 1) * w]);
        row_im.copy_from_slice(&im[y * w..(y + 1) * w]);
        fft_line(&mut row_re, &mut row_im, inverse);
        re[y * w..(y + 1) * w].copy_from_slice(&row_re);
        im[y * w..(y + 1) * w].copy_from_slice(&row_im);
    }
    // Columns.
    let mut col_re = vec![0.0f64; h];
    let mut col_im = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col_re[y] = re[y * w + x];
            col_im[y] = im[y * w + x];
        }
        fft_line(&mut col_re, &mut col_im, inverse);
        for y in 0..h {
            re[y * w + x] = col_re[y];
            im[y * w + x] = col_im[y];
        }
    }
    // Shift back and apply the orthonormal scale.
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let mut out = vec![0.0f32; 2 * h * w];
    for y in 0..h {
        for x in 0..w {
            let dst = ((y + sy) % h) * w + ((x + sx) % w);
            out[2 * dst] = (re[y * w + x] * scale) as f32;
            out[2 * dst + 1] = (im[y * w + x] * scale) as f32;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) centered DFT used as the independent oracle.
    pub fn dft2_centered_oracle(data: &[f32], h: usize, w: usize, inverse: bool) -> Vec<f32> {
        let sign = if inverse { 1.0 } else { -1.0 };
        let scale = 1.0 / ((h * w) as f64).sqrt();
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let mut out = vec![0.0f32; 2 * h * w];
        for ky in 0..h {
            for kx in 0..w {
                let (mut acc_re, mut acc_im) = (0.0f64, 0.0f64);
                for y in 0..h {
                    for x in 0..w {
                        let ph = sign
                            * 2.0
                            * std::f64::consts::PI
                            * ((ky as f64 - cy) * (y as f64 - cy) / h as f64
                                + (kx as f64 - cx) * (x as f64 - cx) / w as f64);
                        let (c, s) = (ph.cos(), ph.sin());
                        let re = data[2 * (y * w + x)] as f64;
                        let im = data[2 * (y * w + x) + 1] as f64;
                        acc_re += re * c - im * s;
                        acc_im += re * s + im * c;
                    }
                }
                out[2 * (ky * w + kx)] = (acc_re * scale) as f32;
                out[2 * (ky * w + kx) + 1] = (acc_im * scale) as f32;
            }
        }
        out
    }

    fn rand_complex(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn delta_at_center_gives_flat_magnitude() {
        let (h, w) = (8, 8);
        let mut data = vec![0.0f32; 2 * h * w];
        data[2 * ((h / 2) * w + w / 2)] = 1.0;
        let spec = fft2_centered(&data, h, w, false).unwrap();
        let expect = 1.0 / ((h * w) as f32).sqrt();
        for k in 0..h * w {
            let mag = (spec[2 * k].powi(2) + spec[2 * k + 1].powi(2)).sqrt();
            assert!(
                (mag - expect).abs() < 1e-6,
                "bin {k}: magnitude {mag} vs {expect}"
            );
        }
    }

    #[test]
    fn parseval_under_orthonormal_scaling() {
        let (h, w) = (16, 8);
        let data = rand_complex(h * w, 1);
        let spec = fft2_centered(&data, h, w, false).unwrap();
        let n_in: f64 = data.iter().map(|&v| (v as f64).powi(2)).sum();
        let n_out: f64 = spec.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(
            ((n_in - n_out) / n_in).abs() < 1e-5,
            "Parseval violated: {n_in} vs {n_out}"
        );
    }

    #[test]
    fn roundtrip_is_identity() {
        let (h, w) = (8, 16);
        let data = rand_complex(h * w, 2);
        let spec = fft2_centered(&data, h, w, false).unwrap();
        let back = fft2_centered(&spec, h, w, true).unwrap();
        for i in 0..data.len() {
            assert!(
                (data[i] - back[i]).abs() < 1e-5 * (1.0 + data[i].abs()),
                "slot {i}: {} vs {}",
                data[i],
                back[i]
            );
        }
    }

    #[test]
    fn matches_direct_dft_oracle_on_4x4() {
        let (h, w) = (4, 4);
        let data = rand_complex(h * w, 3);
        let fast = fft2_centered(&data, h, w, false).unwrap();
        let slow = dft2_centered_oracle(&data, h, w, false);
        for i in 0..fast.len() {
            assert!(
                (fast[i] - slow[i]).abs() < 1e-5,
                "slot {i}: fast {} oracle {}",
                fast[i],
                slow[i]
            );
        }
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        let data = vec![0.0f32; 2 * 6 * 4];
        assert!(fft2_centered(&data, 6, 4, false).is_err());
    }
}
