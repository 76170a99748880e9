//! Accelerated-acquisition forward model: variable-density sampling masks,
//! simulated coil sensitivities, the masked multi-coil Fourier operator and
//! its adjoint, coil combination, and phantom generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::fft::fft2_centered;
use crate::tensor::{ElemKind, Tensor};

/// Extent of the always-sampled central k-space block.
pub const DC_BLOCK: usize = 4;
/// Guard added to the coil-combination denominator.
const COMBINE_EPS: f64 = 1e-12;

/// Binary k-space sampling pattern with its provenance.
#[derive(Clone, Debug)]
pub struct SamplingMask {
    /// Real (h, w) tensor of 0/1 entries.
    pub mask: Tensor,
    pub target_r: f64,
    pub realized_r: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn extents(&self) -> (usize, usize) {
        (self.mask.shape()[0], self.mask.shape()[1])
    }

    pub fn sampled_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v != 0.0).count()
    }
}

/// Variable-density random mask: per-location sampling probability follows
/// a centered isotropic Gaussian whose width is bisected until the realized
/// acceleration lands within 10% of the target. The central 4x4 block is
/// always sampled, and the same seed always yields the same mask.
pub fn generate_vdrs_mask(h1: usize, h2: usize, r: f64, seed: u64) -> Result<SamplingMask> {
    if r < 1.0 {
        return Err(CoreError::config(format!("acceleration {} must be >= 1", r)));
    }
    let total = h1 * h2;
    if r == 1.0 {
        return Ok(SamplingMask {
            mask: Tensor::full(&[h1, h2], 1.0),
            target_r: 1.0,
            realized_r: 1.0,
            seed,
        });
    }
    let target = total as f64 / r;
    if target < (DC_BLOCK * DC_BLOCK) as f64 {
        return Err(CoreError::config(format!(
            "acceleration {} leaves fewer samples than the forced {}x{} center block",
            r, DC_BLOCK, DC_BLOCK
        )));
    }
    // One uniform draw per location, fixed across the bisection.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..total).map(|_| rng.gen::<f64>()).collect();
    let (cy, cx) = (h1 as f64 / 2.0, h2 as f64 / 2.0);
    let d2: Vec<f64> = (0..total)
        .map(|i| {
            let (y, x) = ((i / h2) as f64, (i % h2) as f64);
            (y - cy).powi(2) + (x - cx).powi(2)
        })
        .collect();
    let in_dc = |i: usize| -> bool {
        let (y, x) = (i / h2, i % h2);
        let (y0, x0) = (h1 / 2 - DC_BLOCK / 2, h2 / 2 - DC_BLOCK / 2);
        y >= y0 && y < y0 + DC_BLOCK && x >= x0 && x < x0 + DC_BLOCK
    };
    let count_at = |sigma: f64| -> usize {
        let inv = 1.0 / (2.0 * sigma * sigma);
        (0..total)
            .filter(|&i| in_dc(i) || draws[i] <= (-d2[i] * inv).exp())
            .count()
    };
    let (mut lo, mut hi) = (1e-3, 16.0 * h1.max(h2) as f64);
    if (count_at(hi) as f64) < target {
        return Err(CoreError::config(format!(
            "target acceleration {} is not reachable on a {}x{} grid",
            r, h1, h2
        )));
    }
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if (count_at(mid) as f64) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = hi;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut mask = Tensor::zeros(&[h1, h2], ElemKind::Real32);
    let mut count = 0usize;
    for i in 0..total {
        if in_dc(i) || draws[i] <= (-d2[i] * inv).exp() {
            mask.data_mut()[i] = 1.0;
            count += 1;
        }
    }
    let realized_r = total as f64 / count as f64;
    if (realized_r - r).abs() > 0.1 * r {
        return Err(CoreError::config(format!(
            "bisection landed at acceleration {:.3}, outside 10% of target {}",
            realized_r, r
        )));
    }
    Ok(SamplingMask {
        mask,
        target_r: r,
        realized_r,
        seed,
    })
}

/// Complex receive sensitivities, one (h, w) map per coil, normalized so the
/// pointwise sum of squared magnitudes is 1.
#[derive(Clone, Debug)]
pub struct CoilSet {
    pub maps: Vec<Tensor>,
}

impl CoilSet {
    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.maps[0].shape()[0], self.maps[0].shape()[1])
    }

    /// Stack into one (coils, h, w) complex tensor.
    pub fn stacked(&self) -> Tensor {
        let (h, w) = self.extents();
        let mut data = Vec::with_capacity(self.maps.len() * 2 * h * w);
        for m in &self.maps {
            data.extend_from_slice(m.data());
        }
        Tensor::from_vec(&[self.maps.len(), h, w], ElemKind::Complex64, data).unwrap()
    }

    /// Rebuild from a stacked (coils, h, w) complex tensor.
    pub fn from_stacked(t: &Tensor) -> Result<CoilSet> {
        let s = t.shape();
        if !t.is_complex() || s.len() != 3 {
            return Err(CoreError::shape(format!(
                "coil stack must be complex (coils, h, w), got {:?}",
                s
            )));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        let maps = (0..n)
            .map(|c| {
                let off = c * 2 * h * w;
                Tensor::from_vec(
                    &[h, w],
                    ElemKind::Complex64,
                    t.data()[off..off + 2 * h * w].to_vec(),
                )
                .unwrap()
            })
            .collect();
        Ok(CoilSet { maps })
    }
}

/// Smooth Gaussian-lobe sensitivities centered at equally spaced boundary
/// angles with linearly varying phase. A single coil degenerates to the
/// constant unit map.
pub fn simulate_coils(h1: usize, h2: usize, n_coils: usize) -> Result<CoilSet> {
    if n_coils == 0 {
        return Err(CoreError::config("need at least one coil".to_string()));
    }
    if n_coils == 1 {
        let mut m = Tensor::zeros(&[h1, h2], ElemKind::Complex64);
        for i in 0..h1 * h2 {
            m.set_complex(i, 1.0, 0.0);
        }
        return Ok(CoilSet { maps: vec![m] });
    }
    let (cy, cx) = (h1 as f64 / 2.0, h2 as f64 / 2.0);
    let radius = 0.5 * h1.min(h2) as f64;
    let width = 0.55 * h1.max(h2) as f64;
    let mut maps: Vec<Tensor> = Vec::with_capacity(n_coils);
    for c in 0..n_coils {
        let phi = 2.0 * std::f64::consts::PI * c as f64 / n_coils as f64;
        let (ly, lx) = (cy + radius * phi.sin(), cx + radius * phi.cos());
        // Mild linear phase ramp, orientation tied to the coil angle.
        let (py, px) = (0.15 * phi.sin() / h1 as f64, 0.15 * phi.cos() / h2 as f64);
        let mut m = Tensor::zeros(&[h1, h2], ElemKind::Complex64);
        for y in 0..h1 {
            for x in 0..h2 {
                let d2 = (y as f64 - ly).powi(2) + (x as f64 - lx).powi(2);
                let mag = (-d2 / (2.0 * width * width)).exp();
                let ph =
                    2.0 * std::f64::consts::PI * (py * (y as f64 - cy) + px * (x as f64 - cx));
                m.set_complex(y * h2 + x, (mag * ph.cos()) as f32, (mag * ph.sin()) as f32);
            }
        }
        maps.push(m);
    }
    // Normalize to unit sum-of-squares per pixel.
    for i in 0..h1 * h2 {
        let norm: f64 = maps
            .iter()
            .map(|m| {
                let (re, im) = m.complex(i);
                (re as f64).powi(2) + (im as f64).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        for m in maps.iter_mut() {
            let (re, im) = m.complex(i);
            m.set_complex(i, (re as f64 / norm) as f32, (im as f64 / norm) as f32);
        }
    }
    Ok(CoilSet { maps })
}

/// The composite imaging operator A = M ∘ F ∘ C.
#[derive(Clone, Debug)]
pub struct ImagingOperatorSpec {
    pub mask: SamplingMask,
    pub coils: CoilSet,
}

impl ImagingOperatorSpec {
    pub fn new(mask: SamplingMask, coils: CoilSet) -> Result<ImagingOperatorSpec> {
        if mask.extents() != coils.extents() {
            return Err(CoreError::shape(format!(
                "mask {:?} and coils {:?} extents differ",
                mask.extents(),
                coils.extents()
            )));
        }
        Ok(ImagingOperatorSpec { mask, coils })
    }

    pub fn extents(&self) -> (usize, usize) {
        self.mask.extents()
    }

    pub fn n_coils(&self) -> usize {
        self.coils.n_coils()
    }

    /// Forward model: per coil, y_c = M ⊙ F(C_c ⊙ m). Returns (coils, h, w).
    pub fn apply_forward(&self, m: &Tensor) -> Result<Tensor> {
        let (h, w) = self.extents();
        check_image(m, h, w)?;
        let mut data = Vec::with_capacity(self.n_coils() * 2 * h * w);
        for coil in &self.coils.maps {
            let proj = coil.cmul_tensor(m)?;
            let mut spec = fft2_centered(proj.data(), h, w, false)?;
            for i in 0..h * w {
                let mv = self.mask.mask.data()[i];
                spec[2 * i] *= mv;
                spec[2 * i + 1] *= mv;
            }
            data.extend_from_slice(&spec);
        }
        Tensor::from_vec(&[self.n_coils(), h, w], ElemKind::Complex64, data)
    }

    /// Adjoint model: x = Σ_c conj(C_c) ⊙ F⁻¹(M ⊙ y_c). This is the
    /// zero-filled reconstruction when fed acquired k-space.
    pub fn apply_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        let (h, w) = self.extents();
        let s = y.shape();
        if !y.is_complex() || s != [self.n_coils(), h, w] {
            return Err(CoreError::shape(format!(
                "adjoint input must be complex ({}, {}, {}), got {:?}",
                self.n_coils(),
                h,
                w,
                s
            )));
        }
        let mut out = Tensor::zeros(&[h, w], ElemKind::Complex64);
        for (c, coil) in self.coils.maps.iter().enumerate() {
            let off = c * 2 * h * w;
            let mut masked = y.data()[off..off + 2 * h * w].to_vec();
            for i in 0..h * w {
                let mv = self.mask.mask.data()[i];
                masked[2 * i] *= mv;
                masked[2 * i + 1] *= mv;
            }
            let img = fft2_centered(&masked, h, w, true)?;
            for i in 0..h * w {
                let (cr, ci) = coil.complex(i);
                let (yr, yi) = (img[2 * i], img[2 * i + 1]);
                // conj(C) * img
                let re = cr * yr + ci * yi;
                let im = cr * yi - ci * yr;
                out.data_mut()[2 * i] += re;
                out.data_mut()[2 * i + 1] += im;
            }
        }
        Ok(out)
    }
}

/// Conjugate-weighted linear combination of per-coil images:
/// Σ_c conj(C_c) x_c / (Σ_c |C_c|² + ε) pointwise.
pub fn coil_combine(coil_images: &Tensor, coils: &CoilSet) -> Result<Tensor> {
    let (h, w) = coils.extents();
    let s = coil_images.shape();
    if !coil_images.is_complex() || s != [coils.n_coils(), h, w] {
        return Err(CoreError::shape(format!(
            "coil images must be complex ({}, {}, {}), got {:?}",
            coils.n_coils(),
            h,
            w,
            s
        )));
    }
    let mut out = Tensor::zeros(&[h, w], ElemKind::Complex64);
    for i in 0..h * w {
        let (mut nr, mut ni, mut den) = (0.0f64, 0.0f64, 0.0f64);
        for (c, coil) in coils.maps.iter().enumerate() {
            let (cr, ci) = coil.complex(i);
            let off = c * h * w + i;
            let (xr, xi) = coil_images.complex(off);
            nr += cr as f64 * xr as f64 + ci as f64 * xi as f64;
            ni += cr as f64 * xi as f64 - ci as f64 * xr as f64;
            den += (cr as f64).powi(2) + (ci as f64).powi(2);
        }
        den += COMBINE_EPS;
        out.set_complex(i, (nr / den) as f32, (ni / den) as f32);
    }
    Ok(out)
}

// ── Phantoms ─────────────────────────────────────────────────────────

/// 5x7 bitmaps for digits 0-9, row-major, one bit per column.
const DIGIT_FONT: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

/// Unit-intensity digit glyphs at the four corners of a zero background,
/// rendered as a complex image with zero imaginary part, plus white
/// Gaussian noise of the requested variance on the real channel.
pub fn make_digit_phantom(
    h: usize,
    noise_variance: f64,
    digits: &[u8; 4],
    seed: u64,
) -> Result<Tensor> {
    if noise_variance < 0.0 {
        return Err(CoreError::config("noise variance must be >= 0".to_string()));
    }
    for &d in digits {
        if d > 9 {
            return Err(CoreError::config(format!("digit {} out of range", d)));
        }
    }
    let mut img = Tensor::zeros(&[h, h], ElemKind::Complex64);
    let scale = (h / 16).max(1);
    let (gw, gh) = (5 * scale, 7 * scale);
    let margin = h / 8;
    let anchors = [
        (margin, margin),
        (margin, h - margin - gw),
        (h - margin - gh, margin),
        (h - margin - gh, h - margin - gw),
    ];
    for (glyph, &(ay, ax)) in digits.iter().zip(anchors.iter()) {
        let bitmap = &DIGIT_FONT[*glyph as usize];
        for (ry, row) in bitmap.iter().enumerate() {
            for rx in 0..5 {
                if row >> (4 - rx) & 1 == 0 {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        let (y, x) = (ay + ry * scale + sy, ax + rx * scale + sx);
                        if y < h && x < h {
                            img.data_mut()[2 * (y * h + x)] = 1.0;
                        }
                    }
                }
            }
        }
    }
    if noise_variance > 0.0 {
        let std = noise_variance.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..h * h {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            img.data_mut()[2 * i] += (n * std) as f32;
        }
    }
    Ok(img)
}

/// Parameters of one elliptical blob.
#[derive(Clone, Copy)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    value: f64,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn blob_params(h: usize, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let hf = h as f64;
    let mut blobs = Vec::new();
    // Outer ring (bright) and interior.
    let (cy, cx) = (
        hf * (0.5 + rng.gen_range(-0.02..0.02)),
        hf * (0.5 + rng.gen_range(-0.02..0.02)),
    );
    let (ry, rx) = (
        hf * rng.gen_range(0.36..0.42),
        hf * rng.gen_range(0.30..0.36),
    );
    blobs.push(Blob {
        cy,
        cx,
        ry,
        rx,
        angle: 0.0,
        value: 1.0,
    });
    blobs.push(Blob {
        cy,
        cx,
        ry: ry * 0.88,
        rx: rx * 0.88,
        angle: 0.0,
        value: -0.55,
    });
    // Internal structures.
    let n = rng.gen_range(2..5);
    for _ in 0..n {
        blobs.push(Blob {
            cy: cy + hf * rng.gen_range(-0.18..0.18),
            cx: cx + hf * rng.gen_range(-0.15..0.15),
            ry: hf * rng.gen_range(0.04..0.12),
            rx: hf * rng.gen_range(0.04..0.12),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            value: rng.gen_range(-0.25..0.35),
        });
    }
    blobs
}

fn render_blobs(h: usize, blobs: &[Blob]) -> Tensor {
    let mut field = vec![0.0f64; h * h];
    for y in 0..h {
        for x in 0..h {
            let mut v = 0.0;
            for b in blobs {
                if b.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    v += b.value;
                }
            }
            field[y * h + x] = v.max(0.0);
        }
    }
    // Two passes of 3x3 box smoothing, then peak-normalize.
    for _ in 0..2 {
        let src = field.clone();
        for y in 0..h {
            for x in 0..h {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < h as i64 {
                            s += src[yy as usize * h + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                field[y * h + x] = s / n;
            }
        }
    }
    let peak = field.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
    let mut img = Tensor::zeros(&[h, h], ElemKind::Complex64);
    for i in 0..h * h {
        img.data_mut()[2 * i] = (field[i] / peak) as f32;
    }
    img
}

/// Procedural brain-like phantom: elliptical ring plus random smooth
/// internal structures, peak-normalized, zero imaginary part.
pub fn make_brain_phantom(h: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs = blob_params(h, &mut rng);
    render_blobs(h, &blobs)
}

/// A stack of structurally correlated slices: blob parameters drift
/// linearly between two seeded endpoint configurations.
pub fn make_phantom_volume(h: usize, n_slices: usize, seed: u64) -> Vec<Tensor> {
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b9));
    let a = blob_params(h, &mut rng_a);
    let b = blob_params(h, &mut rng_b);
    let n_blobs = a.len().min(b.len());
    (0..n_slices)
        .map(|s| {
            let t = if n_slices > 1 {
                s as f64 / (n_slices - 1) as f64
            } else {
                0.0
            };
            let blobs: Vec<Blob> = (0..n_blobs)
                .map(|i| Blob {
                    cy: lerp(a[i].cy, b[i].cy, t),
                    cx: lerp(a[i].cx, b[i].cx, t),
                    ry: lerp(a[i].ry, b[i].ry, t),
                    rx: lerp(a[i].rx, b[i].rx, t),
                    angle: lerp(a[i].angle, b[i].angle, t),
                    value: lerp(a[i].value, b[i].value, t),
                })
                .collect();
            render_blobs(h, &blobs)
        })
        .collect()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn check_image(m: &Tensor, h: usize, w: usize) -> Result<()> {
    if !m.is_complex() || m.shape() != [h, w] {
        return Err(CoreError::shape(format!(
            "expected complex ({}, {}) image, got {:?} {:?}",
            h,
            w,
            m.kind(),
            m.shape()
        )));
    }
    Ok(())
}
