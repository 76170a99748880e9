//! Raw array kernels behind the graph ops.
//!
//! Feature maps are row-major channels-last (h, w, c); kernels are
//! (r, r, c_in, c_out). Parallel loops only ever write disjoint output
//! rows, so results are bitwise deterministic for a fixed input.

use rayon::prelude::*;

/// Work threshold below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] = A[m,k] @ B[k,n].
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let body = |(i, row): (usize, &mut [f32])| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(body);
    } else {
        out.chunks_mut(n).enumerate().for_each(body);
    }
    out
}

/// Output spatial extent of a strided convolution.
pub fn conv_out_extent(h: usize, r: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - r) / stride + 1
}

/// Dense 2D convolution (cross-correlation), zero padding.
///
/// x: (h, w, ci), kernel: (r, r, ci, co), output: (oh, ow, co).
pub fn conv2d(
    x: &[f32],
    h: usize,
    w: usize,
    ci: usize,
    kernel: &[f32],
    r: usize,
    co: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let oh = conv_out_extent(h, r, stride, pad);
    let ow = conv_out_extent(w, r, stride, pad);
    let mut out = vec![0.0f32; oh * ow * co];
    let body = |(oy, orow): (usize, &mut [f32])| {
        for ox in 0..ow {
            let acc = &mut orow[ox * co..(ox + 1) * co];
            for dy in 0..r {
                let y = (oy * stride + dy) as isize - pad as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..r {
                    let xx = (ox * stride + dx) as isize - pad as isize;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    let xoff = (y as usize * w + xx as usize) * ci;
                    let koff = (dy * r + dx) * ci * co;
                    for c in 0..ci {
                        let xv = x[xoff + c];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kernel[koff + c * co..koff + (c + 1) * co];
                        for (a, &kv) in acc.iter_mut().zip(krow.iter()) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    };
    if oh * ow * co * ci * r * r >= PAR_THRESHOLD {
        out.par_chunks_mut(ow * co).enumerate().for_each(body);
    } else {
        out.chunks_mut(ow * co).enumerate().for_each(body);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
///
/// g: (oh, ow, co) cotangent, kernel: (r, r, ci, co); returns (h, w, ci).
pub fn conv2d_input_adjoint(
    g: &[f32],
    oh: usize,
    ow: usize,
    co: usize,
    kernel: &[f32],
    r: usize,
    ci: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w * ci];
    let body = |(y, xrow): (usize, &mut [f32])| {
        for dy in 0..r {
            let num = y as isize + pad as isize - dy as isize;
            if num < 0 || num % stride as isize != 0 {
                continue;
            }
            let oy = (num / stride as isize) as usize;
            if oy >= oh {
                continue;
            }
            for x in 0..w {
                let acc = &mut xrow[x * ci..(x + 1) * ci];
                for dx in 0..r {
                    let numx = x as isize + pad as isize - dx as isize;
                    if numx < 0 || numx % stride as isize != 0 {
                        continue;
                    }
                    let ox = (numx / stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let goff = (oy * ow + ox) * co;
                    let koff = (dy * r + dx) * ci * co;
                    for (c, a) in acc.iter_mut().enumerate() {
                        let krow = &kernel[koff + c * co..koff + (c + 1) * co];
                        let mut s = 0.0f32;
                        for (kv, gv) in krow.iter().zip(&g[goff..goff + co]) {
                            s += kv * gv;
                        }
                        *a += s;
                    }
                }
            }
        }
    };
    if h * w * ci * co * r * r >= PAR_THRESHOLD {
        out.par_chunks_mut(w * ci).enumerate().for_each(body);
    } else {
        out.chunks_mut(w * ci).enumerate().for_each(body);
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its kernel.
///
/// x: (h, w, ci), g: (oh, ow, co) cotangent; returns (r, r, ci, co).
pub fn conv2d_kernel_adjoint(
    x: &[f32],
    h: usize,
    w: usize,
    ci: usize,
    g: &[f32],
    oh: usize,
    ow: usize,
    co: usize,
    r: usize,
    stride: usize,
    pad: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; r * r * ci * co];
    let body = |(tap, kslice): (usize, &mut [f32])| {
        let (dy, dx) = (tap / r, tap % r);
        for oy in 0..oh {
            let y = (oy * stride + dy) as isize - pad as isize;
            if y < 0 || y >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let xx = (ox * stride + dx) as isize - pad as isize;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                let xoff = (y as usize * w + xx as usize) * ci;
                let goff = (oy * ow + ox) * co;
                for c in 0..ci {
                    let xv = x[xoff + c];
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &mut kslice[c * co..(c + 1) * co];
                    for (a, &gv) in krow.iter_mut().zip(&g[goff..goff + co]) {
                        *a += xv * gv;
                    }
                }
            }
        }
    };
    if oh * ow * ci * co * r * r >= PAR_THRESHOLD {
        out.par_chunks_mut(ci * co).enumerate().for_each(body);
    } else {
        out.chunks_mut(ci * co).enumerate().for_each(body);
    }
    out
}

/// 2x2 average pooling over (h, w, c); h and w must be even.
pub fn avgpool2(x: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0f32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        s += x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = 0.25 * s;
            }
        }
    }
    out
}

/// Adjoint of [`avgpool2`]: spread each cotangent over its 2x2 source window.
pub fn avgunpool2(g: &[f32], oh: usize, ow: usize, c: usize) -> Vec<f32> {
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = vec![0.0f32; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let v = 0.25 * g[(oy * ow + ox) * c + ch];
                for dy in 0..2 {
                    for dx in 0..2 {
                        out[((2 * oy + dy) * w + 2 * ox + dx) * c + ch] = v;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Quadruple-loop direct convolution oracle.
    fn conv2d_oracle(
        x: &[f32],
        h: usize,
        w: usize,
        ci: usize,
        kernel: &[f32],
        r: usize,
        co: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f32> {
        let oh = conv_out_extent(h, r, stride, pad);
        let ow = conv_out_extent(w, r, stride, pad);
        let mut out = vec![0.0f32; oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..co {
                    let mut acc = 0.0f64;
                    for dy in 0..r {
                        for dx in 0..r {
                            for c in 0..ci {
                                let y = (oy * stride + dy) as isize - pad as isize;
                                let xx = (ox * stride + dx) as isize - pad as isize;
                                if y < 0 || y >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                let xv = x[(y as usize * w + xx as usize) * ci + c] as f64;
                                let kv = kernel[((dy * r + dx) * ci + c) * co + oc] as f64;
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(oy * ow + ox) * co + oc] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let (h, w, c) = (5, 5, 2);
        let x = randv(h * w * c, 1);
        // 3x3 kernel with center tap = identity per channel.
        let mut k = vec![0.0f32; 3 * 3 * c * c];
        for ch in 0..c {
            k[((1 * 3 + 1) * c + ch) * c + ch] = 1.0;
        }
        let y = conv2d(&x, h, w, c, &k, 3, c, 1, 1);
        assert_eq!(x, y);
    }

    #[test]
    fn box_kernel_sums_with_zero_padding() {
        let (h, w) = (8, 8);
        let x = vec![1.0f32; h * w];
        let k = vec![1.0f32; 9];
        let y = conv2d(&x, h, w, 1, &k, 3, 1, 1, 1);
        assert_eq!(y[(3 * w + 3) as usize], 9.0, "interior pixel");
        assert_eq!(y[0], 4.0, "corner pixel");
        assert_eq!(y[1], 6.0, "edge pixel");
    }

    #[test]
    fn matches_quadruple_loop_oracle() {
        let (h, w, ci, co, r) = (5, 5, 3, 2, 3);
        let x = randv(h * w * ci, 2);
        let k = randv(r * r * ci * co, 3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let fast = conv2d(&x, h, w, ci, &k, r, co, stride, pad);
            let slow = conv2d_oracle(&x, h, w, ci, &k, r, co, stride, pad);
            for i in 0..fast.len() {
                assert!(
                    (fast[i] - slow[i]).abs() < 1e-5,
                    "stride {stride}: slot {i}: {} vs {}",
                    fast[i],
                    slow[i]
                );
            }
        }
    }

    #[test]
    fn conv_input_adjoint_satisfies_inner_product_identity() {
        let (h, w, ci, co, r) = (6, 6, 2, 3, 3);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let oh = conv_out_extent(h, r, stride, pad);
            let ow = conv_out_extent(w, r, stride, pad);
            let x = randv(h * w * ci, 4);
            let k = randv(r * r * ci * co, 5);
            let g = randv(oh * ow * co, 6);
            let ax = conv2d(&x, h, w, ci, &k, r, co, stride, pad);
            let aty = conv2d_input_adjoint(&g, oh, ow, co, &k, r, ci, stride, pad, h, w);
            let lhs: f64 = ax.iter().zip(&g).map(|(&a, &b)| a as f64 * b as f64).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(&a, &b)| a as f64 * b as f64).sum();
            assert!(
                (lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0),
                "stride {stride}: <Ax,y>={lhs} <x,Aᵀy>={rhs}"
            );
        }
    }

    #[test]
    fn conv_kernel_adjoint_satisfies_inner_product_identity() {
        let (h, w, ci, co, r, stride, pad) = (6, 6, 2, 2, 3, 2, 1);
        let oh = conv_out_extent(h, r, stride, pad);
        let ow = conv_out_extent(w, r, stride, pad);
        let x = randv(h * w * ci, 7);
        let k = randv(r * r * ci * co, 8);
        let g = randv(oh * ow * co, 9);
        let ax = conv2d(&x, h, w, ci, &k, r, co, stride, pad);
        let kg = conv2d_kernel_adjoint(&x, h, w, ci, &g, oh, ow, co, r, stride, pad);
        let lhs: f64 = ax.iter().zip(&g).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = k.iter().zip(&kg).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!(
            (lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0),
            "<Ax,y>={lhs} <k,dK>={rhs}"
        );
    }

    #[test]
    fn avgpool_pair_is_adjoint() {
        let (h, w, c) = (8, 8, 3);
        let x = randv(h * w * c, 10);
        let g = randv((h / 2) * (w / 2) * c, 11);
        let px = avgpool2(&x, h, w, c);
        let ug = avgunpool2(&g, h / 2, w / 2, c);
        let lhs: f64 = px.iter().zip(&g).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rhs: f64 = x.iter().zip(&ug).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (m, k, n) = (4, 5, 3);
        let a = randv(m * k, 12);
        let b = randv(k * n, 13);
        let c = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                assert!((c[i * n + j] - s as f32).abs() < 1e-5);
            }
        }
    }
}
