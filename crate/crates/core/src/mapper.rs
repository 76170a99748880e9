//! The latent mapper: projects i.i.d. standard-normal raw latents onto the
//! refined local latents W_l and global latent w_g. Local latents pass
//! through four self-attention blocks plus a final fully-connected layer;
//! the global latent passes through nine fully-connected layers.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{ElemKind, Tensor};

pub const LOCAL_SA_BLOCKS: usize = 4;
pub const GLOBAL_FC_LAYERS: usize = 9;
const LEAKY_SLOPE: f32 = 0.2;
const NORM_EPS: f32 = 1e-8;
const ATTN_PROJ_GAIN: f32 = 0.1;

/// Raw latent draws: K local vectors and one global vector, each length L_s.
#[derive(Clone, Debug)]
pub struct RawLatents {
    pub local: Tensor,
    pub global: Tensor,
}

impl RawLatents {
    pub fn sample(k: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> RawLatents {
        RawLatents {
            local: Tensor::randn(&[k, latent_dim], ElemKind::Real32, rng),
            global: Tensor::randn(&[latent_dim], ElemKind::Real32, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct FcParams {
    weight: Tensor,
    bias: Tensor,
}

impl FcParams {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> FcParams {
        FcParams {
            weight: Tensor::randn(&[dim, dim], ElemKind::Real32, rng)
                .scaled(1.0 / (dim as f32).sqrt()),
            bias: Tensor::zeros(&[dim], ElemKind::Real32),
        }
    }
}

#[derive(Clone, Debug)]
struct SaBlockParams {
    query: Tensor,
    key: Tensor,
    value: Tensor,
    scale_w: Tensor,
    scale_b: Tensor,
    shift_w: Tensor,
    shift_b: Tensor,
    fc1: FcParams,
    fc2: FcParams,
}

impl SaBlockParams {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> SaBlockParams {
        let proj = |rng: &mut ChaCha8Rng| {
            Tensor::randn(&[dim, dim], ElemKind::Real32, rng).scaled(1.0 / (dim as f32).sqrt())
        };
        SaBlockParams {
            query: proj(rng),
            key: proj(rng),
            value: proj(rng),
            scale_w: proj(rng).scaled(ATTN_PROJ_GAIN),
            scale_b: Tensor::full(&[dim], 1.0),
            shift_w: proj(rng).scaled(ATTN_PROJ_GAIN),
            shift_b: Tensor::zeros(&[dim], ElemKind::Real32),
            fc1: FcParams::new(dim, rng),
            fc2: FcParams::new(dim, rng),
        }
    }
}

/// All mapper parameters.
#[derive(Clone, Debug)]
pub struct MapperState {
    pub k_local: usize,
    pub latent_dim: usize,
    pe_z: Tensor,
    local_blocks: Vec<SaBlockParams>,
    local_out: FcParams,
    global_fcs: Vec<FcParams>,
}

impl MapperState {
    pub fn new(k_local: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Result<MapperState> {
        if k_local == 0 || latent_dim == 0 {
            return Err(CoreError::config(
                "mapper needs K >= 1 and L_s >= 1".to_string(),
            ));
        }
        Ok(MapperState {
            k_local,
            latent_dim,
            pe_z: Tensor::randn(&[k_local, latent_dim], ElemKind::Real32, rng),
            local_blocks: (0..LOCAL_SA_BLOCKS)
                .map(|_| SaBlockParams::new(latent_dim, rng))
                .collect(),
            local_out: FcParams::new(latent_dim, rng),
            global_fcs: (0..GLOBAL_FC_LAYERS)
                .map(|_| FcParams::new(latent_dim, rng))
                .collect(),
        })
    }

    /// Zero the learnable latent position encoding (used by the
    /// permutation-equivariance probes).
    pub fn zero_position_encoding(&mut self) {
        self.pe_z = Tensor::zeros(&[self.k_local, self.latent_dim], ElemKind::Real32);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        f("pe_z".into(), &self.pe_z);
        for (i, b) in self.local_blocks.iter().enumerate() {
            let p = |n: &str| format!("local{}.{}", i, n);
            f(p("query"), &b.query);
            f(p("key"), &b.key);
            f(p("value"), &b.value);
            f(p("scale_w"), &b.scale_w);
            f(p("scale_b"), &b.scale_b);
            f(p("shift_w"), &b.shift_w);
            f(p("shift_b"), &b.shift_b);
            f(p("fc1.weight"), &b.fc1.weight);
            f(p("fc1.bias"), &b.fc1.bias);
            f(p("fc2.weight"), &b.fc2.weight);
            f(p("fc2.bias"), &b.fc2.bias);
        }
        f("local_out.weight".into(), &self.local_out.weight);
        f("local_out.bias".into(), &self.local_out.bias);
        for (i, fc) in self.global_fcs.iter().enumerate() {
            f(format!("global{}.weight", i), &fc.weight);
            f(format!("global{}.bias", i), &fc.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("pe_z".into(), &mut self.pe_z);
        for (i, b) in self.local_blocks.iter_mut().enumerate() {
            f(format!("local{i}.query"), &mut b.query);
            f(format!("local{i}.key"), &mut b.key);
            f(format!("local{i}.value"), &mut b.value);
            f(format!("local{i}.scale_w"), &mut b.scale_w);
            f(format!("local{i}.scale_b"), &mut b.scale_b);
            f(format!("local{i}.shift_w"), &mut b.shift_w);
            f(format!("local{i}.shift_b"), &mut b.shift_b);
            f(format!("local{i}.fc1.weight"), &mut b.fc1.weight);
            f(format!("local{i}.fc1.bias"), &mut b.fc1.bias);
            f(format!("local{i}.fc2.weight"), &mut b.fc2.weight);
            f(format!("local{i}.fc2.bias"), &mut b.fc2.bias);
        }
        f("local_out.weight".into(), &mut self.local_out.weight);
        f("local_out.bias".into(), &mut self.local_out.bias);
        for (i, fc) in self.global_fcs.iter_mut().enumerate() {
            f(format!("global{i}.weight"), &mut fc.weight);
            f(format!("global{i}.bias"), &mut fc.bias);
        }
    }

    pub fn bind(&self, graph: &Graph, grad: bool) -> BoundMapper {
        let mut leaves = Vec::new();
        let mut mk = |t: &Tensor| -> Var {
            let v = if grad {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            };
            leaves.push(v.clone());
            v
        };
        let pe_z = mk(&self.pe_z);
        let local_blocks: Vec<BoundSaBlock> = self
            .local_blocks
            .iter()
            .map(|b| BoundSaBlock {
                query: mk(&b.query),
                key: mk(&b.key),
                value: mk(&b.value),
                scale_w: mk(&b.scale_w),
                scale_b: mk(&b.scale_b),
                shift_w: mk(&b.shift_w),
                shift_b: mk(&b.shift_b),
                fc1: BoundFc {
                    weight: mk(&b.fc1.weight),
                    bias: mk(&b.fc1.bias),
                },
                fc2: BoundFc {
                    weight: mk(&b.fc2.weight),
                    bias: mk(&b.fc2.bias),
                },
            })
            .collect();
        let local_out = BoundFc {
            weight: mk(&self.local_out.weight),
            bias: mk(&self.local_out.bias),
        };
        let global_fcs = self
            .global_fcs
            .iter()
            .map(|fc| BoundFc {
                weight: mk(&fc.weight),
                bias: mk(&fc.bias),
            })
            .collect();
        BoundMapper {
            k_local: self.k_local,
            latent_dim: self.latent_dim,
            pe_z,
            local_blocks,
            local_out,
            global_fcs,
            leaves,
        }
    }
}

#[derive(Clone)]
pub struct BoundFc {
    pub weight: Var,
    pub bias: Var,
}

impl BoundFc {
    fn apply(&self, x: &Var) -> Result<Var> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

#[derive(Clone)]
pub struct BoundSaBlock {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub scale_w: Var,
    pub scale_b: Var,
    pub shift_w: Var,
    pub shift_b: Var,
    pub fc1: BoundFc,
    pub fc2: BoundFc,
}

pub struct BoundMapper {
    pub k_local: usize,
    pub latent_dim: usize,
    pub pe_z: Var,
    pub local_blocks: Vec<BoundSaBlock>,
    pub local_out: BoundFc,
    pub global_fcs: Vec<BoundFc>,
    pub leaves: Vec<Var>,
}

/// K x K attention map of one self-attention block, scale 1/sqrt(L_s).
pub fn self_attention_map(block: &BoundSaBlock, z: &Var, pe_z: &Var) -> Result<Var> {
    let dim = z.shape()[1];
    let zpe = z.add(pe_z)?;
    let queries = zpe.matmul(&block.query)?;
    let keys = zpe.matmul(&block.key)?;
    queries
        .matmul(&keys.transpose2()?)?
        .mul_scalar(1.0 / (dim as f32).sqrt())
        .softmax_rows()
}

/// One self-attention block: attention-modulated scale/shift of the
/// per-latent-normalized input, then two per-latent FC layers, plus the
/// block input.
pub fn self_attention_block(block: &BoundSaBlock, z: &Var, pe_z: &Var) -> Result<Var> {
    let dim = z.shape()[1];
    let amap = self_attention_map(block, z, pe_z)?;
    let values = z.add(pe_z)?.matmul(&block.value)?;
    let a_feat = amap.matmul(&values)?;
    // Normalize each latent vector by its own mean/std.
    let mu = z.row_sum()?.mul_scalar(1.0 / dim as f32);
    let centered = z.add_col(&mu.neg())?;
    let var = centered.square()?.row_sum()?.mul_scalar(1.0 / dim as f32);
    let sigma = var.add_scalar(NORM_EPS)?.sqrt()?;
    let z_hat = centered.mul_col(&sigma.recip()?)?;
    let scale = a_feat.matmul(&block.scale_w)?.add_row(&block.scale_b)?;
    let shift = a_feat.matmul(&block.shift_w)?.add_row(&block.shift_b)?;
    let z1 = scale.mul(&z_hat)?.add(&shift)?;
    let hidden = block.fc1.apply(&z1)?.leaky_relu(LEAKY_SLOPE)?;
    block.fc2.apply(&hidden)?.add(z)
}

impl BoundMapper {
    /// Map raw latents to (W_l, w_g).
    pub fn forward(&self, z_local: &Var, z_global: &Var) -> Result<(Var, Var)> {
        if z_local.shape() != [self.k_local, self.latent_dim] {
            return Err(CoreError::shape(format!(
                "local latents must be ({}, {}), got {:?}",
                self.k_local,
                self.latent_dim,
                z_local.shape()
            )));
        }
        let mut z = z_local.clone();
        for block in &self.local_blocks {
            z = self_attention_block(block, &z, &self.pe_z)?;
        }
        let w_local = self.local_out.apply(&z)?;

        let mut g = z_global.reshape(&[1, self.latent_dim])?;
        for (i, fc) in self.global_fcs.iter().enumerate() {
            g = fc.apply(&g)?;
            if i + 1 < self.global_fcs.len() {
                g = g.leaky_relu(LEAKY_SLOPE)?;
            }
        }
        Ok((w_local, g.reshape(&[self.latent_dim])?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::assert_grad_close;
    use crate::tensor::graph::backward;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn output_shapes_match_contract() {
        let state = MapperState::new(4, 8, &mut rng(1)).unwrap();
        let g = Graph::new();
        let bound = state.bind(&g, false);
        let z = RawLatents::sample(4, 8, &mut rng(2));
        let zl = g.constant(z.local);
        let zg = g.constant(z.global);
        let (wl, wg) = bound.forward(&zl, &zg).unwrap();
        assert_eq!(wl.shape(), vec![4, 8]);
        assert_eq!(wg.shape(), vec![8]);
    }

    #[test]
    fn attention_map_is_k_by_k_with_unit_rows() {
        let state = MapperState::new(5, 8, &mut rng(3)).unwrap();
        let g = Graph::new();
        let bound = state.bind(&g, false);
        let z = g.constant(Tensor::randn(&[5, 8], ElemKind::Real32, &mut rng(4)));
        let amap = self_attention_map(&bound.local_blocks[0], &z, &bound.pe_z)
            .unwrap()
            .value();
        assert_eq!(amap.shape(), &[5, 5]);
        for row in 0..5 {
            let s: f32 = amap.data()[row * 5..(row + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {row} sums to {s}");
        }
    }

    #[test]
    fn single_latent_attention_is_one() {
        let state = MapperState::new(1, 8, &mut rng(5)).unwrap();
        let g = Graph::new();
        let bound = state.bind(&g, false);
        let z = g.constant(Tensor::randn(&[1, 8], ElemKind::Real32, &mut rng(6)));
        let amap = self_attention_map(&bound.local_blocks[0], &z, &bound.pe_z)
            .unwrap()
            .value();
        assert_eq!(amap.shape(), &[1, 1]);
        assert_eq!(amap.data()[0], 1.0);
    }

    /// Nested-loop oracle for one self-attention block on a 3-latent
    /// instance.
    #[test]
    fn block_matches_nested_loop_oracle() {
        let (k, d) = (3usize, 4usize);
        let state = MapperState::new(k, d, &mut rng(7)).unwrap();
        let g = Graph::new();
        let bound = state.bind(&g, false);
        let block = &bound.local_blocks[0];
        let z_t = Tensor::randn(&[k, d], ElemKind::Real32, &mut rng(8));
        let z = g.constant(z_t.clone());
        let got = self_attention_block(block, &z, &bound.pe_z).unwrap().value();

        let at = |t: &Tensor, i: usize, j: usize| t.data()[i * d + j] as f64;
        let (q, kk, v) = (block.query.value(), block.key.value(), block.value.value());
        let pe = bound.pe_z.value();
        let (sw, sb) = (block.scale_w.value(), block.scale_b.value());
        let (bw, bb) = (block.shift_w.value(), block.shift_b.value());
        let fc1 = (block.fc1.weight.value(), block.fc1.bias.value());
        let fc2 = (block.fc2.weight.value(), block.fc2.bias.value());

        let mut zpe = vec![0.0f64; k * d];
        for i in 0..k {
            for j in 0..d {
                zpe[i * d + j] = at(&z_t, i, j) + at(&pe, i, j);
            }
        }
        let mm = |a: &[f64], b: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0f64; k * d];
            for i in 0..k {
                for j in 0..d {
                    let mut s = 0.0;
                    for p in 0..d {
                        s += a[i * d + p] * at(b, p, j);
                    }
                    out[i * d + j] = s;
                }
            }
            out
        };
        let queries = mm(&zpe, &q);
        let keys = mm(&zpe, &kk);
        let vals = mm(&zpe, &v);
        let scale = 1.0 / (d as f64).sqrt();
        let mut afeat = vec![0.0f64; k * d];
        for i in 0..k {
            let mut scores = vec![0.0f64; k];
            for j in 0..k {
                let mut s = 0.0;
                for p in 0..d {
                    s += queries[i * d + p] * keys[j * d + p];
                }
                scores[j] = s * scale;
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let den: f64 = exps.iter().sum();
            for j in 0..k {
                for p in 0..d {
                    afeat[i * d + p] += exps[j] / den * vals[j * d + p];
                }
            }
        }
        let mut out = vec![0.0f64; k * d];
        for i in 0..k {
            let mu: f64 = (0..d).map(|j| at(&z_t, i, j)).sum::<f64>() / d as f64;
            let var: f64 =
                (0..d).map(|j| (at(&z_t, i, j) - mu).powi(2)).sum::<f64>() / d as f64;
            let sd = (var + NORM_EPS as f64).sqrt();
            for j in 0..d {
                let zh = (at(&z_t, i, j) - mu) / sd;
                let mut gam = sb.data()[j] as f64;
                let mut bet = bb.data()[j] as f64;
                for p in 0..d {
                    gam += afeat[i * d + p] * at(&sw, p, j);
                    bet += afeat[i * d + p] * at(&bw, p, j);
                }
                out[i * d + j] = gam * zh + bet;
            }
        }
        // FC1 -> leaky -> FC2 -> + input
        let mut h1 = vec![0.0f64; k * d];
        for i in 0..k {
            for j in 0..d {
                let mut s = fc1.1.data()[j] as f64;
                for p in 0..d {
                    s += out[i * d + p] * at(&fc1.0, p, j);
                }
                h1[i * d + j] = if s >= 0.0 { s } else { 0.2 * s };
            }
        }
        let mut fin = vec![0.0f64; k * d];
        for i in 0..k {
            for j in 0..d {
                let mut s = fc2.1.data()[j] as f64;
                for p in 0..d {
                    s += h1[i * d + p] * at(&fc2.0, p, j);
                }
                fin[i * d + j] = s + at(&z_t, i, j);
            }
        }
        for i in 0..k * d {
            assert!(
                (got.data()[i] as f64 - fin[i]).abs() < 1e-5,
                "slot {i}: {} vs {}",
                got.data()[i],
                fin[i]
            );
        }
    }

    #[test]
    fn permutation_equivariance_without_position_encoding() {
        let k = 4;
        let mut state = MapperState::new(k, 8, &mut rng(9)).unwrap();
        state.zero_position_encoding();
        let z = RawLatents::sample(k, 8, &mut rng(10));
        let perm = [2usize, 0, 3, 1];

        let run = |local: &Tensor| -> Tensor {
            let g = Graph::new();
            let bound = state.bind(&g, false);
            let zl = g.constant(local.clone());
            let zg = g.constant(z.global.clone());
            bound.forward(&zl, &zg).unwrap().0.value()
        };
        let base = run(&z.local);
        let mut permuted = Tensor::zeros(&[k, 8], ElemKind::Real32);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                permuted.data_mut()[dst * 8 + j] = z.local.data()[src * 8 + j];
            }
        }
        let out_perm = run(&permuted);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                let a = out_perm.data()[dst * 8 + j];
                let b = base.data()[src * 8 + j];
                assert!(
                    (a - b).abs() < 1e-5,
                    "latent {dst} (from {src}) slot {j}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn learned_position_encoding_breaks_equivariance() {
        let k = 4;
        let state = MapperState::new(k, 8, &mut rng(11)).unwrap();
        let z = RawLatents::sample(k, 8, &mut rng(12));
        let perm = [1usize, 0, 2, 3];
        let run = |local: &Tensor| -> Tensor {
            let g = Graph::new();
            let bound = state.bind(&g, false);
            let zl = g.constant(local.clone());
            let zg = g.constant(z.global.clone());
            bound.forward(&zl, &zg).unwrap().0.value()
        };
        let base = run(&z.local);
        let mut permuted = Tensor::zeros(&[k, 8], ElemKind::Real32);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                permuted.data_mut()[dst * 8 + j] = z.local.data()[src * 8 + j];
            }
        }
        let out_perm = run(&permuted);
        let mut max_dev = 0.0f32;
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                max_dev = max_dev
                    .max((out_perm.data()[dst * 8 + j] - base.data()[src * 8 + j]).abs());
            }
        }
        assert!(
            max_dev > 1e-4,
            "generic learned encodings should break equivariance, max dev {max_dev}"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let state = MapperState::new(4, 8, &mut rng(13)).unwrap();
        let z = RawLatents::sample(4, 8, &mut rng(14));
        let run = || {
            let g = Graph::new();
            let bound = state.bind(&g, false);
            let zl = g.constant(z.local.clone());
            let zg = g.constant(z.global.clone());
            let (wl, wg) = bound.forward(&zl, &zg).unwrap();
            (wl.value(), wg.value())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn gradients_pass_finite_difference() {
        let state = MapperState::new(3, 4, &mut rng(15)).unwrap();
        let z = RawLatents::sample(3, 4, &mut rng(16));
        let w_local = Tensor::randn(&[3, 4], ElemKind::Real32, &mut rng(17));
        let w_global = Tensor::randn(&[4], ElemKind::Real32, &mut rng(18));

        let loss_of = |st: &MapperState, zl_t: &Tensor| -> f32 {
            let g = Graph::new();
            let bound = st.bind(&g, false);
            let zl = g.constant(zl_t.clone());
            let zg = g.constant(z.global.clone());
            let (wl, wg) = bound.forward(&zl, &zg).unwrap();
            let cw = g.constant(w_local.clone());
            let cg = g.constant(w_global.clone());
            let a = wl.mul(&cw).unwrap().sum_all().unwrap();
            let b = wg
                .reshape(&[1, 4])
                .unwrap()
                .mul(&cg.reshape(&[1, 4]).unwrap())
                .unwrap()
                .sum_all()
                .unwrap();
            a.add(&b).unwrap().scalar_value().unwrap()
        };

        // Analytic gradient w.r.t. the raw local latents.
        let g = Graph::new();
        let bound = state.bind(&g, true);
        let zl = g.leaf(z.local.clone());
        let zg = g.constant(z.global.clone());
        let (wl, wg) = bound.forward(&zl, &zg).unwrap();
        let cw = g.constant(w_local.clone());
        let cg = g.constant(w_global.clone());
        let loss = wl
            .mul(&cw)
            .unwrap()
            .sum_all()
            .unwrap()
            .add(
                &wg.reshape(&[1, 4])
                    .unwrap()
                    .mul(&cg.reshape(&[1, 4]).unwrap())
                    .unwrap()
                    .sum_all()
                    .unwrap(),
            )
            .unwrap();
        let grads = backward(&loss).unwrap();
        let mut f = |t: &Tensor| -> crate::error::Result<f32> { Ok(loss_of(&state, t)) };
        assert_grad_close(&mut f, &z.local, &grads.grad_tensor(&zl), 1e-2, 2e-2, "mapper_z");

        // And w.r.t. one attention projection.
        let q0 = state.local_blocks[1].query.clone();
        let analytic_q = grads.grad_tensor(&bound.local_blocks[1].query);
        let mut fq = |t: &Tensor| -> crate::error::Result<f32> {
            let mut st = state.clone();
            st.local_blocks[1].query = t.clone();
            Ok(loss_of(&st, &z.local))
        };
        assert_grad_close(&mut fq, &q0, &analytic_q, 1e-2, 2e-2, "mapper_query");
    }
}
