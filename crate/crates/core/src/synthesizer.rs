//! The image generator: a learnable constant input refined through
//! progressively upsampled cross-attention transformer blocks into a
//! two-channel (real, imaginary) complex image.
//!
//! Each transformer block is the cascade cross-attention -> noise ->
//! style-modulated convolution -> cross-attention -> noise, added onto the
//! upsampled block input. The first layer consumes the constant directly
//! and replaces its first attention sub-block with the identity; the last
//! layer is upsample + modulated convolution only.


use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{ElemKind, Tensor};

pub const IN_EPS: f32 = 1e-8;
pub const DEMOD_EPS: f32 = 1e-8;
pub const LEAKY_SLOPE: f32 = 0.2;
/// Initial learnable gain on injected noise. Nonzero so that noise maps
/// receive gradient even when gains are frozen.
pub const NOISE_ALPHA_INIT: f32 = 0.1;
/// Damping on the attention scale/shift projection weights at init; the
/// biases start at (1, 0) so the sub-block opens near the identity.
const ATTN_PROJ_GAIN: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizerConfig {
    pub n_layers: usize,
    pub base_resolution: usize,
    pub final_resolution: usize,
    /// Feature channels per layer; the last layer's modulated convolution
    /// maps channels[n_layers-1] down to 2 output channels.
    pub channels: Vec<usize>,
    /// Number of local latents K.
    pub k_local: usize,
    /// Latent dimensionality L_s.
    pub latent_dim: usize,
    pub kernel_size: usize,
}

impl SynthesizerConfig {
    /// 5-layer 64x64 configuration used throughout the toy-scale runs.
    pub fn toy_64() -> SynthesizerConfig {
        SynthesizerConfig {
            n_layers: 5,
            base_resolution: 4,
            final_resolution: 64,
            channels: vec![64, 64, 32, 32, 16],
            k_local: 16,
            latent_dim: 32,
            kernel_size: 3,
        }
    }

    /// Derive a configuration for a target output resolution.
    pub fn for_resolution(resolution: usize) -> Result<SynthesizerConfig> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(CoreError::config(format!(
                "resolution {} must be a power of two >= 8",
                resolution
            )));
        }
        let n_layers = (resolution / 4).trailing_zeros() as usize + 1;
        let schedule = [64usize, 64, 32, 32, 16, 16, 8, 8];
        let channels = schedule[..n_layers].to_vec();
        let cfg = SynthesizerConfig {
            n_layers,
            base_resolution: 4,
            final_resolution: resolution,
            channels,
            k_local: 16,
            latent_dim: 32,
            kernel_size: 3,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.channels.len() != self.n_layers {
            return Err(CoreError::config(format!(
                "need one channel count per layer: {} layers vs {:?}",
                self.n_layers, self.channels
            )));
        }
        if self.final_resolution != self.base_resolution << (self.n_layers - 1) {
            return Err(CoreError::config(format!(
                "final resolution {} != base {} * 2^{}",
                self.final_resolution,
                self.base_resolution,
                self.n_layers - 1
            )));
        }
        if self.k_local == 0 || self.latent_dim == 0 {
            return Err(CoreError::config(
                "latent counts must be at least 1".to_string(),
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CoreError::config("kernel size must be odd".to_string()));
        }
        Ok(())
    }

    /// Spatial extent at a (0-based) layer index.
    pub fn resolution_at(&self, layer: usize) -> usize {
        self.base_resolution << layer
    }

    fn has_ca1(&self, layer: usize) -> bool {
        layer > 0 && layer + 1 < self.n_layers
    }

    fn has_ca2(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers
    }

    fn has_noise(&self, layer: usize) -> bool {
        layer + 1 < self.n_layers
    }

    /// Number of segregated latent slots (CA and SC sub-blocks that take a
    /// latent input), given the first/last-layer structure.
    pub fn latent_slot_count(&self) -> usize {
        (0..self.n_layers)
            .map(|i| {
                1 + self.has_ca1(i) as usize + self.has_ca2(i) as usize
            })
            .sum()
    }
}

// ── Positional encodings ─────────────────────────────────────────────

/// Sinusoidal positional base for an (h, w, u) feature map, vectorized to
/// (h*w, u). Channels split into four bands: sin/cos of the width
/// coordinate then sin/cos of the height coordinate, with the in-band
/// channel position controlling the frequency divisor.
pub fn sinusoidal_base(h: usize, w: usize, u: usize) -> Tensor {
    let mut data = vec![0.0f32; h * w * u];
    for y in 0..h {
        let loc1 = if h > 1 { -1.0 + 2.0 * y as f64 / (h - 1) as f64 } else { 0.0 };
        for x in 0..w {
            let loc2 = if w > 1 { -1.0 + 2.0 * x as f64 / (w - 1) as f64 } else { 0.0 };
            for e in 0..u {
                let t = 4.0 * e as f64 / u as f64;
                let band = (t.floor() as usize).min(3);
                let frac = t - band as f64;
                let div = 10000f64.powf(frac);
                let v = match band {
                    0 => (loc2 / div).sin(),
                    1 => (loc2 / div).cos(),
                    2 => (loc1 / div).sin(),
                    _ => (loc1 / div).cos(),
                };
                data[(y * w + x) * u + e] = v as f32;
            }
        }
    }
    Tensor::from_real_vec(&[h * w, u], data).unwrap()
}

// ── Parameter containers ─────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub scale_w: Tensor,
    pub scale_b: Tensor,
    pub shift_w: Tensor,
    pub shift_b: Tensor,
    pub pe_proj: Tensor,
}

impl CrossAttentionParams {
    fn new(u: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> CrossAttentionParams {
        CrossAttentionParams {
            query: scaled_randn(&[u, u], u, 1.0, rng),
            key: scaled_randn(&[latent_dim, u], latent_dim, 1.0, rng),
            value: scaled_randn(&[latent_dim, u], latent_dim, 1.0, rng),
            scale_w: scaled_randn(&[u, u], u, ATTN_PROJ_GAIN, rng),
            scale_b: Tensor::full(&[u], 1.0),
            shift_w: scaled_randn(&[u, u], u, ATTN_PROJ_GAIN, rng),
            shift_b: Tensor::zeros(&[u], ElemKind::Real32),
            pe_proj: scaled_randn(&[u, u], u, 1.0, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseParams {
    /// (h, w) learnable noise map, normalized to zero-mean unit-std over
    /// the spatial dimensions at every use.
    pub map: Tensor,
    /// Learnable scalar gain.
    pub alpha: Tensor,
}

impl NoiseParams {
    fn new(res: usize, rng: &mut ChaCha8Rng) -> NoiseParams {
        NoiseParams {
            map: Tensor::randn(&[res, res], ElemKind::Real32, rng),
            alpha: Tensor::scalar(NOISE_ALPHA_INIT),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StyleConvParams {
    /// (r, r, c_in, c_out).
    pub kernel: Tensor,
    /// Projection of the global latent to per-input-channel scales.
    pub style_w: Tensor,
    pub style_b: Tensor,
}

impl StyleConvParams {
    fn new(r: usize, c_in: usize, c_out: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        StyleConvParams {
            kernel: scaled_randn(&[r, r, c_in, c_out], r * r * c_in, 1.0, rng),
            style_w: scaled_randn(&[latent_dim, c_in], latent_dim, 1.0, rng),
            style_b: Tensor::full(&[c_in], 1.0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleParams {
    /// (r, r, c_out, c_in) kernel of the stride-2 transpose convolution.
    pub kernel: Tensor,
}

impl UpsampleParams {
    fn new(r: usize, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> UpsampleParams {
        UpsampleParams {
            kernel: scaled_randn(&[r, r, c_out, c_in], r * r * c_in, 1.0, rng),
        }
    }
}

#[derive(Clone, Debug)]
struct SynthLayerParams {
    upsample: Option<UpsampleParams>,
    ca1: Option<CrossAttentionParams>,
    ni1: Option<NoiseParams>,
    sc: StyleConvParams,
    ca2: Option<CrossAttentionParams>,
    ni2: Option<NoiseParams>,
}

/// Which group a parameter belongs to for inference-time optimization.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    Weights,
    Noise,
}

/// All learnable generator parameters.
#[derive(Clone, Debug)]
pub struct SynthesizerState {
    pub config: SynthesizerConfig,
    constant: Tensor,
    pe_local: Tensor,
    layers: Vec<SynthLayerParams>,
    /// Fixed sinusoidal bases per layer, (h*w, u); not learnable.
    pe_bases: Vec<Tensor>,
}

fn scaled_randn(shape: &[usize], fan_in: usize, gain: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = gain / (fan_in as f32).sqrt();
    Tensor::randn(shape, ElemKind::Real32, rng).scaled(scale)
}

impl SynthesizerState {
    pub fn new(config: SynthesizerConfig, rng: &mut ChaCha8Rng) -> Result<SynthesizerState> {
        config.validate()?;
        let r = config.kernel_size;
        let ls = config.latent_dim;
        let mut layers = Vec::with_capacity(config.n_layers);
        let mut pe_bases = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let res = config.resolution_at(i);
            let u = config.channels[i];
            let last = i + 1 == config.n_layers;
            let upsample = if i == 0 {
                None
            } else {
                Some(UpsampleParams::new(r, config.channels[i - 1], u, rng))
            };
            let ca1 = config.has_ca1(i).then(|| CrossAttentionParams::new(u, ls, rng));
            let ni1 = config.has_noise(i).then(|| NoiseParams::new(res, rng));
            let sc_out = if last { 2 } else { u };
            let sc = StyleConvParams::new(r, u, sc_out, ls, rng);
            let ca2 = config.has_ca2(i).then(|| CrossAttentionParams::new(u, ls, rng));
            let ni2 = config.has_noise(i).then(|| NoiseParams::new(res, rng));
            layers.push(SynthLayerParams {
                upsample,
                ca1,
                ni1,
                sc,
                ca2,
                ni2,
            });
            pe_bases.push(sinusoidal_base(res, res, u));
        }
        Ok(SynthesizerState {
            constant: Tensor::randn(
                &[config.base_resolution, config.base_resolution, config.channels[0]],
                ElemKind::Real32,
                rng,
            ),
            pe_local: Tensor::randn(&[config.k_local, config.latent_dim], ElemKind::Real32, rng),
            layers,
            pe_bases,
            config,
        })
    }

    /// Visit every learnable parameter in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(ParamGroup, String, &Tensor)) {
        use ParamGroup::*;
        f(Weights, "constant".into(), &self.constant);
        f(Weights, "pe_local".into(), &self.pe_local);
        for (i, l) in self.layers.iter().enumerate() {
            let p = |name: &str| format!("layer{}.{}", i, name);
            if let Some(up) = &l.upsample {
                f(Weights, p("up.kernel"), &up.kernel);
            }
            if let Some(ca) = &l.ca1 {
                visit_ca(ca, &p("ca1"), f);
            }
            if let Some(ni) = &l.ni1 {
                f(Noise, p("ni1.map"), &ni.map);
                f(Weights, p("ni1.alpha"), &ni.alpha);
            }
            f(Weights, p("sc.kernel"), &l.sc.kernel);
            f(Weights, p("sc.style_w"), &l.sc.style_w);
            f(Weights, p("sc.style_b"), &l.sc.style_b);
            if let Some(ca) = &l.ca2 {
                visit_ca(ca, &p("ca2"), f);
            }
            if let Some(ni) = &l.ni2 {
                f(Noise, p("ni2.map"), &ni.map);
                f(Weights, p("ni2.alpha"), &ni.alpha);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamGroup, String, &mut Tensor)) {
        use ParamGroup::*;
        f(Weights, "constant".into(), &mut self.constant);
        f(Weights, "pe_local".into(), &mut self.pe_local);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let prefix = format!("layer{}", i);
            if let Some(up) = &mut l.upsample {
                f(Weights, format!("{prefix}.up.kernel"), &mut up.kernel);
            }
            if let Some(ca) = &mut l.ca1 {
                visit_ca_mut(ca, &format!("{prefix}.ca1"), f);
            }
            if let Some(ni) = &mut l.ni1 {
                f(Noise, format!("{prefix}.ni1.map"), &mut ni.map);
                f(Weights, format!("{prefix}.ni1.alpha"), &mut ni.alpha);
            }
            f(Weights, format!("{prefix}.sc.kernel"), &mut l.sc.kernel);
            f(Weights, format!("{prefix}.sc.style_w"), &mut l.sc.style_w);
            f(Weights, format!("{prefix}.sc.style_b"), &mut l.sc.style_b);
            if let Some(ca) = &mut l.ca2 {
                visit_ca_mut(ca, &format!("{prefix}.ca2"), f);
            }
            if let Some(ni) = &mut l.ni2 {
                f(Noise, format!("{prefix}.ni2.map"), &mut ni.map);
                f(Weights, format!("{prefix}.ni2.alpha"), &mut ni.alpha);
            }
        }
    }

    /// Re-draw all noise maps (used when weights propagate across slices
    /// but noise must start fresh).
    pub fn reinit_noise(&mut self, rng: &mut ChaCha8Rng) {
        for l in self.layers.iter_mut() {
            for ni in [&mut l.ni1, &mut l.ni2].into_iter().flatten() {
                let res = ni.map.shape()[0];
                ni.map = Tensor::randn(&[res, res], ElemKind::Real32, rng);
            }
        }
    }

    /// Bind every parameter as a graph leaf. `weights_grad` / `noise_grad`
    /// control which groups require gradients this pass.
    pub fn bind(&self, graph: &Graph, weights_grad: bool, noise_grad: bool) -> BoundSynthesizer {
        let mut leaves = Vec::new();
        let mut bind_one = |group: ParamGroup, t: &Tensor| -> Var {
            let grad = match group {
                ParamGroup::Weights => weights_grad,
                ParamGroup::Noise => noise_grad,
            };
            let v = if grad {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            };
            leaves.push((group, v.clone()));
            v
        };
        let constant = bind_one(ParamGroup::Weights, &self.constant);
        let pe_local = bind_one(ParamGroup::Weights, &self.pe_local);
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let upsample = l.upsample.as_ref().map(|up| BoundUpsample {
                kernel: bind_one(ParamGroup::Weights, &up.kernel),
            });
            let ca1 = l.ca1.as_ref().map(|ca| bind_ca(ca, &mut bind_one));
            let ni1 = l.ni1.as_ref().map(|ni| BoundNoise {
                map: bind_one(ParamGroup::Noise, &ni.map),
                alpha: bind_one(ParamGroup::Weights, &ni.alpha),
            });
            let sc = BoundStyleConv {
                kernel: bind_one(ParamGroup::Weights, &l.sc.kernel),
                style_w: bind_one(ParamGroup::Weights, &l.sc.style_w),
                style_b: bind_one(ParamGroup::Weights, &l.sc.style_b),
            };
            let ca2 = l.ca2.as_ref().map(|ca| bind_ca(ca, &mut bind_one));
            let ni2 = l.ni2.as_ref().map(|ni| BoundNoise {
                map: bind_one(ParamGroup::Noise, &ni.map),
                alpha: bind_one(ParamGroup::Weights, &ni.alpha),
            });
            layers.push(BoundLayer {
                upsample,
                ca1,
                ni1,
                sc,
                ca2,
                ni2,
            });
        }
        let pe_bases = self
            .pe_bases
            .iter()
            .map(|b| graph.constant(b.clone()))
            .collect();
        BoundSynthesizer {
            config: self.config.clone(),
            constant,
            pe_local,
            layers,
            pe_bases,
            leaves,
        }
    }
}

fn visit_ca(ca: &CrossAttentionParams, prefix: &str, f: &mut dyn FnMut(ParamGroup, String, &Tensor)) {
    use ParamGroup::Weights;
    f(Weights, format!("{prefix}.query"), &ca.query);
    f(Weights, format!("{prefix}.key"), &ca.key);
    f(Weights, format!("{prefix}.value"), &ca.value);
    f(Weights, format!("{prefix}.scale_w"), &ca.scale_w);
    f(Weights, format!("{prefix}.scale_b"), &ca.scale_b);
    f(Weights, format!("{prefix}.shift_w"), &ca.shift_w);
    f(Weights, format!("{prefix}.shift_b"), &ca.shift_b);
    f(Weights, format!("{prefix}.pe_proj"), &ca.pe_proj);
}

fn visit_ca_mut(
    ca: &mut CrossAttentionParams,
    prefix: &str,
    f: &mut dyn FnMut(ParamGroup, String, &mut Tensor),
) {
    use ParamGroup::Weights;
    f(Weights, format!("{prefix}.query"), &mut ca.query);
    f(Weights, format!("{prefix}.key"), &mut ca.key);
    f(Weights, format!("{prefix}.value"), &mut ca.value);
    f(Weights, format!("{prefix}.scale_w"), &mut ca.scale_w);
    f(Weights, format!("{prefix}.scale_b"), &mut ca.scale_b);
    f(Weights, format!("{prefix}.shift_w"), &mut ca.shift_w);
    f(Weights, format!("{prefix}.shift_b"), &mut ca.shift_b);
    f(Weights, format!("{prefix}.pe_proj"), &mut ca.pe_proj);
}

fn bind_ca(ca: &CrossAttentionParams, bind: &mut impl FnMut(ParamGroup, &Tensor) -> Var) -> BoundCa {
    use ParamGroup::Weights;
    BoundCa {
        query: bind(Weights, &ca.query),
        key: bind(Weights, &ca.key),
        value: bind(Weights, &ca.value),
        scale_w: bind(Weights, &ca.scale_w),
        scale_b: bind(Weights, &ca.scale_b),
        shift_w: bind(Weights, &ca.shift_w),
        shift_b: bind(Weights, &ca.shift_b),
        pe_proj: bind(Weights, &ca.pe_proj),
    }
}

// ── Bound (per-graph) mirrors ────────────────────────────────────────

#[derive(Clone)]
pub struct BoundCa {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub scale_w: Var,
    pub scale_b: Var,
    pub shift_w: Var,
    pub shift_b: Var,
    pub pe_proj: Var,
}

#[derive(Clone)]
pub struct BoundNoise {
    pub map: Var,
    pub alpha: Var,
}

#[derive(Clone)]
pub struct BoundStyleConv {
    pub kernel: Var,
    pub style_w: Var,
    pub style_b: Var,
}

#[derive(Clone)]
pub struct BoundUpsample {
    pub kernel: Var,
}

pub struct BoundLayer {
    pub upsample: Option<BoundUpsample>,
    pub ca1: Option<BoundCa>,
    pub ni1: Option<BoundNoise>,
    pub sc: BoundStyleConv,
    pub ca2: Option<BoundCa>,
    pub ni2: Option<BoundNoise>,
}

pub struct BoundSynthesizer {
    pub config: SynthesizerConfig,
    pub constant: Var,
    pub pe_local: Var,
    pub layers: Vec<BoundLayer>,
    pub pe_bases: Vec<Var>,
    /// Every bound parameter leaf in visit order (for optimizers).
    pub leaves: Vec<(ParamGroup, Var)>,
}

// ── Latents ──────────────────────────────────────────────────────────

/// Latent inputs for one layer: local latents for each CA sub-block and a
/// global latent for the SC sub-block.
pub struct LayerLatentVars {
    pub ca1: Option<Var>,
    pub sc: Var,
    pub ca2: Option<Var>,
}

/// Per-sub-block latent variables for a full forward pass.
pub struct LatentVars {
    pub layers: Vec<LayerLatentVars>,
}

impl LatentVars {
    /// Pre-training mode: one shared (W_l, w_g) pair feeds every sub-block.
    pub fn uniform(config: &SynthesizerConfig, w_local: &Var, w_global: &Var) -> LatentVars {
        let layers = (0..config.n_layers)
            .map(|i| LayerLatentVars {
                ca1: config.has_ca1(i).then(|| w_local.clone()),
                sc: w_global.clone(),
                ca2: config.has_ca2(i).then(|| w_local.clone()),
            })
            .collect();
        LatentVars { layers }
    }
}

/// Per-sub-block latent tensors, segregated for independent optimization.
#[derive(Clone, Debug)]
pub struct SegregatedLatents {
    pub layers: Vec<(Option<Tensor>, Tensor, Option<Tensor>)>,
}

impl SegregatedLatents {
    /// Expand one shared latent pair into independent per-slot copies.
    pub fn from_shared(config: &SynthesizerConfig, w_local: &Tensor, w_global: &Tensor) -> Result<SegregatedLatents> {
        if w_local.shape() != [config.k_local, config.latent_dim]
            || w_global.shape() != [config.latent_dim]
        {
            return Err(CoreError::shape(format!(
                "latents ({:?}, {:?}) do not match config (K={}, L_s={})",
                w_local.shape(),
                w_global.shape(),
                config.k_local,
                config.latent_dim
            )));
        }
        let layers = (0..config.n_layers)
            .map(|i| {
                (
                    config.has_ca1(i).then(|| w_local.clone()),
                    w_global.clone(),
                    config.has_ca2(i).then(|| w_local.clone()),
                )
            })
            .collect();
        Ok(SegregatedLatents { layers })
    }

    pub fn slot_count(&self) -> usize {
        self.layers
            .iter()
            .map(|(a, _, c)| 1 + a.is_some() as usize + c.is_some() as usize)
            .sum()
    }

    /// Bind each slot as a graph leaf; the returned flat list follows
    /// layer order (ca1, sc, ca2).
    pub fn bind(&self, graph: &Graph, grad: bool) -> (LatentVars, Vec<Var>) {
        let mut flat = Vec::new();
        let mut mk = |t: &Tensor| -> Var {
            let v = if grad {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            };
            flat.push(v.clone());
            v
        };
        let layers = self
            .layers
            .iter()
            .map(|(ca1, sc, ca2)| LayerLatentVars {
                ca1: ca1.as_ref().map(&mut mk),
                sc: mk(sc),
                ca2: ca2.as_ref().map(&mut mk),
            })
            .collect();
        (LatentVars { layers }, flat)
    }

    /// Overwrite slots from a flat tensor list in bind order.
    pub fn assign_flat(&mut self, tensors: &[Tensor]) -> Result<()> {
        let mut it = tensors.iter();
        let mut take = |slot: &mut Tensor| -> Result<()> {
            let t = it
                .next()
                .ok_or_else(|| CoreError::contract("latent tensor list too short".to_string()))?;
            *slot = t.clone();
            Ok(())
        };
        for (ca1, sc, ca2) in self.layers.iter_mut() {
            if let Some(t) = ca1 {
                take(t)?;
            }
            take(sc)?;
            if let Some(t) = ca2 {
                take(t)?;
            }
        }
        if it.next().is_some() {
            return Err(CoreError::contract("latent tensor list too long".to_string()));
        }
        Ok(())
    }
}

// ── Sub-block forward math ───────────────────────────────────────────

/// Attention map of a cross-attention sub-block: softmax over K local
/// latents per spatial location, scale 1/sqrt(u).
pub fn attention_map(
    ca: &BoundCa,
    x_vec: &Var,
    w_local: &Var,
    pe_local: &Var,
    pe_base: &Var,
) -> Result<Var> {
    let u = x_vec.shape()[1];
    let pe_x = pe_base.matmul(&ca.pe_proj)?;
    let queries = x_vec.add(&pe_x)?.matmul(&ca.query)?;
    let wl_pe = w_local.add(pe_local)?;
    let keys = wl_pe.matmul(&ca.key)?;
    queries
        .matmul(&keys.transpose2()?)?
        .mul_scalar(1.0 / (u as f32).sqrt())
        .softmax_rows()
}

/// Full cross-attention sub-block: attention-weighted latent values
/// scale and shift the instance-normalized input features.
pub fn cross_attention(
    ca: &BoundCa,
    x: &Var,
    w_local: &Var,
    pe_local: &Var,
    pe_base: &Var,
) -> Result<Var> {
    let s = x.shape();
    let (h, w, u) = (s[0], s[1], s[2]);
    let x_vec = x.reshape(&[h * w, u])?;
    let amap = attention_map(ca, &x_vec, w_local, pe_local, pe_base)?;
    let wl_pe = w_local.add(pe_local)?;
    let values = wl_pe.matmul(&ca.value)?;
    let a_feat = amap.matmul(&values)?;
    // Instance-normalize per channel over spatial locations.
    let mu = x_vec.col_mean()?;
    let centered = x_vec.add_row(&mu.neg())?;
    let var = centered.square()?.col_mean()?;
    let sigma = var.add_scalar(IN_EPS)?.sqrt()?;
    let x_hat = centered.mul_row(&sigma.recip()?)?;
    let scale = a_feat.matmul(&ca.scale_w)?.add_row(&ca.scale_b)?;
    let shift = a_feat.matmul(&ca.shift_w)?.add_row(&ca.shift_b)?;
    scale.mul(&x_hat)?.add(&shift)?.reshape(&[h, w, u])
}

/// Noise injection: a spatially normalized noise map, scaled by the
/// learnable gain, added identically to every channel.
pub fn noise_inject(ni: &BoundNoise, x: &Var) -> Result<Var> {
    let s = x.shape();
    let (h, w, u) = (s[0], s[1], s[2]);
    let n = ni.map.reshape(&[h * w])?;
    let mean = n.mean_all()?;
    let centered = n.sub(&mean.broadcast_scalar(&[h * w])?)?;
    let std = centered.square()?.mean_all()?.add_scalar(IN_EPS)?.sqrt()?;
    let normalized = centered.scale_by_scalar(&std.recip()?)?;
    let scaled = normalized.scale_by_scalar(&ni.alpha)?;
    x.reshape(&[h * w, u])?.add_col(&scaled)?.reshape(&[h, w, u])
}

/// Kernel modulation by per-input-channel style scales, then column
/// demodulation so every output-channel kernel slice has unit L2 norm.
pub fn modulated_kernel(sc: &BoundStyleConv, w_global: &Var) -> Result<Var> {
    let ks = sc.kernel.shape();
    let (r, ci, co) = (ks[0], ks[2], ks[3]);
    let ls = sc.style_w.shape()[0];
    let style = w_global
        .reshape(&[1, ls])?
        .matmul(&sc.style_w)?
        .reshape(&[ci])?
        .add(&sc.style_b)?;
    let k2 = sc.kernel.reshape(&[r * r * ci, co])?;
    let tiled = style.broadcast_row(r * r)?.reshape(&[r * r * ci])?;
    let modulated = k2.mul_col(&tiled)?;
    let col_norm = modulated.square()?.col_sum()?.add_scalar(DEMOD_EPS)?.sqrt()?;
    modulated.mul_row(&col_norm.recip()?)?.reshape(&[r, r, ci, co])
}

/// Style-modulated convolution (Eq. structure: modulate, demodulate,
/// convolve with same padding).
pub fn style_mod_conv(sc: &BoundStyleConv, x: &Var, w_global: &Var) -> Result<Var> {
    let kernel = modulated_kernel(sc, w_global)?;
    x.conv2d(&kernel)
}

pub fn upsample2x(up: &BoundUpsample, x: &Var) -> Result<Var> {
    let s = x.shape();
    x.conv_input_adjoint(&up.kernel, 2, 1, (2 * s[0], 2 * s[1]))
}

impl BoundLayer {
    fn apply(
        &self,
        index: usize,
        x: &Var,
        latents: &LayerLatentVars,
        pe_local: &Var,
        pe_base: &Var,
    ) -> Result<Var> {
        let x = match &self.upsample {
            Some(up) => upsample2x(up, x)?,
            None => x.clone(),
        };
        // Last layer: modulated convolution only.
        if self.ca2.is_none() && self.ni2.is_none() {
            return style_mod_conv(&self.sc, &x, &latents.sc);
        }
        let mut y = x.clone();
        if let (Some(ca), Some(wl)) = (&self.ca1, &latents.ca1) {
            y = cross_attention(ca, &y, wl, pe_local, pe_base)?;
        }
        if let Some(ni) = &self.ni1 {
            y = noise_inject(ni, &y)?;
        }
        y = style_mod_conv(&self.sc, &y, &latents.sc)?.leaky_relu(LEAKY_SLOPE)?;
        if let (Some(ca), Some(wl)) = (&self.ca2, &latents.ca2) {
            y = cross_attention(ca, &y, wl, pe_local, pe_base)?;
        }
        if let Some(ni) = &self.ni2 {
            y = noise_inject(ni, &y)?;
        }
        if index > 0 {
            y = y.add(&x)?;
        }
        Ok(y)
    }
}

impl BoundSynthesizer {
    /// Full forward pass to a complex (h, h) image, optionally center-cropped
    /// to smaller acquisition extents.
    pub fn forward(&self, latents: &LatentVars, crop: Option<(usize, usize)>) -> Result<Var> {
        if latents.layers.len() != self.layers.len() {
            return Err(CoreError::config(format!(
                "latent slots cover {} layers, synthesizer has {}",
                latents.layers.len(),
                self.layers.len()
            )));
        }
        let mut x = self.constant.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(i, &x, &latents.layers[i], &self.pe_local, &self.pe_bases[i])?;
        }
        let mut img = x.channels_to_complex()?;
        if let Some((ch, cw)) = crop {
            let s = img.shape();
            if ch > s[0] || cw > s[1] {
                return Err(CoreError::shape(format!(
                    "crop {}x{} exceeds output {}x{}",
                    ch, cw, s[0], s[1]
                )));
            }
            if (ch, cw) != (s[0], s[1]) {
                img = img.crop2d((s[0] - ch) / 2, (s[1] - cw) / 2, ch, cw)?;
            }
        }
        Ok(img)
    }
}
