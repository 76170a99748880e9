//! Inference: adapt a pre-trained (or randomly initialized) prior to one
//! undersampled acquisition by minimizing a data-consistency loss over
//! segregated latents, noise maps, and generator weights.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::imaging::{coil_combine, ImagingOperatorSpec};
use crate::mapper::{MapperState, RawLatents};
use crate::metrics;
use crate::synthesizer::{ParamGroup, SegregatedLatents, SynthesizerConfig, SynthesizerState};
use crate::tensor::fft::fft2_centered;
use crate::tensor::graph::{backward, Graph, Var};
use crate::tensor::optim::{rmsprop_step, RmsPropConfig, RmsPropState};
use crate::tensor::{ElemKind, Tensor};

/// Which parameter sets the inference loop optimizes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OptimSet {
    pub latents: bool,
    pub noise: bool,
    pub weights: bool,
}

impl OptimSet {
    pub const NONE: OptimSet = OptimSet {
        latents: false,
        noise: false,
        weights: false,
    };
    pub const LATENTS: OptimSet = OptimSet {
        latents: true,
        noise: false,
        weights: false,
    };
    pub const LATENTS_NOISE: OptimSet = OptimSet {
        latents: true,
        noise: true,
        weights: false,
    };
    pub const ALL: OptimSet = OptimSet {
        latents: true,
        noise: true,
        weights: true,
    };

    pub fn any(&self) -> bool {
        self.latents || self.noise || self.weights
    }
}

#[derive(Clone, Debug)]
pub struct InferenceConfig {
    pub lr: f32,
    pub momentum: f32,
    pub decay: f32,
    pub max_iterations: usize,
    pub lambda1: f32,
    pub lambda2: f32,
    /// Interpret the l2 term as the squared norm instead of the norm.
    pub l2_squared: bool,
    pub optimize: OptimSet,
    pub strict_dc: bool,
    pub seed: u64,
    /// Fraction of the iteration budget over which the learning rate
    /// ramps down with a cosine profile at the end.
    pub cosine_tail: f32,
    /// Learning-rate scale for the latents group relative to `lr`.
    pub latent_lr_scale: f32,
    /// Learning-rate scale for the noise group relative to `lr`.
    pub noise_lr_scale: f32,
    /// Learning-rate scale for the weights group relative to `lr`. The
    /// nominal rate is sized for latent search; applying it to network
    /// weights diverges, so weights step at a fraction of it.
    pub weights_lr_scale: f32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            lr: 0.1,
            momentum: 0.9,
            decay: 0.9,
            max_iterations: 1000,
            lambda1: 1.0,
            lambda2: 0.0,
            l2_squared: false,
            optimize: OptimSet::ALL,
            strict_dc: false,
            seed: 0,
            cosine_tail: 0.25,
            latent_lr_scale: 1.0,
            noise_lr_scale: 1.0,
            weights_lr_scale: 0.02,
        }
    }
}

impl InferenceConfig {
    fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0)
        {
            return Err(CoreError::config(format!(
                "loss weights ({}, {}) must be non-negative and not both zero",
                self.lambda1, self.lambda2
            )));
        }
        if !self.optimize.any() && self.max_iterations > 0 {
            return Err(CoreError::config(
                "no parameter set selected for optimization".to_string(),
            ));
        }
        Ok(())
    }

    fn lr_at(&self, it: usize) -> f32 {
        let n = self.max_iterations;
        let tail = ((n as f32) * self.cosine_tail).round() as usize;
        let start = n.saturating_sub(tail);
        if it < start || tail == 0 {
            self.lr
        } else {
            let progress = (it - start) as f32 / tail as f32;
            self.lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
        }
    }
}

/// A trained or randomly initialized prior: synthesizer plus mapper.
#[derive(Clone)]
pub struct Prior {
    pub synth: SynthesizerState,
    pub mapper: MapperState,
}

impl Prior {
    /// Untrained prior with standard-normal (fan-in scaled) weights.
    pub fn random(config: SynthesizerConfig, seed: u64) -> Result<Prior> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = SynthesizerState::new(config.clone(), &mut rng)?;
        let mapper = MapperState::new(config.k_local, config.latent_dim, &mut rng)?;
        Ok(Prior { synth, mapper })
    }
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub image: Tensor,
    pub loss_trace: Vec<f64>,
    pub iterations_used: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_time: Duration,
}

/// Weighted l1/l2 data-consistency loss of an image against acquired
/// k-space, evaluated at sampled locations only.
pub fn dc_loss(
    spec: &ImagingOperatorSpec,
    image: &Tensor,
    y_acq: &Tensor,
    lambda1: f64,
    lambda2: f64,
    l2_squared: bool,
) -> Result<f64> {
    if lambda1 == 0.0 && lambda2 == 0.0 {
        return Err(CoreError::config(
            "loss weights must not both be zero".to_string(),
        ));
    }
    let proj = spec.apply_forward(image)?;
    if proj.shape() != y_acq.shape() {
        return Err(CoreError::shape(format!(
            "k-space shapes differ: {:?} vs {:?}",
            proj.shape(),
            y_acq.shape()
        )));
    }
    let mut l1 = 0.0f64;
    let mut sq = 0.0f64;
    for i in 0..proj.numel() {
        let (ar, ai) = proj.complex(i);
        let (br, bi) = y_acq.complex(i);
        let (dr, di) = ((ar - br) as f64, (ai - bi) as f64);
        let m2 = dr * dr + di * di;
        l1 += m2.sqrt();
        sq += m2;
    }
    let l2 = if l2_squared { sq } else { sq.sqrt() };
    Ok(lambda1 * l1 + lambda2 * l2)
}

/// Graph form of the data-consistency loss.
fn dc_loss_var(
    graph: &Graph,
    image: &Var,
    spec: &ImagingOperatorSpec,
    y_acq: &Tensor,
    cfg: &InferenceConfig,
) -> Result<Var> {
    let (h, w) = spec.extents();
    let mask_c = graph.constant(spec.mask.mask.to_complex());
    let mut l1: Option<Var> = None;
    let mut sq: Option<Var> = None;
    for (c, coil) in spec.coils.maps.iter().enumerate() {
        let coil_v = graph.constant(coil.clone());
        let off = c * 2 * h * w;
        let y_c = graph.constant(
            Tensor::from_vec(
                &[h, w],
                ElemKind::Complex64,
                y_acq.data()[off..off + 2 * h * w].to_vec(),
            )
            .expect("coil slice"),
        );
        let proj = image.cmul(&coil_v)?.fft2()?.cmul(&mask_c)?;
        let resid = proj.sub(&y_c)?;
        let modulus = resid.modulus()?;
        let l1_term = modulus.sum_all()?;
        let sq_term = modulus.square()?.sum_all()?;
        l1 = Some(match l1 {
            None => l1_term,
            Some(acc) => acc.add(&l1_term)?,
        });
        sq = Some(match sq {
            None => sq_term,
            Some(acc) => acc.add(&sq_term)?,
        });
    }
    let l1 = l1.expect("at least one coil");
    let sq = sq.expect("at least one coil");
    let l2 = if cfg.l2_squared {
        sq
    } else {
        sq.add_scalar(1e-20)?.sqrt()?
    };
    l1.mul_scalar(cfg.lambda1)
        .add(&l2.mul_scalar(cfg.lambda2))
}

/// Replace the output's k-space with acquired samples at sampled locations,
/// per coil, then invert and coil-combine. Returns the corrected image and
/// the per-coil k-space after replacement.
pub fn enforce_strict_dc(
    spec: &ImagingOperatorSpec,
    image: &Tensor,
    y_acq: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = spec.extents();
    let n = spec.n_coils();
    if y_acq.shape() != [n, h, w] {
        return Err(CoreError::shape(format!(
            "acquired k-space must be ({}, {}, {}), got {:?}",
            n,
            h,
            w,
            y_acq.shape()
        )));
    }
    let mut kspace = Vec::with_capacity(n * 2 * h * w);
    let mut images = Vec::with_capacity(n * 2 * h * w);
    for (c, coil) in spec.coils.maps.iter().enumerate() {
        let proj = coil.cmul_tensor(image)?;
        let mut full = fft2_centered(proj.data(), h, w, false)?;
        let off = c * 2 * h * w;
        for i in 0..h * w {
            if spec.mask.mask.data()[i] != 0.0 {
                full[2 * i] = y_acq.data()[off + 2 * i];
                full[2 * i + 1] = y_acq.data()[off + 2 * i + 1];
            }
        }
        kspace.extend_from_slice(&full);
        images.extend(fft2_centered(&full, h, w, true)?);
    }
    let stack = Tensor::from_vec(&[n, h, w], ElemKind::Complex64, images)?;
    let combined = coil_combine(&stack, &spec.coils)?;
    let kspace = Tensor::from_vec(&[n, h, w], ElemKind::Complex64, kspace)?;
    Ok((combined, kspace))
}

/// Initial segregated latents for an inference run: raw draws through the
/// prior's mapper, copied into every sub-block slot.
fn init_latents(prior: &Prior, rng: &mut ChaCha8Rng) -> Result<SegregatedLatents> {
    let cfg = &prior.synth.config;
    let z = RawLatents::sample(cfg.k_local, cfg.latent_dim, rng);
    let graph = Graph::new();
    let bm = prior.mapper.bind(&graph, false);
    let zl = graph.constant(z.local);
    let zg = graph.constant(z.global);
    let (wl, wg) = bm.forward(&zl, &zg)?;
    SegregatedLatents::from_shared(cfg, &wl.value(), &wg.value())
}

fn forward_image(
    synth: &SynthesizerState,
    latents: &SegregatedLatents,
    crop: (usize, usize),
) -> Result<Tensor> {
    let graph = Graph::new();
    let bound = synth.bind(&graph, false, false);
    let (latent_vars, _) = latents.bind(&graph, false);
    Ok(bound.forward(&latent_vars, Some(crop))?.value())
}

/// Core inference loop. Returns the reconstruction together with the final
/// adapted synthesizer state (whose weights feed cross-slice propagation).
pub fn infer(
    prior: &Prior,
    spec: &ImagingOperatorSpec,
    y_acq: &Tensor,
    cfg: &InferenceConfig,
    reference: Option<&Tensor>,
) -> Result<(ReconResult, SynthesizerState)> {
    cfg.validate()?;
    let start = Instant::now();
    let (h, w) = spec.extents();
    if y_acq.shape() != [spec.n_coils(), h, w] || !y_acq.is_complex() {
        return Err(CoreError::shape(format!(
            "acquisition must be complex ({}, {}, {}), got {:?}",
            spec.n_coils(),
            h,
            w,
            y_acq.shape()
        )));
    }
    let res = prior.synth.config.final_resolution;
    if h > res || w > res {
        return Err(CoreError::config(format!(
            "acquisition {}x{} exceeds the prior's {}x{} output",
            h, w, res, res
        )));
    }
    let mut synth = prior.synth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut latents = init_latents(prior, &mut rng)?;

    let mut trace: Vec<f64> = Vec::with_capacity(cfg.max_iterations);
    let mut best: Option<(f64, Tensor)> = None;
    // Independent optimizer state per parameter group, each with its own
    // learning-rate scale: latents, noise, weights.
    let mut opt_states: [Option<RmsPropState>; 3] = [None, None, None];

    for it in 0..cfg.max_iterations {
        let graph = Graph::new();
        let bound = synth.bind(&graph, cfg.optimize.weights, cfg.optimize.noise);
        let (latent_vars, latent_leaves) = latents.bind(&graph, cfg.optimize.latents);
        let image = bound.forward(&latent_vars, Some((h, w)))?;
        let loss = dc_loss_var(&graph, &image, spec, y_acq, cfg)?;
        let v = loss.scalar_value()? as f64;
        if !v.is_finite() {
            return Err(CoreError::numeric(format!(
                "data-consistency loss diverged at iteration {} (trace: {:?})",
                it,
                &trace[trace.len().saturating_sub(5)..]
            )));
        }
        trace.push(v);
        if best.as_ref().map_or(true, |(b, _)| v < *b) {
            best = Some((v, image.value()));
        }
        let grads = backward(&loss)?;
        let lr_now = cfg.lr_at(it);
        for (gi, group) in [None, Some(ParamGroup::Noise), Some(ParamGroup::Weights)]
            .into_iter()
            .enumerate()
        {
            let (enabled, scale) = match group {
                None => (cfg.optimize.latents, cfg.latent_lr_scale),
                Some(ParamGroup::Noise) => (cfg.optimize.noise, cfg.noise_lr_scale),
                Some(ParamGroup::Weights) => (cfg.optimize.weights, cfg.weights_lr_scale),
            };
            if !enabled {
                continue;
            }
            let mut params: Vec<Tensor> = Vec::new();
            let mut grad_list: Vec<Tensor> = Vec::new();
            match group {
                None => {
                    for v in &latent_leaves {
                        params.push(v.value());
                        grad_list.push(grads.grad_tensor(v));
                    }
                }
                Some(grp) => {
                    for (g, v) in &bound.leaves {
                        if *g == grp {
                            params.push(v.value());
                            grad_list.push(grads.grad_tensor(v));
                        }
                    }
                }
            }
            let state = opt_states[gi].get_or_insert_with(|| RmsPropState::new(&params));
            let opt_cfg = RmsPropConfig {
                lr: lr_now * scale,
                momentum: cfg.momentum,
                decay: cfg.decay,
                eps: 1e-8,
            };
            rmsprop_step(&mut params, &grad_list, state, &opt_cfg)?;
            let mut iter = params.into_iter();
            match group {
                None => {
                    let slots: Vec<Tensor> = iter.collect();
                    latents.assign_flat(&slots)?;
                }
                Some(grp) => {
                    synth.visit_params_mut(&mut |g, _, t| {
                        if g == grp {
                            *t = iter.next().expect("optimized parameter count changed");
                        }
                    });
                }
            }
        }
    }

    let mut image = match best {
        Some((_, img)) => img,
        None => forward_image(&synth, &latents, (h, w))?,
    };
    if cfg.strict_dc {
        image = enforce_strict_dc(spec, &image, y_acq)?.0;
    }
    let (psnr, ssim) = match reference {
        Some(r) => (
            Some(metrics::psnr(&image, r)?),
            metrics::ssim(&image, r).ok(),
        ),
        None => (None, None),
    };
    Ok((
        ReconResult {
            image,
            iterations_used: trace.len(),
            loss_trace: trace,
            psnr,
            ssim,
            wall_time: start.elapsed(),
        },
        synth,
    ))
}

/// Named ablation modes in increasing order of optimized parameters.
pub const ABLATION_MODES: [(&str, OptimSet); 4] = [
    ("none", OptimSet::NONE),
    ("latent", OptimSet::LATENTS),
    ("latent_noise", OptimSet::LATENTS_NOISE),
    ("latent_noise_weight", OptimSet::ALL),
];

/// Run all four ablation modes on bitwise-identical inputs with a shared
/// seed and iteration budget.
pub fn ablation_run(
    prior: &Prior,
    spec: &ImagingOperatorSpec,
    y_acq: &Tensor,
    base: &InferenceConfig,
    reference: Option<&Tensor>,
) -> Result<Vec<(&'static str, ReconResult)>> {
    let mut out = Vec::with_capacity(ABLATION_MODES.len());
    for (name, set) in ABLATION_MODES {
        let mut cfg = base.clone();
        cfg.optimize = set;
        if !set.any() {
            cfg.max_iterations = 0;
        }
        let (result, _) = infer(prior, spec, y_acq, &cfg, reference)?;
        out.push((name, result));
    }
    Ok(out)
}

/// One slice of a multi-slice acquisition.
pub struct SliceAcquisition {
    pub spec: ImagingOperatorSpec,
    pub y: Tensor,
    pub reference: Option<Tensor>,
}

/// Reconstruct an ordered stack of slices. With `propagate` the optimized
/// weights of slice s initialize slice s+1 while latents and noise start
/// fresh (per-slice seeds) and the optimizer state resets.
pub fn reconstruct_volume(
    prior: &Prior,
    slices: &[SliceAcquisition],
    cfg: &InferenceConfig,
    propagate: bool,
) -> Result<Vec<ReconResult>> {
    let mut results = Vec::with_capacity(slices.len());
    let mut carried: Option<SynthesizerState> = None;
    for (s, slice) in slices.iter().enumerate() {
        let mut slice_cfg = cfg.clone();
        slice_cfg.seed = cfg.seed.wrapping_add(s as u64);
        let mut slice_prior = Prior {
            synth: match (&carried, propagate) {
                (Some(prev), true) => {
                    let mut st = prev.clone();
                    // Weights carry over; noise starts fresh.
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(slice_cfg.seed.wrapping_add(0x6e6f6973));
                    st.reinit_noise(&mut rng);
                    st
                }
                _ => prior.synth.clone(),
            },
            mapper: prior.mapper.clone(),
        };
        // Shape compatibility between carried weights and this slice.
        if slice_prior.synth.config.final_resolution < slice.spec.extents().0 {
            return Err(CoreError::config(format!(
                "slice {} extents {:?} exceed checkpoint resolution {}",
                s,
                slice.spec.extents(),
                slice_prior.synth.config.final_resolution
            )));
        }
        let (result, final_synth) = infer(
            &slice_prior,
            &slice.spec,
            &slice.y,
            &slice_cfg,
            slice.reference.as_ref(),
        )?;
        slice_prior.synth = final_synth;
        carried = Some(slice_prior.synth);
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{generate_vdrs_mask, make_digit_phantom, simulate_coils};

    fn small_spec(h: usize, r: f64, coils: usize, seed: u64) -> ImagingOperatorSpec {
        ImagingOperatorSpec::new(
            generate_vdrs_mask(h, h, r, seed).unwrap(),
            simulate_coils(h, h, coils).unwrap(),
        )
        .unwrap()
    }

    fn small_prior(res: usize, seed: u64) -> Prior {
        let cfg = SynthesizerConfig {
            n_layers: (res / 4).trailing_zeros() as usize + 1,
            base_resolution: 4,
            final_resolution: res,
            channels: vec![16; (res / 4).trailing_zeros() as usize + 1],
            k_local: 4,
            latent_dim: 8,
            kernel_size: 3,
        };
        Prior::random(cfg, seed).unwrap()
    }

    #[test]
    fn perfectly_consistent_image_has_zero_loss() {
        let spec = small_spec(16, 2.0, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let y = spec.apply_forward(&img).unwrap();
        let loss = dc_loss(&spec, &img, &y, 1.0, 0.5, false).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn l1_loss_matches_masked_sum_oracle() {
        let spec = small_spec(16, 4.0, 3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let target = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let y = spec.apply_forward(&target).unwrap();
        let got = dc_loss(&spec, &img, &y, 1.0, 0.0, false).unwrap();
        // Direct masked-sum oracle.
        let proj = spec.apply_forward(&img).unwrap();
        let mut expect = 0.0f64;
        for c in 0..3 {
            for i in 0..256 {
                if spec.mask.mask.data()[i] != 0.0 {
                    let (ar, ai) = proj.complex(c * 256 + i);
                    let (br, bi) = y.complex(c * 256 + i);
                    expect +=
                        (((ar - br) as f64).powi(2) + ((ai - bi) as f64).powi(2)).sqrt();
                }
            }
        }
        assert!(
            (got - expect).abs() < 1e-5 * expect.max(1.0),
            "{got} vs {expect}"
        );
    }

    #[test]
    fn loss_is_positively_homogeneous_in_the_residual() {
        let spec = small_spec(16, 4.0, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let m1 = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let y = spec.apply_forward(&base).unwrap();
        // m2 - base = 2 (m1 - base) by linearity of the operator.
        let m2 = m1.scaled(2.0).sub_tensor(&base).unwrap();
        for &(l1, l2) in &[(1.0, 0.0), (0.0, 1.0), (0.5, 0.5)] {
            let a = dc_loss(&spec, &m1, &y, l1, l2, false).unwrap();
            let b = dc_loss(&spec, &m2, &y, l1, l2, false).unwrap();
            assert!(
                (b - 2.0 * a).abs() < 1e-4 * a.max(1.0),
                "({l1},{l2}): {b} vs 2*{a}"
            );
        }
    }

    #[test]
    fn zero_weights_are_rejected() {
        let spec = small_spec(16, 2.0, 1, 7);
        let img = Tensor::zeros(&[16, 16], ElemKind::Complex64);
        let y = Tensor::zeros(&[1, 16, 16], ElemKind::Complex64);
        assert!(matches!(
            dc_loss(&spec, &img, &y, 0.0, 0.0, false),
            Err(CoreError::Config(_))
        ));
        let cfg = InferenceConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..InferenceConfig::default()
        };
        let prior = small_prior(16, 8);
        assert!(infer(&prior, &spec, &y, &cfg, None).is_err());
    }

    #[test]
    fn graph_loss_matches_tensor_loss() {
        let spec = small_spec(16, 4.0, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img_t = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let target = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let y = spec.apply_forward(&target).unwrap();
        let cfg = InferenceConfig {
            lambda1: 0.7,
            lambda2: 0.3,
            ..InferenceConfig::default()
        };
        let graph = Graph::new();
        let img = graph.constant(img_t.clone());
        let via_graph = dc_loss_var(&graph, &img, &spec, &y, &cfg)
            .unwrap()
            .scalar_value()
            .unwrap() as f64;
        let direct = dc_loss(&spec, &img_t, &y, 0.7, 0.3, false).unwrap();
        assert!(
            (via_graph - direct).abs() < 1e-4 * direct.max(1.0),
            "{via_graph} vs {direct}"
        );
    }

    #[test]
    fn zero_iterations_returns_unadapted_prior_output() {
        let prior = small_prior(16, 11);
        let spec = small_spec(16, 2.0, 1, 12);
        let phantom = make_digit_phantom(16, 0.0, &[1, 2, 3, 4], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        let cfg = InferenceConfig {
            max_iterations: 0,
            seed: 13,
            ..InferenceConfig::default()
        };
        let (result, _) = infer(&prior, &spec, &y, &cfg, Some(&phantom)).unwrap();
        assert!(result.loss_trace.is_empty());
        assert_eq!(result.iterations_used, 0);
        // The image equals a fresh forward with the same latent seed.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let latents = init_latents(&prior, &mut rng).unwrap();
        let direct = forward_image(&prior.synth, &latents, (16, 16)).unwrap();
        assert_eq!(result.image, direct);
    }

    #[test]
    fn best_so_far_image_attains_trace_minimum() {
        let prior = small_prior(16, 14);
        let spec = small_spec(16, 2.0, 1, 15);
        let phantom = make_digit_phantom(16, 0.0, &[5, 6, 7, 8], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        let cfg = InferenceConfig {
            max_iterations: 15,
            seed: 16,
            ..InferenceConfig::default()
        };
        let (result, _) = infer(&prior, &spec, &y, &cfg, None).unwrap();
        assert_eq!(result.loss_trace.len(), 15);
        let min = result
            .loss_trace
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let recomputed = dc_loss(&spec, &result.image, &y, 1.0, 0.0, false).unwrap();
        assert!(
            (recomputed - min).abs() < 1e-5 * min.max(1e-9),
            "returned image loss {recomputed} vs trace minimum {min}"
        );
    }

    #[test]
    fn inference_reduces_data_consistency_loss() {
        let prior = small_prior(16, 17);
        let spec = small_spec(16, 2.0, 1, 18);
        let phantom = make_digit_phantom(16, 0.0, &[1, 2, 3, 4], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        let cfg = InferenceConfig {
            max_iterations: 60,
            seed: 19,
            ..InferenceConfig::default()
        };
        let (result, _) = infer(&prior, &spec, &y, &cfg, None).unwrap();
        let first = result.loss_trace[0];
        let best = result.loss_trace.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            best < 0.8 * first,
            "optimization made no progress: {first} -> {best}"
        );
    }

    #[test]
    fn strict_dc_restores_acquired_samples_exactly() {
        let spec = small_spec(16, 4.0, 2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let target = Tensor::randn(&[16, 16], ElemKind::Complex64, &mut rng);
        let y = spec.apply_forward(&target).unwrap();
        let (fixed, kspace) = enforce_strict_dc(&spec, &img, &y).unwrap();
        for c in 0..2 {
            for i in 0..256 {
                if spec.mask.mask.data()[i] != 0.0 {
                    assert_eq!(
                        kspace.complex(c * 256 + i),
                        y.complex(c * 256 + i),
                        "coil {c} bin {i} not replaced"
                    );
                }
            }
        }
        // Forward projection of the corrected image agrees with the
        // acquisition at sampled bins up to transform roundoff.
        let proj = spec.apply_forward(&fixed).unwrap();
        if spec.n_coils() == 1 {
            for i in 0..256 {
                if spec.mask.mask.data()[i] != 0.0 {
                    let (ar, ai) = proj.complex(i);
                    let (br, bi) = y.complex(i);
                    assert!((ar - br).abs() < 1e-4 && (ai - bi).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn iteration_zero_loss_is_independent_of_the_optimized_set() {
        let prior = small_prior(16, 22);
        let spec = small_spec(16, 2.0, 1, 23);
        let phantom = make_digit_phantom(16, 0.0, &[1, 2, 3, 4], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        let mut first = Vec::new();
        for set in [OptimSet::LATENTS, OptimSet::LATENTS_NOISE, OptimSet::ALL] {
            let cfg = InferenceConfig {
                max_iterations: 1,
                optimize: set,
                seed: 24,
                ..InferenceConfig::default()
            };
            let (result, _) = infer(&prior, &spec, &y, &cfg, None).unwrap();
            first.push(result.loss_trace[0]);
        }
        assert_eq!(first[0], first[1]);
        assert_eq!(first[1], first[2]);
    }

    #[test]
    fn ablation_produces_four_modes_on_shared_inputs() {
        let prior = small_prior(16, 25);
        let spec = small_spec(16, 2.0, 1, 26);
        let phantom = make_digit_phantom(16, 0.0, &[1, 2, 3, 4], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        let cfg = InferenceConfig {
            max_iterations: 10,
            seed: 27,
            ..InferenceConfig::default()
        };
        let results = ablation_run(&prior, &spec, &y, &cfg, Some(&phantom)).unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(results[0].0, "none");
        assert!(results[0].1.loss_trace.is_empty());
        for (_, r) in &results[1..] {
            assert_eq!(r.iterations_used, 10);
        }
    }

    #[test]
    fn warm_start_on_identical_slice_lowers_initial_loss() {
        let prior = small_prior(16, 28);
        let spec = small_spec(16, 2.0, 1, 29);
        let phantom = make_digit_phantom(16, 0.0, &[2, 4, 6, 8], 0).unwrap();
        let y = spec.apply_forward(&phantom).unwrap();
        // Long enough that slice 0's weights absorb real image structure.
        let cfg = InferenceConfig {
            max_iterations: 200,
            seed: 30,
            ..InferenceConfig::default()
        };
        let slices = vec![
            SliceAcquisition {
                spec: spec.clone(),
                y: y.clone(),
                reference: None,
            },
            SliceAcquisition {
                spec: spec.clone(),
                y: y.clone(),
                reference: None,
            },
        ];
        let warm = reconstruct_volume(&prior, &slices, &cfg, true).unwrap();
        let cold = reconstruct_volume(&prior, &slices, &cfg, false).unwrap();
        // Same seeds per slice, so slice 1 differs only in its weight init.
        assert!(
            warm[1].loss_trace[0] <= cold[1].loss_trace[0],
            "warm initial loss {} vs cold {}",
            warm[1].loss_trace[0],
            cold[1].loss_trace[0]
        );
    }
}
