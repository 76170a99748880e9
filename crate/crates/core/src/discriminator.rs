//! Convolutional critic over two-channel (real, imaginary) images:
//! stride-2 convolution layers with additive downsampled skips, then a
//! small fully-connected head to a scalar logit.

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::{ElemKind, Tensor};

const LEAKY_SLOPE: f32 = 0.2;
const FC_HIDDEN: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    /// Output channels per downsampling layer.
    pub channels: Vec<usize>,
}

impl DiscriminatorConfig {
    /// Layer count follows the resolution schedule down to a 2x2 map.
    pub fn for_resolution(resolution: usize) -> Result<DiscriminatorConfig> {
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(CoreError::config(format!(
                "resolution {} must be a power of two >= 8",
                resolution
            )));
        }
        let n_layers = resolution.trailing_zeros() as usize - 1;
        let channels = (0..n_layers).map(|i| (16 << i).min(64)).collect();
        Ok(DiscriminatorConfig {
            resolution,
            channels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n_layers = self.channels.len();
        if n_layers == 0 || self.resolution >> n_layers < 2 {
            return Err(CoreError::config(format!(
                "channel schedule {:?} does not match resolution {}",
                self.channels, self.resolution
            )));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let final_res = self.resolution >> self.channels.len();
        final_res * final_res * self.channels[self.channels.len() - 1]
    }
}

#[derive(Clone, Debug)]
struct DiscLayerParams {
    /// 3x3 stride-2 convolution.
    conv: Tensor,
    /// 1x1 projection on the pooled skip path.
    skip: Tensor,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorState {
    pub config: DiscriminatorConfig,
    layers: Vec<DiscLayerParams>,
    fc1_w: Tensor,
    fc1_b: Tensor,
    fc2_w: Tensor,
    fc2_b: Tensor,
}

impl DiscriminatorState {
    pub fn new(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Result<DiscriminatorState> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut c_in = 2usize;
        for &c_out in &config.channels {
            let conv = Tensor::randn(&[3, 3, c_in, c_out], ElemKind::Real32, rng)
                .scaled(1.0 / ((9 * c_in) as f32).sqrt());
            let skip = Tensor::randn(&[1, 1, c_in, c_out], ElemKind::Real32, rng)
                .scaled(1.0 / (c_in as f32).sqrt());
            layers.push(DiscLayerParams { conv, skip });
            c_in = c_out;
        }
        let flat = config.flat_dim();
        Ok(DiscriminatorState {
            fc1_w: Tensor::randn(&[flat, FC_HIDDEN], ElemKind::Real32, rng)
                .scaled(1.0 / (flat as f32).sqrt()),
            fc1_b: Tensor::zeros(&[FC_HIDDEN], ElemKind::Real32),
            fc2_w: Tensor::randn(&[FC_HIDDEN, 1], ElemKind::Real32, rng)
                .scaled(1.0 / (FC_HIDDEN as f32).sqrt()),
            fc2_b: Tensor::zeros(&[1], ElemKind::Real32),
            layers,
            config,
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layer{i}.conv"), &l.conv);
            f(format!("layer{i}.skip"), &l.skip);
        }
        f("fc1.weight".into(), &self.fc1_w);
        f("fc1.bias".into(), &self.fc1_b);
        f("fc2.weight".into(), &self.fc2_w);
        f("fc2.bias".into(), &self.fc2_b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layer{i}.conv"), &mut l.conv);
            f(format!("layer{i}.skip"), &mut l.skip);
        }
        f("fc1.weight".into(), &mut self.fc1_w);
        f("fc1.bias".into(), &mut self.fc1_b);
        f("fc2.weight".into(), &mut self.fc2_w);
        f("fc2.bias".into(), &mut self.fc2_b);
    }

    pub fn bind(&self, graph: &Graph, grad: bool) -> BoundDiscriminator {
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
        BoundDiscriminator {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| BoundDiscLayer {
                    conv: mk(&l.conv),
                    skip: mk(&l.skip),
                })
                .collect(),
            fc1_w: mk(&self.fc1_w),
            fc1_b: mk(&self.fc1_b),
            fc2_w: mk(&self.fc2_w),
            fc2_b: mk(&self.fc2_b),
            leaves,
        }
    }
}

#[derive(Clone)]
pub struct BoundDiscLayer {
    pub conv: Var,
    pub skip: Var,
}

pub struct BoundDiscriminator {
    pub config: DiscriminatorConfig,
    pub layers: Vec<BoundDiscLayer>,
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
    pub leaves: Vec<Var>,
}

impl BoundDiscriminator {
    /// Scalar logit for a real (h, w, 2) input.
    pub fn forward(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s != [self.config.resolution, self.config.resolution, 2] {
            return Err(CoreError::shape(format!(
                "discriminator expects ({0}, {0}, 2), got {1:?}",
                self.config.resolution, s
            )));
        }
        if x.with_value(|t| t.has_nan()) {
            return Err(CoreError::numeric(
                "discriminator input contains non-finite values".to_string(),
            ));
        }
        let mut y = x.clone();
        for layer in &self.layers {
            let main = y.conv2d_strided(&layer.conv, 2, 1)?.leaky_relu(LEAKY_SLOPE)?;
            let skip = y.avgpool2()?.conv2d_strided(&layer.skip, 1, 0)?;
            y = main.add(&skip)?;
        }
        let flat = self.config.flat_dim();
        let h = y
            .reshape(&[1, flat])?
            .matmul(&self.fc1_w)?
            .add_row(&self.fc1_b)?
            .leaky_relu(LEAKY_SLOPE)?;
        h.matmul(&self.fc2_w)?.add_row(&self.fc2_b)?.reshape(&[1])
    }
}
