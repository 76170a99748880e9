//! Adam and RMSprop parameter updates over flat tensor lists.

use super::Tensor;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape(), p.kind())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape(), p.kind())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step; `params`, `grads` and state run in lockstep.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    check_lockstep(params, grads, state.m.len(), "adam")?;
    state.t += 1;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(state.t as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i] as f64;
            let mi = cfg.beta1 as f64 * md[i] as f64 + (1.0 - cfg.beta1 as f64) * gi;
            let vi = cfg.beta2 as f64 * vd[i] as f64 + (1.0 - cfg.beta2 as f64) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            pd[i] = (pd[i] as f64 - cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct RmsPropConfig {
    pub lr: f32,
    /// Decay of the squared-gradient accumulator.
    pub decay: f32,
    pub momentum: f32,
    pub eps: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            lr: 0.1,
            decay: 0.9,
            momentum: 0.9,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RmsPropState {
    sq: Vec<Tensor>,
    mom: Vec<Tensor>,
}

impl RmsPropState {
    pub fn new(params: &[Tensor]) -> RmsPropState {
        RmsPropState {
            sq: params.iter().map(|p| Tensor::zeros(p.shape(), p.kind())).collect(),
            mom: params.iter().map(|p| Tensor::zeros(p.shape(), p.kind())).collect(),
        }
    }
}

/// One RMSprop step with momentum:
/// sq <- d*sq + (1-d)*g^2; mom <- mu*mom + lr*g/sqrt(sq + eps); p <- p - mom.
pub fn rmsprop_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut RmsPropState,
    cfg: &RmsPropConfig,
) -> Result<()> {
    check_lockstep(params, grads, state.sq.len(), "rmsprop")?;
    for ((p, g), (sq, mom)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.sq.iter_mut().zip(state.mom.iter_mut()))
    {
        let (pd, gd) = (p.data_mut(), g.data());
        let (sd, md) = (sq.data_mut(), mom.data_mut());
        for i in 0..pd.len() {
            let gi = gd[i] as f64;
            let si = cfg.decay as f64 * sd[i] as f64 + (1.0 - cfg.decay as f64) * gi * gi;
            sd[i] = si as f32;
            let step = cfg.momentum as f64 * md[i] as f64
                + cfg.lr as f64 * gi / (si + cfg.eps as f64).sqrt();
            md[i] = step as f32;
            pd[i] = (pd[i] as f64 - step) as f32;
        }
    }
    Ok(())
}

fn check_lockstep(params: &[Tensor], grads: &[Tensor], state_len: usize, what: &str) -> Result<()> {
    if params.len() != grads.len() || params.len() != state_len {
        return Err(CoreError::contract(format!(
            "{}: {} params, {} grads, {} state entries",
            what,
            params.len(),
            grads.len(),
            state_len
        )));
    }
    for (p, g) in params.iter().zip(grads.iter()) {
        if p.shape() != g.shape() || p.kind() != g.kind() {
            return Err(CoreError::contract(format!(
                "{}: param {:?} vs grad {:?} shape mismatch",
                what,
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = vec![Tensor::from_real_vec(&[2], vec![1.5, -0.5]).unwrap()];
        let before = params[0].clone();
        let grads = vec![Tensor::zeros(&[2], super::super::ElemKind::Real32)];
        let mut st = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(params[0], before);
    }

    #[test]
    fn adam_single_step_matches_hand_computation() {
        // p=1, g=1, lr=0.001, b1=0, b2=0.99, bias-corrected:
        // m=1, v=0.01, mhat=1, vhat=1 -> p = 1 - 0.001/(1+eps)
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut st, &cfg).unwrap();
        let expect = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!(
            (params[0].data()[0] as f64 - expect).abs() < 1e-6,
            "{} vs {expect}",
            params[0].data()[0]
        );
    }

    #[test]
    fn rmsprop_single_step_matches_hand_stepped_reference() {
        let (lr, decay, momentum, eps) =
            (0.1f32 as f64, 0.9f32 as f64, 0.9f32 as f64, 1e-8f32 as f64);
        let (p0, g) = (0.7f32, 0.3f32);
        // Hand-stepped standard update from zero state.
        let sq = (1.0 - decay) * (g as f64) * (g as f64);
        let mom = momentum * 0.0 + lr * g as f64 / (sq + eps).sqrt();
        let p_ref = (p0 as f64 - mom) as f32;
        let mut params = vec![Tensor::scalar(p0)];
        let grads = vec![Tensor::scalar(g)];
        let mut st = RmsPropState::new(&params);
        let cfg = RmsPropConfig {
            lr: lr as f32,
            decay: decay as f32,
            momentum: momentum as f32,
            eps: eps as f32,
        };
        rmsprop_step(&mut params, &grads, &mut st, &cfg).unwrap();
        assert!(
            (params[0].data()[0] as f64 - p_ref as f64).abs() < 1e-8,
            "{} vs {p_ref}",
            params[0].data()[0]
        );
    }

    #[test]
    fn rmsprop_momentum_accumulates_over_steps() {
        // With constant gradient the momentum buffer keeps growing, so the
        // second step moves the parameter further than the first.
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(0.5)];
        let mut st = RmsPropState::new(&params);
        let cfg = RmsPropConfig::default();
        rmsprop_step(&mut params, &grads, &mut st, &cfg).unwrap();
        let p1 = params[0].data()[0];
        rmsprop_step(&mut params, &grads, &mut st, &cfg).unwrap();
        let p2 = params[0].data()[0];
        let (d1, d2) = (1.0 - p1, p1 - p2);
        assert!(d2 > d1, "second step {d2} should exceed first {d1}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2], super::super::ElemKind::Real32)];
        let grads = vec![Tensor::zeros(&[3], super::super::ElemKind::Real32)];
        let mut st = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut st, &AdamConfig::default()).is_err());
    }
}
