//! Unsupervised adversarial pre-training of the image prior.
//!
//! Generator and mapper minimize the non-saturating logistic loss; the
//! discriminator minimizes the same family of loss augmented with an R1
//! gradient penalty on real inputs. One discriminator step then one
//! generator step per batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{DiscriminatorConfig, DiscriminatorState};
use crate::error::{CoreError, Result};
use crate::mapper::{MapperState, RawLatents};
use crate::synthesizer::{LatentVars, SynthesizerConfig, SynthesizerState};
use crate::tensor::graph::{backward, Graph, Var};
use crate::tensor::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{ElemKind, Tensor};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Gradient-penalty weight eta.
    pub grad_penalty: f32,
    pub batch_size: usize,
    pub steps: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            grad_penalty: 10.0,
            batch_size: 4,
            steps: 300,
            checkpoint_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss_g: f64,
    pub loss_d: f64,
    pub penalty: f64,
}

impl TrainLogEntry {
    pub fn to_line(&self) -> String {
        format!(
            "step = {} loss_g = {:.6} loss_d = {:.6} penalty = {:.6}",
            self.step, self.loss_g, self.loss_d, self.penalty
        )
    }
}

/// Non-saturating generator loss: mean of -log sigmoid(logit), computed as
/// softplus(-logit).
pub fn generator_loss(logits_fake: &[Var]) -> Result<Var> {
    mean_of(logits_fake.iter().map(|l| l.neg().softplus()))
}

/// Discriminator adversarial part: mean -log(1 - sigmoid(fake)) plus mean
/// -log sigmoid(real), i.e. softplus(fake) + softplus(-real).
pub fn discriminator_adv_loss(logits_fake: &[Var], logits_real: &[Var]) -> Result<Var> {
    let fake = mean_of(logits_fake.iter().map(|l| l.softplus()))?;
    let real = mean_of(logits_real.iter().map(|l| l.neg().softplus()))?;
    fake.add(&real)
}

/// Mean squared L2 norm of d(logit)/d(input) over a batch of real inputs.
/// The gradients are built as graph nodes so the result stays
/// differentiable with respect to the discriminator weights.
pub fn r1_penalty(inputs: &[Var], logits_real: &[Var]) -> Result<Var> {
    if inputs.len() != logits_real.len() || inputs.is_empty() {
        return Err(CoreError::contract(
            "penalty needs one logit per input".to_string(),
        ));
    }
    let mut total = logits_real[0].clone();
    for l in &logits_real[1..] {
        total = total.add(l)?;
    }
    let total = total.sum_all()?;
    let grads = backward(&total)?;
    let mut terms = Vec::with_capacity(inputs.len());
    for x in inputs {
        match grads.grad(x) {
            Some(gx) => terms.push(gx.square()?.sum_all()?),
            // A constant discriminator has zero input gradient.
            None => terms.push(x.graph().constant(Tensor::scalar(0.0))),
        }
    }
    mean_vars(&terms)
}

fn mean_of(iter: impl Iterator<Item = Result<Var>>) -> Result<Var> {
    let vars: Vec<Var> = iter
        .map(|v| v.and_then(|v| v.sum_all()))
        .collect::<Result<Vec<_>>>()?;
    mean_vars(&vars)
}

fn mean_vars(vars: &[Var]) -> Result<Var> {
    if vars.is_empty() {
        return Err(CoreError::contract("mean of empty list".to_string()));
    }
    let mut acc = vars[0].clone();
    for v in &vars[1..] {
        acc = acc.add(v)?;
    }
    Ok(acc.mul_scalar(1.0 / vars.len() as f32))
}

/// Owns the three networks and their optimizer states.
pub struct Trainer {
    pub synth: SynthesizerState,
    pub mapper: MapperState,
    pub disc: DiscriminatorState,
    pub cfg: TrainConfig,
    adam_gen: Option<AdamState>,
    adam_disc: Option<AdamState>,
    rng: ChaCha8Rng,
    pub steps_done: usize,
}

impl Trainer {
    pub fn new(synth_cfg: SynthesizerConfig, cfg: TrainConfig) -> Result<Trainer> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let synth = SynthesizerState::new(synth_cfg.clone(), &mut rng)?;
        let mapper = MapperState::new(synth_cfg.k_local, synth_cfg.latent_dim, &mut rng)?;
        let disc = DiscriminatorState::new(
            DiscriminatorConfig::for_resolution(synth_cfg.final_resolution)?,
            &mut rng,
        )?;
        Ok(Trainer {
            synth,
            mapper,
            disc,
            cfg,
            adam_gen: None,
            adam_disc: None,
            rng,
            steps_done: 0,
        })
    }

    /// Draw a batch of fake images without building gradient state.
    pub fn sample_fakes(&mut self, count: usize) -> Result<Vec<Tensor>> {
        let graph = Graph::new();
        let bm = self.mapper.bind(&graph, false);
        let bs = self.synth.bind(&graph, false, false);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = RawLatents::sample(
                self.synth.config.k_local,
                self.synth.config.latent_dim,
                &mut self.rng,
            );
            let zl = graph.constant(z.local);
            let zg = graph.constant(z.global);
            let (wl, wg) = bm.forward(&zl, &zg)?;
            let latents = LatentVars::uniform(&self.synth.config, &wl, &wg);
            out.push(bs.forward(&latents, None)?.value());
        }
        Ok(out)
    }

    /// Discriminator loss on given batches, without updating anything.
    pub fn eval_discriminator_loss(&self, fakes: &[Tensor], reals: &[Tensor]) -> Result<(f64, f64)> {
        let graph = Graph::new();
        let bd = self.disc.bind(&graph, false);
        let mut fake_logits = Vec::new();
        for f in fakes {
            let x = graph.constant(f.complex_as_channels()?);
            fake_logits.push(bd.forward(&x)?);
        }
        let mut real_logits = Vec::new();
        let mut real_vars = Vec::new();
        for r in reals {
            let x = graph.leaf(r.complex_as_channels()?);
            real_vars.push(x.clone());
            real_logits.push(bd.forward(&x)?);
        }
        let adv = discriminator_adv_loss(&fake_logits, &real_logits)?;
        let pen = r1_penalty(&real_vars, &real_logits)?
            .mul_scalar(self.cfg.grad_penalty / 2.0);
        let loss = adv.add(&pen)?;
        Ok((loss.scalar_value()? as f64, pen.scalar_value()? as f64))
    }

    /// One discriminator update on fixed batches. Returns (loss, penalty).
    pub fn discriminator_step(&mut self, fakes: &[Tensor], reals: &[Tensor]) -> Result<(f64, f64)> {
        let graph = Graph::new();
        let bd = self.disc.bind(&graph, true);
        let mut fake_logits = Vec::new();
        for f in fakes {
            let x = graph.constant(f.complex_as_channels()?);
            fake_logits.push(bd.forward(&x)?);
        }
        let mut real_logits = Vec::new();
        let mut real_vars = Vec::new();
        for r in reals {
            let x = graph.leaf(r.complex_as_channels()?);
            real_vars.push(x.clone());
            real_logits.push(bd.forward(&x)?);
        }
        let adv = discriminator_adv_loss(&fake_logits, &real_logits)?;
        let pen = r1_penalty(&real_vars, &real_logits)?
            .mul_scalar(self.cfg.grad_penalty / 2.0);
        let loss = adv.add(&pen)?;
        let loss_v = loss.scalar_value()? as f64;
        let pen_v = pen.scalar_value()? as f64;
        if !loss_v.is_finite() {
            return Err(CoreError::numeric(format!(
                "discriminator loss diverged at step {}",
                self.steps_done
            )));
        }
        let grads = backward(&loss)?;
        let mut params: Vec<Tensor> = Vec::new();
        let mut grad_list: Vec<Tensor> = Vec::new();
        for v in &bd.leaves {
            params.push(v.value());
            grad_list.push(grads.grad_tensor(v));
        }
        let state = self
            .adam_disc
            .get_or_insert_with(|| AdamState::new(&params));
        adam_step(&mut params, &grad_list, state, &self.cfg.adam)?;
        let mut it = params.into_iter();
        self.disc.visit_params_mut(&mut |_, t| {
            *t = it.next().expect("parameter count changed");
        });
        Ok((loss_v, pen_v))
    }

    /// One generator+mapper update. Returns the generator loss.
    pub fn generator_step(&mut self) -> Result<f64> {
        let graph = Graph::new();
        let bd = self.disc.bind(&graph, false);
        let bm = self.mapper.bind(&graph, true);
        let bs = self.synth.bind(&graph, true, true);
        let mut logits = Vec::new();
        for _ in 0..self.cfg.batch_size {
            let z = RawLatents::sample(
                self.synth.config.k_local,
                self.synth.config.latent_dim,
                &mut self.rng,
            );
            let zl = graph.constant(z.local);
            let zg = graph.constant(z.global);
            let (wl, wg) = bm.forward(&zl, &zg)?;
            let latents = LatentVars::uniform(&self.synth.config, &wl, &wg);
            let img = bs.forward(&latents, None)?;
            logits.push(bd.forward(&img.complex_to_channels()?)?);
        }
        let loss = generator_loss(&logits)?;
        let loss_v = loss.scalar_value()? as f64;
        if !loss_v.is_finite() {
            return Err(CoreError::numeric(format!(
                "generator loss diverged at step {}",
                self.steps_done
            )));
        }
        let grads = backward(&loss)?;
        let mut params: Vec<Tensor> = Vec::new();
        let mut grad_list: Vec<Tensor> = Vec::new();
        for (_, v) in &bs.leaves {
            params.push(v.value());
            grad_list.push(grads.grad_tensor(v));
        }
        for v in &bm.leaves {
            params.push(v.value());
            grad_list.push(grads.grad_tensor(v));
        }
        let state = self.adam_gen.get_or_insert_with(|| AdamState::new(&params));
        adam_step(&mut params, &grad_list, state, &self.cfg.adam)?;
        let mut it = params.into_iter();
        self.synth.visit_params_mut(&mut |_, _, t| {
            *t = it.next().expect("parameter count changed");
        });
        self.mapper.visit_params_mut(&mut |_, t| {
            *t = it.next().expect("parameter count changed");
        });
        Ok(loss_v)
    }

    /// One D step then one G step on a batch of real images.
    pub fn train_step(&mut self, reals: &[Tensor]) -> Result<TrainLogEntry> {
        let fakes = self.sample_fakes(reals.len())?;
        let (loss_d, penalty) = self.discriminator_step(&fakes, reals)?;
        let loss_g = self.generator_step()?;
        self.steps_done += 1;
        Ok(TrainLogEntry {
            step: self.steps_done,
            loss_g,
            loss_d,
            penalty,
        })
    }

    /// Run the configured number of steps over a dataset of complex images,
    /// zero-padding them to the synthesizer's output resolution if needed.
    /// `on_checkpoint` fires every `checkpoint_every` steps and once at the
    /// end.
    pub fn train(
        &mut self,
        dataset: &[Tensor],
        mut on_log: impl FnMut(&TrainLogEntry),
        mut on_checkpoint: impl FnMut(&Trainer, usize) -> Result<()>,
    ) -> Result<Vec<TrainLogEntry>> {
        if dataset.is_empty() {
            return Err(CoreError::config("training dataset is empty".to_string()));
        }
        let res = self.synth.config.final_resolution;
        let padded: Vec<Tensor> = dataset
            .iter()
            .map(|t| pad_to(t, res))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = Vec::new();
        let mut log = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let mut batch = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                if order.is_empty() {
                    order = (0..padded.len()).collect();
                    order.shuffle(&mut self.rng);
                }
                batch.push(padded[order.pop().expect("refilled above")].clone());
            }
            let entry = self.train_step(&batch)?;
            on_log(&entry);
            let due = self.cfg.checkpoint_every > 0
                && entry.step % self.cfg.checkpoint_every == 0;
            if due || entry.step == self.cfg.steps {
                on_checkpoint(self, entry.step)?;
            }
            log.push(entry);
        }
        Ok(log)
    }
}

fn pad_to(t: &Tensor, res: usize) -> Result<Tensor> {
    let s = t.shape();
    if !t.is_complex() || s.len() != 2 {
        return Err(CoreError::shape(format!(
            "training images must be complex (h, w), got {:?}",
            s
        )));
    }
    if s[0] > res || s[1] > res {
        return Err(CoreError::shape(format!(
            "image {}x{} exceeds generator resolution {}",
            s[0], s[1], res
        )));
    }
    if s == [res, res] {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&[res, res], ElemKind::Complex64);
    let (y0, x0) = ((res - s[0]) / 2, (res - s[1]) / 2);
    for y in 0..s[0] {
        for x in 0..s[1] {
            let (re, im) = t.complex(y * s[1] + x);
            out.set_complex((y0 + y) * res + x0 + x, re, im);
        }
    }
    Ok(out)
}
