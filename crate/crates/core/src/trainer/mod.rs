//! Synthetic data, epsilon-prediction training, and checkpoint persistence.

pub mod checkpoint;
pub mod dataset;
pub mod scene;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserModel;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use scene::{gen_scene, render_condition, ConditionKind, Scene, SceneSpec, ShapeKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_steps`.
    pub lr: f64,
    pub warmup_steps: usize,
    /// Cosine decay ends at `lr * min_lr_frac` on the last step.
    pub min_lr_frac: f64,
    /// Probability of replacing the label with the null class.
    pub cfg_dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 200,
            min_lr_frac: 0.1,
            cfg_dropout: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.cfg_dropout) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return Err(Error::config("cfg_dropout and min_lr_frac must lie in [0, 1]"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for the 0-based `step`: linear warmup, then cosine decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.lr * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cos)
    }
}

/// One clean training image with its scene class.
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Tensor,
    pub class_id: usize,
}

pub fn examples_from_scenes(scenes: &[Scene]) -> Vec<Example> {
    scenes
        .iter()
        .map(|s| Example {
            image: s.image.to_tensor(),
            class_id: s.spec.class_id,
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

/// Mutable training state: optimiser moments, data stream and step counter.
pub struct Trainer {
    cfg: TrainConfig,
    adam: Adam,
    rng: Stream,
    grads: Vec<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: &DenoiserModel) -> Result<Self> {
        cfg.validate()?;
        let n = model.params().len();
        Ok(Self {
            rng: rng::stream(cfg.seed),
            adam: Adam::new(n),
            grads: vec![0.0; n],
            step: 0,
            cfg,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Digest of the data stream's seed and position.
    pub fn rng_digest(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.rng.get_seed());
        h.update(self.rng.get_stream().to_le_bytes());
        h.update(self.rng.get_word_pos().to_le_bytes());
        let d = h.finalize();
        u64::from_le_bytes(d.as_slice()[..8].try_into().unwrap())
    }

    /// Runs one optimiser step and returns the batch loss.
    ///
    /// Per example the stream yields, in order: the example index, the
    /// timestep, the label-dropout coin and the noise tensor.
    pub fn step(&mut self, model: &mut DenoiserModel, sched: &NoiseSchedule, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let null = model.config().null_class();
        let b = self.cfg.batch_size;
        self.grads.fill(0.0);
        let mut loss = 0.0f64;
        for _ in 0..b {
            let ex = &data[self.rng.gen_range(0..data.len())];
            let t = self.rng.gen_range(1..=sched.num_train_steps());
            let drop = self.rng.gen::<f64>() < self.cfg.cfg_dropout;
            let eps = rng::normal(&mut self.rng, ex.image.shape());
            let x_t = sched.forward_diffuse(&ex.image, t, &eps)?;
            let cond = if drop { null } else { ex.class_id };
            let (out, cache) = model.forward_train(&x_t, t, cond)?;
            let scale = 2.0 / (b * out.len()) as f32;
            let diff = out.sub(&eps);
            loss += diff.data().iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / out.len() as f64;
            model.backward(&cache, &diff.scale(scale), &mut self.grads);
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Training { step: self.step, loss });
        }
        if self.cfg.grad_clip > 0.0 {
            let norm = self.grads.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Training { step: self.step, loss: norm });
            }
            if norm > self.cfg.grad_clip {
                let k = (self.cfg.grad_clip / norm) as f32;
                self.grads.iter_mut().for_each(|g| *g *= k);
            }
        }
        let lr = self.cfg.lr_at(self.step);
        self.adam.update(model.params_mut().data_mut(), &self.grads, lr);
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self, model: &DenoiserModel) -> Checkpoint {
        Checkpoint::from_model(model, self.step as u64, self.rng_digest())
    }
}

/// Trains for `cfg.steps` steps, calling `on_step(step, loss)` after each.
pub fn train(
    model: &mut DenoiserModel,
    sched: &NoiseSchedule,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg.clone(), model)?;
    for _ in 0..cfg.steps {
        let loss = trainer.step(model, sched, data)?;
        on_step(trainer.steps_done(), loss);
    }
    Ok(trainer.checkpoint(model))
}

/// Mean epsilon-prediction loss on `n` draws from a stream seeded by `seed`.
/// Labels are never dropped; draw order matches [`Trainer::step`].
pub fn eval_loss(model: &DenoiserModel, sched: &NoiseSchedule, data: &[Example], n: usize, seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed);
    let mut total = 0.0;
    for _ in 0..n {
        let ex = &data[r.gen_range(0..data.len())];
        let t = r.gen_range(1..=sched.num_train_steps());
        let _ = r.gen::<f64>();
        let eps = rng::normal(&mut r, ex.image.shape());
        let x_t = sched.forward_diffuse(&ex.image, t, &eps)?;
        let out = model.predict(&x_t, t, ex.class_id)?;
        total += out.mean_sq_diff(&eps);
    }
    Ok(total / n as f64)
}
