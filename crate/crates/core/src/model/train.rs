//! AdamW and a minimal supervised training loop.

use std::collections::HashMap;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::{Image, Pair};
use crate::model::loss::compute_loss;
use crate::model::params::Ctx;
use crate::model::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Learning rate for prompters, fusion and head.
    pub lr: f64,
    /// Learning rate for patch projections and the encoder.
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    pub batch_size: usize,
    /// Fraction of `steps` after which learning rates drop by `decay_factor`.
    pub decay_at: Option<f64>,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 7.5e-4,
            backbone_lr: 7.5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
            batch_size: 1,
            decay_at: Some(2.0 / 3.0),
            decay_factor: 0.1,
        }
    }
}

impl TrainConfig {
    /// Settings for training small models from scratch.
    pub fn toy(steps: usize) -> Self {
        Self {
            steps,
            lr: 1e-3,
            backbone_lr: 1e-3,
            clip: Some(5.0),
            ..Self::default()
        }
    }

    /// Learning-rate multiplier at `step`.
    pub fn lr_scale(&self, step: usize) -> f64 {
        match self.decay_at {
            Some(f) if step as f64 >= f * self.steps as f64 => self.decay_factor,
            _ => 1.0,
        }
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        if name.starts_with("backbone.") || name.starts_with("patch_embed.") {
            self.backbone_lr
        } else {
            self.lr
        }
    }
}

/// One training example: standardized crops and the box in search pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub template: Pair<Image>,
    pub search: Pair<Image>,
    pub gt: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads(model: &Model, s: &Sample) -> Result<(LossValues, Vec<(String, Tensor)>)> {
    let mut ctx = Ctx::new(model.params(), true);
    let f = model.forward(&mut ctx, s.template.as_ref(), s.search.as_ref(), None)?;
    let l = compute_loss(&mut ctx.g, &f.head, &s.gt, model.config())?;
    let mut grads = ctx.g.backward(l.total)?;
    let vals = LossValues {
        total: ctx.g.value(l.total).item(),
        focal: l.focal,
        giou: l.giou,
        l1: l.l1,
    };
    Ok((vals, ctx.param_grads(&mut grads)))
}

/// Loss of one sample without gradients.
pub fn evaluate_loss(model: &Model, s: &Sample) -> Result<LossValues> {
    let mut ctx = Ctx::new(model.params(), false);
    let f = model.forward(&mut ctx, s.template.as_ref(), s.search.as_ref(), None)?;
    let l = compute_loss(&mut ctx.g, &f.head, &s.gt, model.config())?;
    Ok(LossValues {
        total: ctx.g.value(l.total).item(),
        focal: l.focal,
        giou: l.giou,
        l1: l.l1,
    })
}

pub struct AdamW {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
    /// Multiplies every learning rate.
    pub lr_scale: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
            lr_scale: 1.0,
        }
    }
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update. Weight decay is decoupled and skips vectors (biases, norm
    /// gains, λ).
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], cfg: &TrainConfig) -> Result<()> {
        self.t += 1;
        let scale = match cfg.clip {
            Some(c) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let lr = cfg.lr_for(name) * self.lr_scale;
            let p = model.params_mut().get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: p.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.data()[i] * scale;
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
                data[i] -= lr * (upd + decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Averages gradients over a batch and applies one optimizer step.
pub fn train_step(model: &mut Model, opt: &mut AdamW, batch: &[&Sample], cfg: &TrainConfig) -> Result<LossValues> {
    if batch.is_empty() {
        return Err(Error::config("empty training batch"));
    }
    let mut acc: Vec<(String, Tensor)> = Vec::new();
    let mut sum = LossValues {
        total: 0.0,
        focal: 0.0,
        giou: 0.0,
        l1: 0.0,
    };
    for s in batch {
        let (l, grads) = loss_and_grads(model, s)?;
        sum.total += l.total;
        sum.focal += l.focal;
        sum.giou += l.giou;
        sum.l1 += l.l1;
        if acc.is_empty() {
            acc = grads;
        } else {
            for ((_, a), (_, g)) in acc.iter_mut().zip(grads) {
                a.add_assign(&g);
            }
        }
    }
    let k = batch.len() as f64;
    let acc: Vec<(String, Tensor)> = acc.into_iter().map(|(n, g)| (n, g.map(|v| v / k))).collect();
    opt.step(model, &acc, cfg)?;
    Ok(LossValues {
        total: sum.total / k,
        focal: sum.focal / k,
        giou: sum.giou / k,
        l1: sum.l1 / k,
    })
}

/// Runs `cfg.steps` steps cycling through `samples` in order, `batch_size`
/// at a time. Returns the per-step mean loss.
pub fn train(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, mut on_step: impl FnMut(usize, &LossValues)) -> Result<Vec<LossValues>> {
    if samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    let mut opt = AdamW::new();
    let mut history = Vec::with_capacity(cfg.steps);
    let bs = cfg.batch_size.max(1);
    let mut cursor = 0;
    for step in 0..cfg.steps {
        let batch: Vec<&Sample> = (0..bs).map(|i| &samples[(cursor + i) % samples.len()]).collect();
        cursor = (cursor + bs) % samples.len();
        opt.lr_scale = cfg.lr_scale(step);
        let l = train_step(model, &mut opt, &batch, cfg)?;
        on_step(step, &l);
        history.push(l);
    }
    Ok(history)
}
