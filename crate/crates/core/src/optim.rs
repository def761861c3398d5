//! ADAM with decoupled weight decay, and epoch-indexed learning-rate schedules.

use crate::error::{Error, Result};
use crate::models::Model;
use crate::objective::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied to means and deterministic parameters, never to `rho`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One ADAM update of `param` in place. `step` is the 1-based update count.
///
/// Entries with `mask[i] == false` are left untouched, as are their moments.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
    decay: bool,
    mask: Option<&[bool]>,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = grad[i] as f64;
        let m = cfg.beta1 * moments.m[i] as f64 + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] as f64 + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m as f32;
        moments.v[i] = v as f32;
        let mut p = param[i] as f64;
        if decay {
            p -= lr * cfg.weight_decay * p;
        }
        p -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        param[i] = p as f32;
    }
}

/// Optimizer state for every trainable array of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub weights: Vec<(Moments, Option<Moments>)>,
    pub aux: Vec<Moments>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        Self {
            step: 0,
            weights: model
                .layers()
                .iter()
                .map(|l| {
                    let n = l.weight.numel();
                    (Moments::zeros(n), l.weight.is_variational().then(|| Moments::zeros(n)))
                })
                .collect(),
            aux: model.aux().iter().map(|a| Moments::zeros(a.value.len())).collect(),
        }
    }
}

/// Applies one ADAM step to every parameter of `model`.
pub fn adam_step(
    model: &mut Model,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.weights.len() != model.layers().len() || grads.aux.len() != model.aux().len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![model.layers().len(), model.aux().len()],
            rhs: vec![grads.weights.len(), grads.aux.len()],
        });
    }
    state.step += 1;
    let step = state.step;
    for ((layer, (gmu, grho)), (mmu, mrho)) in model
        .layers_mut()
        .iter_mut()
        .zip(&grads.weights)
        .zip(&mut state.weights)
    {
        let w = &mut layer.weight;
        adam_update(&mut w.mu, gmu, mmu, step, lr, cfg, true, Some(&w.mask));
        if let (Some(rho), Some(grho), Some(mrho)) = (w.rho.as_mut(), grho, mrho.as_mut()) {
            adam_update(rho, grho, mrho, step, lr, cfg, false, Some(&w.mask));
        }
    }
    for ((a, g), m) in model.aux_mut().iter_mut().zip(&grads.aux).zip(&mut state.aux) {
        adam_update(&mut a.value, g, m, step, lr, cfg, true, None);
    }
    Ok(())
}

/// Step-drop schedule with optional linear warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 0.001,
            milestones: vec![80, 120],
            gamma: 0.1,
            warmup_epochs: 0,
        }
    }
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            milestones: Vec::new(),
            gamma: 1.0,
            warmup_epochs: 0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        let lr = self.base_lr * self.gamma.powi(drops as i32);
        if epoch < self.warmup_epochs {
            lr * epoch as f64 / self.warmup_epochs as f64
        } else {
            lr
        }
    }
}
