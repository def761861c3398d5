//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bayes_lth::data::synth_blobs;
use bayes_lth::data::Dataset;
use bayes_lth::models::{Model, NoiseSample};
use bayes_lth::optim::Schedule;
use bayes_lth::tensor::Tensor;
use bayes_lth::train::TrainConfig;

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Independent f64 forward of a biased ReLU MLP under fixed noise.
///
/// Deterministic models get `rho = None` and a single noiseless pass; their
/// objective is the plain mean cross-entropy.
pub struct MlpOracle {
    pub dims: Vec<usize>,
    pub mu: Vec<Vec<f64>>,
    pub rho: Option<Vec<Vec<f64>>>,
    pub bias: Vec<Vec<f64>>,
    pub noise: Vec<Vec<Vec<f64>>>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub temperature: f64,
    pub dataset_size: f64,
}

impl MlpOracle {
    pub fn new(model: &Model, noise: &[NoiseSample], x: &Tensor, y: &[usize], temperature: f64, dataset_size: usize) -> Self {
        let f64s = |v: &[f32]| v.iter().map(|&a| a as f64).collect::<Vec<f64>>();
        let mut dims = vec![x.shape[1]];
        dims.extend(model.layers().iter().map(|l| l.weight.shape[0]));
        let bayesian = model.is_bayesian();
        let width = x.shape[1];
        Self {
            dims,
            mu: model.layers().iter().map(|l| f64s(&l.weight.effective_mean())).collect(),
            rho: bayesian.then(|| model.layers().iter().map(|l| f64s(l.weight.rho.as_ref().unwrap())).collect()),
            bias: model.aux().iter().map(|a| f64s(&a.value)).collect(),
            noise: if bayesian {
                noise
                    .iter()
                    .map(|s| s.layers.iter().map(|l| f64s(l.as_ref().unwrap())).collect())
                    .collect()
            } else {
                Vec::new()
            },
            x: (0..y.len()).map(|i| f64s(&x.data[i * width..(i + 1) * width])).collect(),
            y: y.to_vec(),
            temperature,
            dataset_size: dataset_size as f64,
        }
    }

    fn logits(&self, x: &[f64], eps: Option<&Vec<Vec<f64>>>) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..self.mu.len() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let mut next = self.bias[l].clone();
            for (o, out) in next.iter_mut().enumerate().take(n_out) {
                for (i, hi) in h.iter().enumerate().take(n_in) {
                    let k = o * n_in + i;
                    let mut w = self.mu[l][k];
                    if let (Some(rho), Some(eps)) = (&self.rho, eps) {
                        w += softplus(rho[l][k]) * eps[l][k];
                    }
                    *out += w * hi;
                }
            }
            if l + 1 < self.mu.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        h
    }

    pub fn nll(&self) -> f64 {
        let passes: Vec<Option<&Vec<Vec<f64>>>> = if self.rho.is_some() {
            self.noise.iter().map(Some).collect()
        } else {
            vec![None]
        };
        let mut nll = 0.0;
        for eps in &passes {
            let mut ce = 0.0;
            for (x, &y) in self.x.iter().zip(&self.y) {
                let h = self.logits(x, *eps);
                let m = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + h.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce += lse - h[y];
            }
            nll += ce / self.x.len() as f64;
        }
        nll / passes.len() as f64
    }

    /// KL against N(0, 1).
    pub fn kl(&self) -> f64 {
        let Some(rho) = &self.rho else { return 0.0 };
        let mut kl = 0.0;
        for (mu, rho) in self.mu.iter().zip(rho) {
            for (&m, &r) in mu.iter().zip(rho) {
                let s = softplus(r);
                kl += -s.ln() + (s * s + m * m) / 2.0 - 0.5;
            }
        }
        kl
    }

    pub fn total(&self) -> f64 {
        self.nll() + self.temperature * self.kl() / self.dataset_size
    }

    fn slot(&mut self, l: usize, k: usize, rho: bool) -> &mut f64 {
        if rho {
            &mut self.rho.as_mut().expect("deterministic oracle has no rho")[l][k]
        } else {
            &mut self.mu[l][k]
        }
    }

    /// Central difference of `total` w.r.t. `mu[l][k]` (`rho = false`) or `rho[l][k]`.
    pub fn finite_difference(&mut self, l: usize, k: usize, rho: bool, h: f64) -> f64 {
        let orig = *self.slot(l, k, rho);
        *self.slot(l, k, rho) = orig + h;
        let up = self.total();
        *self.slot(l, k, rho) = orig - h;
        let down = self.total();
        *self.slot(l, k, rho) = orig;
        (up - down) / (2.0 * h)
    }
}

/// Relative error with a tiny floor so exact zeros compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// The 4-class blob task used for the trend checks.
pub fn toy_blobs(seed: u64) -> (Dataset, Dataset) {
    (
        synth_blobs(100, 4, 0.6, 1000 + seed).unwrap(),
        synth_blobs(250, 4, 0.6, 2000 + seed).unwrap(),
    )
}

/// Short budget at which mask quality still shows in accuracy.
pub fn toy_train(samples: usize) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        batch_size: 32,
        schedule: Schedule {
            base_lr: 0.003,
            milestones: vec![4, 6],
            gamma: 0.1,
            warmup_epochs: 0,
        },
        samples,
        eval_samples: samples,
        ..Default::default()
    }
}
