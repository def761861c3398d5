//! ELBO objective: multi-sample cross-entropy plus tempered, dataset-scaled KL.

use crate::error::{Error, Result};
use crate::models::{Model, NoiseSample};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Tensor};

/// Gaussian prior `N(mu, sigma^2)` shared by every weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prior {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for Prior {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Stochastic forwards per batch.
    pub samples: usize,
    pub temperature: f64,
    pub prior: Prior,
    /// Number of training examples; divides the KL term.
    pub dataset_size: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            samples: 10,
            temperature: 0.1,
            prior: Prior::default(),
            dataset_size: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboParts {
    pub nll: f64,
    pub kl: f64,
    pub temperature: f64,
    pub dataset_size: usize,
    pub total: f64,
}

impl ElboParts {
    fn new(nll: f64, kl: f64, cfg: &ObjectiveConfig) -> Self {
        Self {
            nll,
            kl,
            temperature: cfg.temperature,
            dataset_size: cfg.dataset_size,
            total: nll + cfg.temperature * kl / cfg.dataset_size as f64,
        }
    }
}

/// Gradients aligned with [`Model::layers`] and [`Model::aux`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<(Vec<f32>, Option<Vec<f32>>)>,
    pub aux: Vec<Vec<f32>>,
}

/// `KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` for a single weight.
pub fn kl_term(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    let d = mu_q - mu_p;
    (sigma_p / sigma_q).ln() + (sigma_q * sigma_q + d * d) / (2.0 * sigma_p * sigma_p) - 0.5
}

/// Summed KL over unmasked entries against a shared prior.
pub fn kl_gaussian(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: f64,
    sigma_p: f64,
    mask: Option<&[bool]>,
) -> Result<f64> {
    if mu_q.len() != sigma_q.len() || mask.is_some_and(|m| m.len() != mu_q.len()) {
        return Err(Error::Shape {
            op: "kl_gaussian",
            lhs: vec![mu_q.len()],
            rhs: vec![sigma_q.len(), mask.map_or(mu_q.len(), <[bool]>::len)],
        });
    }
    if !(sigma_p > 0.0) {
        return Err(Error::invalid(format!("prior sigma must be positive, got {sigma_p}")));
    }
    let mut total = 0.0;
    for (i, (&m, &s)) in mu_q.iter().zip(sigma_q).enumerate() {
        if mask.is_some_and(|mask| !mask[i]) {
            continue;
        }
        if !(s > 0.0) {
            return Err(Error::invalid(format!("posterior sigma at {i} is {s}")));
        }
        total += kl_term(m, s, mu_p, sigma_p);
    }
    Ok(total)
}

fn softplus64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Model KL and, when requested, its gradient w.r.t. each layer's `(mu, rho)`.
fn kl_with_grad(model: &Model, prior: Prior, want_grad: bool) -> Result<(f64, Vec<Option<(Vec<f64>, Vec<f64>)>>)> {
    if !(prior.sigma > 0.0) {
        return Err(Error::invalid(format!("prior sigma must be positive, got {}", prior.sigma)));
    }
    let var_p = prior.sigma * prior.sigma;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let w = &layer.weight;
        let Some(rho) = &w.rho else {
            grads.push(None);
            continue;
        };
        let n = w.numel();
        let (mut gmu, mut grho) = if want_grad {
            (vec![0.0; n], vec![0.0; n])
        } else {
            (Vec::new(), Vec::new())
        };
        for i in 0..n {
            if !w.mask[i] {
                continue;
            }
            let mu = w.mu[i] as f64;
            let r = rho[i] as f64;
            let sigma = softplus64(r);
            if !(sigma > 0.0) {
                return Err(Error::invalid(format!("{}: posterior sigma at {i} is {sigma}", layer.name)));
            }
            total += kl_term(mu, sigma, prior.mu, prior.sigma);
            if want_grad {
                gmu[i] = (mu - prior.mu) / var_p;
                grho[i] = (sigma / var_p - 1.0 / sigma) * sigmoid64(r);
            }
        }
        grads.push(Some((gmu, grho)));
    }
    Ok((total, grads))
}

/// Total KL of the model's posterior against `prior`; zero for deterministic models.
pub fn model_kl(model: &Model, prior: Prior) -> Result<f64> {
    Ok(kl_with_grad(model, prior, false)?.0)
}

/// Draws `samples` independent noise sets (one for deterministic models).
pub fn draw_noise_set(model: &Model, samples: usize, rng: &mut Rng) -> Vec<NoiseSample> {
    let n = if model.is_bayesian() { samples } else { 1 };
    (0..n).map(|_| model.draw_noise(rng)).collect()
}

fn check_batch(model: &Model, input: &Tensor, labels: &[usize], samples: usize) -> Result<()> {
    let n = input.shape.first().copied().unwrap_or(0);
    if n == 0 || labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if n != labels.len() {
        return Err(Error::Shape {
            op: "elbo",
            lhs: input.shape.clone(),
            rhs: vec![labels.len()],
        });
    }
    if samples == 0 {
        return Err(Error::invalid("elbo needs at least one sample"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.config().num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

fn forward_nll(
    model: &Model,
    g: &mut Graph,
    trainable: bool,
    input: &Tensor,
    labels: &[usize],
    noise: &[NoiseSample],
) -> Result<(crate::models::ModelVars, crate::tensor::Var)> {
    let vars = model.bind(g, trainable)?;
    let x = g.constant(input.shape.clone(), input.data.clone())?;
    let mut acc = None;
    for eps in noise {
        let eps = model.is_bayesian().then_some(eps);
        let logits = model.logits(g, &vars, x, eps)?;
        let ce = g.softmax_cross_entropy(logits, labels)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => g.add(a, ce)?,
        });
    }
    let sum = acc.ok_or_else(|| Error::invalid("elbo needs at least one sample"))?;
    let nll = g.scale(sum, 1.0 / noise.len() as f32);
    Ok((vars, nll))
}

/// ELBO parts for a fixed set of noise draws.
pub fn elbo_with_noise(
    model: &Model,
    input: &Tensor,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    noise: &[NoiseSample],
) -> Result<ElboParts> {
    check_batch(model, input, labels, noise.len())?;
    let mut g = Graph::new();
    let (_, nll) = forward_nll(model, &mut g, false, input, labels, noise)?;
    let kl = model_kl(model, cfg.prior)?;
    Ok(ElboParts::new(g.data(nll)[0] as f64, kl, cfg))
}

/// ELBO parts with `cfg.samples` noise draws seeded by `seed`.
pub fn elbo(model: &Model, input: &Tensor, labels: &[usize], cfg: &ObjectiveConfig, seed: u64) -> Result<ElboParts> {
    check_batch(model, input, labels, cfg.samples)?;
    let mut rng = rng::stream(seed, "elbo", 0);
    let noise = draw_noise_set(model, cfg.samples, &mut rng);
    elbo_with_noise(model, input, labels, cfg, &noise)
}

/// ELBO parts plus the gradient of `total` w.r.t. every trainable parameter.
pub fn elbo_gradients(
    model: &Model,
    input: &Tensor,
    labels: &[usize],
    cfg: &ObjectiveConfig,
    noise: &[NoiseSample],
) -> Result<(ElboParts, Gradients)> {
    check_batch(model, input, labels, noise.len())?;
    let mut g = Graph::new();
    let (vars, nll) = forward_nll(model, &mut g, true, input, labels, noise)?;
    g.backward(nll)?;
    let (kl, kl_grads) = kl_with_grad(model, cfg.prior, true)?;
    let kl_scale = cfg.temperature / cfg.dataset_size as f64;

    let grad_of = |v| -> Vec<f32> {
        g.grad(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
    };
    let mut weights = Vec::with_capacity(vars.weights.len());
    for (wv, klg) in vars.weights.iter().zip(kl_grads) {
        let mut gmu = grad_of(wv.mu);
        let mut grho = wv.rho.map(grad_of);
        if let (Some((kmu, krho)), Some(grho)) = (klg, grho.as_mut()) {
            for (a, k) in gmu.iter_mut().zip(&kmu) {
                *a = (*a as f64 + kl_scale * k) as f32;
            }
            for (a, k) in grho.iter_mut().zip(&krho) {
                *a = (*a as f64 + kl_scale * k) as f32;
            }
        }
        weights.push((gmu, grho));
    }
    let aux = vars.aux.iter().map(|&a| grad_of(a)).collect();
    Ok((ElboParts::new(g.data(nll)[0] as f64, kl, cfg), Gradients { weights, aux }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn toy() -> (Model, Tensor, Vec<usize>) {
        let m = Model::build(&ModelConfig::mlp(&[2, 8, 3], true), 5).unwrap();
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap();
        (m, x, vec![0, 2, 1])
    }

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(kl_gaussian(&[0.0], &[1.0], 0.0, 1.0, None).unwrap(), 0.0);
        assert!((kl_gaussian(&[1.0], &[1.0], 0.0, 1.0, None).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_gaussian(&[0.0], &[0.0], 0.0, 1.0, None).is_err());
        assert!(kl_gaussian(&[0.0], &[1.0], 0.0, -1.0, None).is_err());
        // masked entries neither count nor need a valid sigma
        let masked = kl_gaussian(&[1.0, 3.0], &[1.0, 0.0], 0.0, 1.0, Some(&[true, false])).unwrap();
        assert!((masked - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_mask_then_sum_equals_sum_over_unmasked() {
        let (mut m, _, _) = toy();
        let full = model_kl(&m, Prior::default()).unwrap();
        let mask: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        m.layers_mut()[0].weight.set_mask(&mask).unwrap();
        let pruned = model_kl(&m, Prior::default()).unwrap();
        let mut manual = 0.0;
        for (li, l) in m.layers().iter().enumerate() {
            let sigma = l.weight.sigma().unwrap();
            for i in 0..l.weight.numel() {
                if li == 0 && !mask[i] {
                    continue;
                }
                manual += kl_term(l.weight.mu[i] as f64, sigma[i] as f64, 0.0, 1.0);
            }
        }
        assert!(pruned < full);
        assert!((pruned - manual).abs() < 1e-6 * manual);
    }

    #[test]
    fn zero_temperature_total_is_nll() {
        let (m, x, y) = toy();
        let cfg = ObjectiveConfig {
            temperature: 0.0,
            dataset_size: 10,
            ..Default::default()
        };
        let parts = elbo(&m, &x, &y, &cfg, 3).unwrap();
        assert!(parts.kl > 0.0);
        assert_eq!(parts.total, parts.nll);
    }

    #[test]
    fn degenerate_posterior_nll_is_deterministic_ce() {
        let (mut m, x, y) = toy();
        for l in m.layers_mut() {
            l.weight.rho.as_mut().unwrap().iter_mut().for_each(|r| *r = -200.0);
        }
        let cfg = ObjectiveConfig::default();
        let parts = elbo(&m, &x, &y, &cfg, 11).unwrap();
        let det = Model::build(&ModelConfig::mlp(&[2, 8, 3], false), 5).unwrap();
        let mut g = Graph::new();
        let vars = det.bind(&mut g, false).unwrap();
        let xv = g.constant(x.shape.clone(), x.data.clone()).unwrap();
        let logits = det.logits(&mut g, &vars, xv, None).unwrap();
        let ce = g.softmax_cross_entropy(logits, &y).unwrap();
        assert!((parts.nll - g.data(ce)[0] as f64).abs() < 1e-6);
    }

    #[test]
    fn elbo_is_deterministic_and_rejects_empty() {
        let (m, x, y) = toy();
        let cfg = ObjectiveConfig::default();
        assert_eq!(elbo(&m, &x, &y, &cfg, 9).unwrap(), elbo(&m, &x, &y, &cfg, 9).unwrap());
        let empty = Tensor::zeros(vec![0, 2]);
        assert!(elbo(&m, &empty, &[], &cfg, 9).is_err());
    }

    #[test]
    fn gradient_parts_agree_with_value() {
        let (m, x, y) = toy();
        let cfg = ObjectiveConfig {
            dataset_size: 4,
            ..Default::default()
        };
        let mut rng = rng::stream(1, "noise", 0);
        let noise = draw_noise_set(&m, 4, &mut rng);
        let (parts, grads) = elbo_gradients(&m, &x, &y, &cfg, &noise).unwrap();
        assert_eq!(parts, elbo_with_noise(&m, &x, &y, &cfg, &noise).unwrap());
        assert_eq!(grads.weights.len(), 2);
        assert!(grads.weights.iter().all(|(_, r)| r.is_some()));
        assert_eq!(grads.aux.len(), 2);
    }
}
