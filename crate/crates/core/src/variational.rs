//! Mean-field Gaussian weight tensors and their reparameterized forward pass.
//!
//! A variational weight stores a posterior mean `mu` and an unconstrained
//! `rho` with `sigma = softplus(rho)`. Deterministic weights are the same
//! structure without `rho`. The pruning mask multiplies the sampled weight,
//! so a masked entry behaves as `(mu, sigma) = (0, 0)` in every forward pass.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{softplus_inverse, softplus_scalar, Graph, Var};

/// Fraction of the Kaiming bound used as the initial posterior standard deviation.
pub const SIGMA_INIT_FRACTION: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Input features (linear) or input channels (conv).
    pub in_features: usize,
    pub out_features: usize,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn linear(in_features: usize, out_features: usize, prunable: bool) -> Self {
        Self {
            kind: LayerKind::Linear,
            in_features,
            out_features,
            prunable,
        }
    }

    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        prunable: bool,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                kernel,
                stride,
                padding,
            },
            in_features: in_channels,
            out_features: out_channels,
            prunable,
        }
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Linear => self.in_features,
            LayerKind::Conv2d { kernel, .. } => self.in_features * kernel * kernel,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear => vec![self.out_features, self.in_features],
            LayerKind::Conv2d { kernel, .. } => {
                vec![self.out_features, self.in_features, kernel, kernel]
            }
        }
    }
}

/// Distribution used to draw posterior means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitScheme {
    #[default]
    KaimingUniform,
    KaimingNormal,
}

/// Kaiming-uniform bound `sqrt(6 / fan_in)`.
pub fn kaiming_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f64).sqrt() as f32
}

/// Initial posterior standard deviation: 1% of the Kaiming bound.
pub fn sigma_init(fan_in: usize) -> f32 {
    SIGMA_INIT_FRACTION * kaiming_bound(fan_in)
}

/// Draws `n` Kaiming means for a layer with the given fan-in.
pub fn draw_means(fan_in: usize, n: usize, scheme: InitScheme, rng: &mut Rng) -> Result<Vec<f32>> {
    if fan_in == 0 {
        return Err(Error::invalid("fan_in must be at least 1"));
    }
    Ok(match scheme {
        InitScheme::KaimingUniform => {
            let b = kaiming_bound(fan_in);
            (0..n).map(|_| rng.gen_range(-b..=b)).collect()
        }
        InitScheme::KaimingNormal => {
            let std = (2.0 / fan_in as f64).sqrt() as f32;
            (0..n)
                .map(|_| std * rng.sample::<f32, _>(StandardNormal))
                .collect()
        }
    })
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Weight tensor of one linear or convolutional layer.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub mu: Vec<f32>,
    /// Present for variational layers; `sigma = softplus(rho)`.
    pub rho: Option<Vec<f32>>,
    /// Initialization snapshot used for rewinding.
    pub mu0: Vec<f32>,
    pub rho0: Option<Vec<f32>>,
    pub mask: Vec<bool>,
}

/// Alias naming the variational case explicitly.
pub type VariationalTensor = WeightTensor;

impl WeightTensor {
    fn from_means(shape: Vec<usize>, mu: Vec<f32>, rho: Option<Vec<f32>>) -> Self {
        let n = mu.len();
        Self {
            shape,
            mu0: mu.clone(),
            rho0: rho.clone(),
            mu,
            rho,
            mask: vec![true; n],
        }
    }

    /// Variational init: Kaiming-uniform means, `softplus(rho) = 0.01 * bound` everywhere.
    pub fn init_variational(spec: &LayerSpec, seed: u64) -> Result<Self> {
        let mut w = Self::init_deterministic(spec, seed)?;
        let rho = vec![softplus_inverse(sigma_init(spec.fan_in())); w.mu.len()];
        w.rho0 = Some(rho.clone());
        w.rho = Some(rho);
        Ok(w)
    }

    /// Deterministic init sharing the exact mean draw of [`Self::init_variational`].
    pub fn init_deterministic(spec: &LayerSpec, seed: u64) -> Result<Self> {
        let shape = spec.weight_shape();
        let n = shape.iter().product();
        let mut rng = rng::stream(seed, "init", 0);
        let mu = draw_means(spec.fan_in(), n, InitScheme::KaimingUniform, &mut rng)?;
        Ok(Self::from_means(shape, mu, None))
    }

    pub fn numel(&self) -> usize {
        self.mu.len()
    }

    pub fn is_variational(&self) -> bool {
        self.rho.is_some()
    }

    pub fn sigma(&self) -> Option<Vec<f32>> {
        self.rho
            .as_ref()
            .map(|r| r.iter().map(|&v| softplus_scalar(v)).collect())
    }

    /// Number of unmasked entries.
    pub fn remaining(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `mask ⊙ mu`.
    pub fn effective_mean(&self) -> Vec<f32> {
        self.mu
            .iter()
            .zip(&self.mask)
            .map(|(&m, &keep)| if keep { m } else { 0.0 })
            .collect()
    }

    /// Restores the initialization snapshot. `rho` is restored only when `with_rho` is set.
    pub fn rewind(&mut self, with_rho: bool) {
        self.mu.copy_from_slice(&self.mu0);
        if with_rho {
            if let (Some(rho), Some(rho0)) = (self.rho.as_mut(), self.rho0.as_ref()) {
                rho.copy_from_slice(rho0);
            }
        }
    }

    /// Makes the current values the new rewind target.
    pub fn snapshot(&mut self) {
        self.mu0.clone_from(&self.mu);
        self.rho0.clone_from(&self.rho);
    }

    pub fn set_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.mu.len() {
            return Err(Error::Shape {
                op: "set_mask",
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        self.mask.copy_from_slice(mask);
        Ok(())
    }

    /// Records the tensor on a graph.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<WeightVars> {
        let leaf = |g: &mut Graph, data: Vec<f32>| {
            if trainable {
                g.param(self.shape.clone(), data)
            } else {
                g.constant(self.shape.clone(), data)
            }
        };
        let mu = leaf(g, self.mu.clone())?;
        let (rho, sigma) = match &self.rho {
            Some(r) => {
                let rho = leaf(g, r.clone())?;
                (Some(rho), Some(g.softplus(rho)))
            }
            None => (None, None),
        };
        let mask = g.constant(
            self.shape.clone(),
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?;
        Ok(WeightVars {
            mu,
            rho,
            sigma,
            mask,
        })
    }
}

/// Graph handles of a bound [`WeightTensor`].
#[derive(Clone, Copy, Debug)]
pub struct WeightVars {
    pub mu: Var,
    pub rho: Option<Var>,
    pub sigma: Option<Var>,
    pub mask: Var,
}

/// Effective weight `mask ⊙ (mu + sigma ⊙ noise)`; without noise (or without sigma) `mask ⊙ mu`.
pub fn sample_weight(g: &mut Graph, vars: &WeightVars, noise: Option<&[f32]>) -> Result<Var> {
    let shape = g.shape(vars.mu).to_vec();
    let base = match (vars.sigma, noise) {
        (Some(sigma), Some(eps)) => {
            if eps.len() != g.value(vars.mu).numel() {
                return Err(Error::Shape {
                    op: "sample_weight",
                    lhs: shape,
                    rhs: vec![eps.len()],
                });
            }
            let eps = g.constant(shape, eps.to_vec())?;
            let spread = g.mul(sigma, eps)?;
            g.add(vars.mu, spread)?
        }
        _ => vars.mu,
    };
    g.mul(base, vars.mask)
}

/// Applies a layer with a freshly sampled weight to `input`.
pub fn sample_forward(
    g: &mut Graph,
    spec: &LayerSpec,
    vars: &WeightVars,
    input: Var,
    noise: Option<&[f32]>,
) -> Result<Var> {
    let w = sample_weight(g, vars, noise)?;
    apply_layer(g, spec, input, w)
}

pub fn apply_layer(g: &mut Graph, spec: &LayerSpec, input: Var, weight: Var) -> Result<Var> {
    match spec.kind {
        LayerKind::Linear => g.linear(input, weight),
        LayerKind::Conv2d {
            stride, padding, ..
        } => g.conv2d(input, weight, stride, padding),
    }
}
