//! Desk-scale model zoo: a configurable MLP and a small residual CNN.
//!
//! Both come in deterministic or variational form. Every linear and
//! convolutional weight lives in [`Model::layers`] in depth order; biases and
//! normalization affines are deterministic [`AuxParam`]s that are never pruned.

use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Rng};
use crate::tensor::{softmax_row, Graph, Tensor, Var};
use crate::variational::{
    apply_layer, sample_weight, standard_normal, LayerSpec, WeightTensor, WeightVars,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    MiniResnet,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "mini_resnet" => Ok(Arch::MiniResnet),
            _ => Err(Error::invalid(format!("unknown arch `{s}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::MiniResnet => "mini_resnet",
        })
    }
}

/// Architecture description.
///
/// For `mlp`, `widths` lists every layer size including input and output
/// (`[2, 64, 64, 4]`). For `mini_resnet`, `widths` are the stage channel
/// counts and `blocks` the residual blocks per stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub bayesian: bool,
}

impl ModelConfig {
    pub fn mlp(widths: &[usize], bayesian: bool) -> Self {
        Self {
            arch: Arch::Mlp,
            widths: widths.to_vec(),
            blocks: Vec::new(),
            in_channels: 0,
            num_classes: widths.last().copied().unwrap_or(0),
            bayesian,
        }
    }

    pub fn mini_resnet(
        in_channels: usize,
        widths: &[usize],
        blocks: &[usize],
        num_classes: usize,
        bayesian: bool,
    ) -> Self {
        Self {
            arch: Arch::MiniResnet,
            widths: widths.to_vec(),
            blocks: blocks.to_vec(),
            in_channels,
            num_classes,
            bayesian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("zero-width layer"));
        }
        match self.arch {
            Arch::Mlp => {
                if self.widths.len() < 3 {
                    return Err(Error::invalid("mlp needs input, at least one hidden layer, and output"));
                }
                if *self.widths.last().unwrap() != self.num_classes {
                    return Err(Error::invalid("mlp output width must equal num_classes"));
                }
            }
            Arch::MiniResnet => {
                if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
                    return Err(Error::invalid("mini_resnet needs one block count per stage width"));
                }
                if self.in_channels == 0 {
                    return Err(Error::invalid("mini_resnet needs in_channels >= 1"));
                }
            }
        }
        Ok(())
    }

    /// Same architecture with the other posterior family.
    pub fn with_bayesian(&self, bayesian: bool) -> Self {
        Self {
            bayesian,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    pub weight: WeightTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxKind {
    Bias,
    Scale,
    Shift,
}

/// Deterministic, never-pruned parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxParam {
    pub name: String,
    pub kind: AuxKind,
    pub value: Vec<f32>,
    pub init: Vec<f32>,
}

impl AuxParam {
    fn new(name: String, kind: AuxKind, len: usize) -> Self {
        let fill = if kind == AuxKind::Scale { 1.0 } else { 0.0 };
        Self {
            name,
            kind,
            value: vec![fill; len],
            init: vec![fill; len],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    scale: usize,
    shift: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    conv1: usize,
    norm1: Norm,
    conv2: usize,
    norm2: Norm,
    shortcut: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Plan {
    Mlp {
        biases: Vec<usize>,
    },
    Resnet {
        stem: usize,
        stem_norm: Norm,
        blocks: Vec<Block>,
        fc: usize,
        fc_bias: usize,
    },
}

/// Snapshot of every trainable value of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub weights: Vec<(Vec<f32>, Option<Vec<f32>>)>,
    pub aux: Vec<Vec<f32>>,
}

/// One joint draw of standard-normal weight noise (one entry per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSample {
    pub layers: Vec<Option<Vec<f32>>>,
}

/// Graph handles of a bound model.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub weights: Vec<WeightVars>,
    pub aux: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    aux: Vec<AuxParam>,
    plan: Plan,
}

struct Builder {
    bayesian: bool,
    seed: u64,
    layers: Vec<Layer>,
    aux: Vec<AuxParam>,
}

impl Builder {
    fn layer(&mut self, name: String, spec: LayerSpec) -> Result<usize> {
        let seed = derive_seed(self.seed, "layer", self.layers.len() as u64);
        let weight = if self.bayesian {
            WeightTensor::init_variational(&spec, seed)?
        } else {
            WeightTensor::init_deterministic(&spec, seed)?
        };
        self.layers.push(Layer { name, spec, weight });
        Ok(self.layers.len() - 1)
    }

    fn aux(&mut self, name: String, kind: AuxKind, len: usize) -> usize {
        self.aux.push(AuxParam::new(name, kind, len));
        self.aux.len() - 1
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Norm {
        Norm {
            scale: self.aux(format!("{prefix}.scale"), AuxKind::Scale, channels),
            shift: self.aux(format!("{prefix}.shift"), AuxKind::Shift, channels),
        }
    }
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            bayesian: config.bayesian,
            seed,
            layers: Vec::new(),
            aux: Vec::new(),
        };
        let plan = match config.arch {
            Arch::Mlp => {
                let n = config.widths.len() - 1;
                let mut biases = Vec::with_capacity(n);
                for i in 0..n {
                    let last = i + 1 == n;
                    let spec = LayerSpec::linear(config.widths[i], config.widths[i + 1], !last);
                    b.layer(format!("fc{i}"), spec)?;
                    biases.push(b.aux(format!("fc{i}.bias"), AuxKind::Bias, config.widths[i + 1]));
                }
                Plan::Mlp { biases }
            }
            Arch::MiniResnet => {
                let c0 = config.widths[0];
                let stem = b.layer(
                    "stem.conv".into(),
                    LayerSpec::conv(config.in_channels, c0, 3, 1, 1, true),
                )?;
                let stem_norm = b.norm("stem.norm", c0);
                let mut blocks = Vec::new();
                let mut channels = c0;
                for (s, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
                    for k in 0..count {
                        let stride = if s > 0 && k == 0 { 2 } else { 1 };
                        let p = format!("s{s}.b{k}");
                        let conv1 = b.layer(
                            format!("{p}.conv1"),
                            LayerSpec::conv(channels, width, 3, stride, 1, true),
                        )?;
                        let norm1 = b.norm(&format!("{p}.norm1"), width);
                        let conv2 = b.layer(
                            format!("{p}.conv2"),
                            LayerSpec::conv(width, width, 3, 1, 1, true),
                        )?;
                        let norm2 = b.norm(&format!("{p}.norm2"), width);
                        let shortcut = if stride != 1 || channels != width {
                            Some(b.layer(
                                format!("{p}.shortcut"),
                                LayerSpec::conv(channels, width, 1, stride, 0, true),
                            )?)
                        } else {
                            None
                        };
                        blocks.push(Block {
                            conv1,
                            norm1,
                            conv2,
                            norm2,
                            shortcut,
                        });
                        channels = width;
                    }
                }
                let fc = b.layer(
                    "fc".into(),
                    LayerSpec::linear(channels, config.num_classes, false),
                )?;
                let fc_bias = b.aux("fc.bias".into(), AuxKind::Bias, config.num_classes);
                Plan::Resnet {
                    stem,
                    stem_norm,
                    blocks,
                    fc,
                    fc_bias,
                }
            }
        };
        Ok(Self {
            config: config.clone(),
            layers: b.layers,
            aux: b.aux,
            plan,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn is_bayesian(&self) -> bool {
        self.config.bayesian
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn aux(&self) -> &[AuxParam] {
        &self.aux
    }

    pub fn aux_mut(&mut self) -> &mut [AuxParam] {
        &mut self.aux
    }

    /// Indices into [`Self::layers`] of the prunable layers, in depth order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].spec.prunable)
            .collect()
    }

    /// Prunable weights in depth order; the classifier is never listed.
    pub fn prunable_parameters(&self) -> Vec<(&str, &WeightTensor)> {
        self.layers
            .iter()
            .filter(|l| l.spec.prunable)
            .map(|l| (l.name.as_str(), &l.weight))
            .collect()
    }

    /// Total weight entries across all linear/conv layers (biases excluded).
    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel()).sum()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable_parameters().iter().map(|(_, w)| w.numel()).sum()
    }

    pub fn prunable_remaining(&self) -> usize {
        self.prunable_parameters()
            .iter()
            .map(|(_, w)| w.remaining())
            .sum()
    }

    /// Fraction of prunable weights still unmasked.
    pub fn remaining_fraction(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            1.0
        } else {
            self.prunable_remaining() as f64 / total as f64
        }
    }

    pub fn state(&self) -> ParamState {
        ParamState {
            weights: self
                .layers
                .iter()
                .map(|l| (l.weight.mu.clone(), l.weight.rho.clone()))
                .collect(),
            aux: self.aux.iter().map(|a| a.value.clone()).collect(),
        }
    }

    /// The rewind targets as a [`ParamState`].
    pub fn initial_state(&self) -> ParamState {
        ParamState {
            weights: self
                .layers
                .iter()
                .map(|l| (l.weight.mu0.clone(), l.weight.rho0.clone()))
                .collect(),
            aux: self.aux.iter().map(|a| a.init.clone()).collect(),
        }
    }

    fn check_state(&self, state: &ParamState) -> Result<()> {
        let ok = state.weights.len() == self.layers.len()
            && state.aux.len() == self.aux.len()
            && self.layers.iter().zip(&state.weights).all(|(l, (mu, rho))| {
                mu.len() == l.weight.numel()
                    && rho.is_some() == l.weight.is_variational()
                    && rho.as_ref().is_none_or(|r| r.len() == mu.len())
            })
            && self
                .aux
                .iter()
                .zip(&state.aux)
                .all(|(a, v)| a.value.len() == v.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape {
                op: "load_state",
                lhs: vec![self.layers.len(), self.aux.len()],
                rhs: vec![state.weights.len(), state.aux.len()],
            })
        }
    }

    pub fn load_state(&mut self, state: &ParamState) -> Result<()> {
        self.check_state(state)?;
        for (l, (mu, rho)) in self.layers.iter_mut().zip(&state.weights) {
            l.weight.mu.copy_from_slice(mu);
            l.weight.rho.clone_from(rho);
        }
        for (a, v) in self.aux.iter_mut().zip(&state.aux) {
            a.value.copy_from_slice(v);
        }
        Ok(())
    }

    /// Sets both current values and rewind targets.
    pub fn load_initial_state(&mut self, state: &ParamState) -> Result<()> {
        self.load_state(state)?;
        self.snapshot();
        Ok(())
    }

    pub fn snapshot(&mut self) {
        for l in &mut self.layers {
            l.weight.snapshot();
        }
        for a in &mut self.aux {
            a.init.clone_from(&a.value);
        }
    }

    /// Resets every parameter to its snapshot; `rho` only when `with_rho`.
    pub fn rewind(&mut self, with_rho: bool) {
        for l in &mut self.layers {
            l.weight.rewind(with_rho);
        }
        for a in &mut self.aux {
            a.value.clone_from(&a.init);
        }
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.layers.iter().map(|l| l.weight.mask.clone()).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ModelVars> {
        let weights = self
            .layers
            .iter()
            .map(|l| l.weight.bind(g, trainable))
            .collect::<Result<Vec<_>>>()?;
        let aux = self
            .aux
            .iter()
            .map(|a| {
                let shape = vec![a.value.len()];
                if trainable {
                    g.param(shape, a.value.clone())
                } else {
                    g.constant(shape, a.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelVars { weights, aux })
    }

    pub fn draw_noise(&self, rng: &mut Rng) -> NoiseSample {
        NoiseSample {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.weight
                        .is_variational()
                        .then(|| standard_normal(rng, l.weight.numel()))
                })
                .collect(),
        }
    }

    /// Logits for one weight sample. `noise = None` uses `mask ⊙ mu`.
    pub fn logits(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        input: Var,
        noise: Option<&NoiseSample>,
    ) -> Result<Var> {
        if let Some(n) = noise {
            if n.layers.len() != self.layers.len() {
                return Err(Error::Shape {
                    op: "logits",
                    lhs: vec![self.layers.len()],
                    rhs: vec![n.layers.len()],
                });
            }
        }
        let weights = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let eps = noise.and_then(|n| n.layers[i].as_deref());
                sample_weight(g, &vars.weights[i], eps)
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward(g, input, &weights, &vars.aux)
    }

    fn layer(&self, g: &mut Graph, idx: usize, x: Var, weights: &[Var]) -> Result<Var> {
        apply_layer(g, &self.layers[idx].spec, x, weights[idx])
    }

    fn norm(&self, g: &mut Graph, n: Norm, x: Var, aux: &[Var]) -> Result<Var> {
        let y = g.mul_channel(x, aux[n.scale])?;
        g.add_channel(y, aux[n.shift])
    }

    fn block(&self, g: &mut Graph, b: &Block, x: Var, weights: &[Var], aux: &[Var]) -> Result<Var> {
        let h = self.layer(g, b.conv1, x, weights)?;
        let h = self.norm(g, b.norm1, h, aux)?;
        let h = g.relu(h);
        let h = self.layer(g, b.conv2, h, weights)?;
        let residual = self.norm(g, b.norm2, h, aux)?;
        let shortcut = match b.shortcut {
            Some(s) => self.layer(g, s, x, weights)?,
            None => x,
        };
        g.add(residual, shortcut)
    }

    /// Forward pass with explicit effective weights (aligned with [`Self::layers`]).
    pub fn forward(&self, g: &mut Graph, input: Var, weights: &[Var], aux: &[Var]) -> Result<Var> {
        match &self.plan {
            Plan::Mlp { biases } => {
                let mut h = input;
                if g.shape(h).len() != 2 {
                    h = g.flatten(h)?;
                }
                for (i, &bias) in biases.iter().enumerate() {
                    h = self.layer(g, i, h, weights)?;
                    h = g.add_channel(h, aux[bias])?;
                    if i + 1 < biases.len() {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            Plan::Resnet {
                stem,
                stem_norm,
                blocks,
                fc,
                fc_bias,
            } => {
                let h = self.layer(g, *stem, input, weights)?;
                let h = self.norm(g, *stem_norm, h, aux)?;
                let mut h = g.relu(h);
                for b in blocks {
                    h = self.block(g, b, h, weights, aux)?;
                }
                let h = g.relu(h);
                let h = g.global_avg_pool(h)?;
                let h = self.layer(g, *fc, h, weights)?;
                g.add_channel(h, aux[*fc_bias])
            }
        }
    }

    /// Noise-free logits `f(x; mask ⊙ mu)`.
    pub fn mean_logits(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let x = g.constant(input.shape.clone(), input.data.clone())?;
        let y = self.logits(&mut g, &vars, x, None)?;
        Ok(g.value(y).clone())
    }

    /// Mean of `samples` post-softmax class probabilities, one per independent weight draw.
    pub fn predict_mean(&self, input: &Tensor, samples: usize, seed: u64) -> Result<Tensor> {
        if samples == 0 {
            return Err(Error::invalid("predict_mean needs at least one sample"));
        }
        let n = input.shape.first().copied().unwrap_or(0);
        let k = self.config.num_classes;
        let mut rng = rng::stream(seed, "predict", 0);
        let mut acc = vec![0.0f64; n * k];
        // one graph per sample; weights are shared across the whole input
        for _ in 0..samples {
            let noise = self.is_bayesian().then(|| self.draw_noise(&mut rng));
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false)?;
            let x = g.constant(input.shape.clone(), input.data.clone())?;
            let y = self.logits(&mut g, &vars, x, noise.as_ref())?;
            let mut probs = g.data(y).to_vec();
            for row in probs.chunks_mut(k) {
                softmax_row(row);
            }
            for (a, p) in acc.iter_mut().zip(probs) {
                *a += p as f64;
            }
        }
        let data = acc.iter().map(|&a| (a / samples as f64) as f32).collect();
        Tensor::new(vec![n, k], data)
    }
}
