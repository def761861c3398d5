//! Score functions and the global unstructured pruner.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::variational::WeightTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScoreKind {
    /// `|w|`; on a variational layer the weight is its mean.
    Magnitude,
    /// `|mu| / sigma`.
    Snr,
    /// `sqrt(mu^2 + sigma^2)`.
    Square,
    /// `|mu|`.
    MuMagnitude,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [Self::Magnitude, Self::Snr, Self::Square, Self::MuMagnitude];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl FromStr for ScoreKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "snr" => Ok(Self::Snr),
            "square" => Ok(Self::Square),
            "mu" | "mu_magnitude" => Ok(Self::MuMagnitude),
            _ => Err(Error::invalid(format!("unknown score kind `{s}`"))),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Magnitude => "magnitude",
            Self::Snr => "snr",
            Self::Square => "square",
            Self::MuMagnitude => "mu",
        })
    }
}

/// How a mask was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lineage {
    Imp,
    Lrr,
    Reinit,
    ShuffleGlobal,
    ShuffleEven,
    ShuffleLayerwise,
    Transplant,
}

impl Lineage {
    pub const ALL: [Lineage; 7] = [
        Self::Imp,
        Self::Lrr,
        Self::Reinit,
        Self::ShuffleGlobal,
        Self::ShuffleEven,
        Self::ShuffleLayerwise,
        Self::Transplant,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Lineage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Imp => "imp",
            Self::Lrr => "lrr",
            Self::Reinit => "reinit",
            Self::ShuffleGlobal => "shuffle_global",
            Self::ShuffleEven => "shuffle_even",
            Self::ShuffleLayerwise => "shuffle_layerwise",
            Self::Transplant => "transplant",
        })
    }
}

/// Binary masks of the prunable layers, in registry order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    pub layers: Vec<Vec<bool>>,
    pub level: u32,
    pub lineage: Lineage,
}

impl PruneMask {
    /// Current masks of a model's prunable layers.
    pub fn of(model: &Model, level: u32, lineage: Lineage) -> Self {
        Self {
            layers: model
                .prunable_parameters()
                .iter()
                .map(|(_, w)| w.mask.clone())
                .collect(),
            level,
            lineage,
        }
    }

    pub fn remaining(&self) -> usize {
        self.layers.iter().flatten().filter(|&&m| m).count()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn remaining_fraction(&self) -> f64 {
        self.remaining() as f64 / self.total().max(1) as f64
    }

    pub fn layer_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&m| m).count())
            .collect()
    }

    /// Elementwise `self ⊆ other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y)
            })
    }
}

/// Scores of one layer; `None` marks masked entries.
pub fn score(kind: ScoreKind, w: &WeightTensor) -> Result<Vec<Option<f64>>> {
    let sigma: Option<Vec<f64>> = w
        .rho
        .as_ref()
        .map(|r| r.iter().map(|&v| crate::tensor::softplus_scalar(v) as f64).collect());
    if kind == ScoreKind::Snr && sigma.is_none() {
        return Err(Error::invalid("snr score is undefined for deterministic weights"));
    }
    Ok((0..w.numel())
        .map(|i| {
            if !w.mask[i] {
                return None;
            }
            let mu = w.mu[i] as f64;
            let s = sigma.as_ref().map_or(0.0, |s| s[i]);
            Some(match kind {
                ScoreKind::Magnitude | ScoreKind::MuMagnitude => mu.abs(),
                ScoreKind::Snr => mu.abs() / s,
                ScoreKind::Square => (mu * mu + s * s).sqrt(),
            })
        })
        .collect())
}

/// Remaining count after `levels` applications of `rate` to `total` weights.
pub fn remaining_after(total: usize, rate: f64, levels: usize) -> usize {
    (0..levels).fold(total, |r, _| r - (rate * r as f64).floor() as usize)
}

/// Next-level mask: removes the `floor(rate * remaining)` lowest-scoring unmasked weights.
///
/// Scores are pooled across all prunable layers; ties go to the lower
/// `(layer index, flat index)` first. The model is not modified; the caller
/// stamps `level` and `lineage` on the result.
pub fn prune_global(model: &Model, kind: ScoreKind, rate: f64) -> Result<PruneMask> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::invalid(format!("pruning rate must lie in (0, 1), got {rate}")));
    }
    let layers = model.prunable_parameters();
    let mut pool = Vec::new();
    for (li, (_, w)) in layers.iter().enumerate() {
        for (i, s) in score(kind, w)?.into_iter().enumerate() {
            if let Some(s) = s {
                if !s.is_finite() {
                    return Err(Error::invalid(format!("non-finite {kind} score at layer {li}, entry {i}")));
                }
                pool.push((s, li, i));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::invalid("no unmasked prunable weights left"));
    }
    let k = (rate * pool.len() as f64).floor() as usize;
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| {
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
    };
    if k > 0 && k < pool.len() {
        pool.select_nth_unstable_by(k - 1, cmp);
    }
    let mut masks: Vec<Vec<bool>> = layers.iter().map(|(_, w)| w.mask.clone()).collect();
    for &(_, li, i) in &pool[..k] {
        masks[li][i] = false;
    }
    Ok(PruneMask {
        layers: masks,
        level: 0,
        lineage: Lineage::Imp,
    })
}

/// Installs `mask` on the model's prunable layers.
pub fn commit_mask(model: &mut Model, mask: &PruneMask) -> Result<()> {
    let idx = model.prunable_indices();
    if idx.len() != mask.layers.len() {
        return Err(Error::Shape {
            op: "commit_mask",
            lhs: vec![idx.len()],
            rhs: vec![mask.layers.len()],
        });
    }
    for (&li, m) in idx.iter().zip(&mask.layers) {
        if model.layers()[li].weight.numel() != m.len() {
            return Err(Error::Shape {
                op: "commit_mask",
                lhs: model.layers()[li].weight.shape.clone(),
                rhs: vec![m.len()],
            });
        }
    }
    for (&li, m) in idx.iter().zip(&mask.layers) {
        model.layers_mut()[li].weight.set_mask(m)?;
    }
    Ok(())
}
