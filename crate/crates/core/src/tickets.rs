//! Ticket pipelines: IMP, learning-rate rewinding, randomized baselines and transplantation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig, ParamState};
use crate::pruning::{commit_mask, prune_global, Lineage, PruneMask, ScoreKind};
use crate::rng::{self, derive_seed};
use crate::train::{train, TrainConfig, TrainRecord};
use crate::variational::{draw_means, sigma_init, InitScheme};

/// A mask plus the parameters training starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct Ticket {
    pub config: ModelConfig,
    pub mask: PruneMask,
    pub init: ParamState,
    pub score: ScoreKind,
}

impl Ticket {
    pub fn level(&self) -> u32 {
        self.mask.level
    }

    pub fn lineage(&self) -> Lineage {
        self.mask.lineage
    }

    /// Model holding the ticket's initial parameters (also its rewind target) and mask.
    pub fn build(&self) -> Result<Model> {
        let mut model = Model::build(&self.config, 0)?;
        model.load_initial_state(&self.init)?;
        commit_mask(&mut model, &self.mask)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub levels: usize,
    pub rate: f64,
    pub score: ScoreKind,
    /// Rewind `rho` together with `mu` in IMP.
    pub rewind_rho: bool,
    pub seed: u64,
}

/// One trained level of a pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelResult {
    pub ticket: Ticket,
    pub record: TrainRecord,
    /// Parameters at the epoch of maximum test accuracy.
    pub best: ParamState,
    pub final_state: ParamState,
}

impl LevelResult {
    pub fn level(&self) -> u32 {
        self.ticket.level()
    }

    pub fn remaining_fraction(&self) -> f64 {
        self.ticket.mask.remaining_fraction()
    }
}

/// Trains a ticket from its initial parameters.
pub fn train_ticket(ticket: &Ticket, data: &Dataset, test: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<LevelResult> {
    let mut model = ticket.build()?;
    let out = train(&mut model, data, test, cfg, seed)?;
    Ok(LevelResult {
        ticket: ticket.clone(),
        record: out.record,
        best: out.best,
        final_state: model.state(),
    })
}

fn iterative(cfg: &PipelineConfig, data: &Dataset, test: &Dataset, lineage: Lineage) -> Result<Vec<LevelResult>> {
    if cfg.levels == 0 {
        return Err(Error::invalid("levels must be at least 1"));
    }
    let mut model = Model::build(&cfg.model, cfg.seed)?;
    let mut results = Vec::with_capacity(cfg.levels + 1);
    for level in 0..=cfg.levels as u32 {
        if level > 0 {
            let mut mask = prune_global(&model, cfg.score, cfg.rate)?;
            mask.level = level;
            mask.lineage = lineage;
            commit_mask(&mut model, &mask)?;
            if lineage == Lineage::Imp {
                model.rewind(cfg.rewind_rho);
            }
        }
        let ticket = Ticket {
            config: cfg.model.clone(),
            mask: PruneMask::of(&model, level, lineage),
            init: model.state(),
            score: cfg.score,
        };
        let out = train(&mut model, data, test, &cfg.train, derive_seed(cfg.seed, "train", level as u64))?;
        results.push(LevelResult {
            ticket,
            record: out.record,
            best: out.best,
            final_state: model.state(),
        });
    }
    Ok(results)
}

/// Iterative magnitude pruning: train, prune, rewind survivors to initialization. Level 0 is dense.
pub fn imp(cfg: &PipelineConfig, data: &Dataset, test: &Dataset) -> Result<Vec<LevelResult>> {
    iterative(cfg, data, test, Lineage::Imp)
}

/// Learning-rate rewinding: like [`imp`] but survivors keep their trained values.
pub fn lrr(cfg: &PipelineConfig, data: &Dataset, test: &Dataset) -> Result<Vec<LevelResult>> {
    iterative(cfg, data, test, Lineage::Lrr)
}

/// Redraws every weight mean from `scheme` and resets `rho` and auxiliary
/// parameters to their initial values. The mask is kept.
pub fn reinit_weights(ticket: &Ticket, scheme: InitScheme, seed: u64) -> Result<Ticket> {
    let fresh = Model::build(&ticket.config, 0)?;
    let mut init = fresh.initial_state();
    for (i, (layer, (mu, rho))) in fresh.layers().iter().zip(init.weights.iter_mut()).enumerate() {
        let fan_in = layer.spec.fan_in();
        let mut rng = rng::stream(seed, "reinit", i as u64);
        *mu = draw_means(fan_in, mu.len(), scheme, &mut rng)?;
        if let Some(rho) = rho {
            let r = crate::tensor::softplus_inverse(sigma_init(fan_in));
            rho.iter_mut().for_each(|v| *v = r);
        }
    }
    let mut mask = ticket.mask.clone();
    mask.lineage = Lineage::Reinit;
    Ok(Ticket {
        config: ticket.config.clone(),
        mask,
        init,
        score: ticket.score,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShuffleMode {
    Global,
    Even,
    Layerwise,
}

impl ShuffleMode {
    pub fn lineage(self) -> Lineage {
        match self {
            Self::Global => Lineage::ShuffleGlobal,
            Self::Even => Lineage::ShuffleEven,
            Self::Layerwise => Lineage::ShuffleLayerwise,
        }
    }
}

impl FromStr for ShuffleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "even" => Ok(Self::Even),
            "layerwise" => Ok(Self::Layerwise),
            _ => Err(Error::invalid(format!("unknown shuffle mode `{s}`"))),
        }
    }
}

impl fmt::Display for ShuffleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::Even => "even",
            Self::Layerwise => "layerwise",
        })
    }
}

fn random_mask(size: usize, ones: usize, rng: &mut rng::Rng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..size).map(|i| i < ones).collect();
    m.shuffle(rng);
    m
}

/// Per-layer ones counts for the even shuffle: each layer gets the global
/// density, rounded half away from zero; the largest layer absorbs the
/// rounding surplus so the total stays exact.
pub fn even_counts(sizes: &[usize], remaining: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let density = remaining as f64 / total as f64;
    let mut counts: Vec<usize> = sizes.iter().map(|&s| (density * s as f64).round() as usize).collect();
    let mut diff = remaining as i64 - counts.iter().sum::<usize>() as i64;
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for &i in &order {
        if diff == 0 {
            break;
        }
        let room = if diff > 0 {
            (sizes[i] - counts[i]) as i64
        } else {
            -(counts[i] as i64)
        };
        let step = if diff > 0 { diff.min(room) } else { diff.max(room) };
        counts[i] = (counts[i] as i64 + step) as usize;
        diff -= step;
    }
    counts
}

/// Replaces the mask with a random one of equal sparsity budget; weights are untouched.
pub fn shuffle_mask(ticket: &Ticket, mode: ShuffleMode, seed: u64) -> Ticket {
    let mut rng = rng::stream(seed, "shuffle_mask", 0);
    let sizes: Vec<usize> = ticket.mask.layers.iter().map(Vec::len).collect();
    let layers = match mode {
        ShuffleMode::Global => {
            let mut flat: Vec<bool> = ticket.mask.layers.iter().flatten().copied().collect();
            flat.shuffle(&mut rng);
            let mut out = Vec::with_capacity(sizes.len());
            let mut rest = &flat[..];
            for &s in &sizes {
                let (head, tail) = rest.split_at(s);
                out.push(head.to_vec());
                rest = tail;
            }
            out
        }
        ShuffleMode::Even => even_counts(&sizes, ticket.mask.remaining())
            .into_iter()
            .zip(&sizes)
            .map(|(ones, &size)| random_mask(size, ones, &mut rng))
            .collect(),
        ShuffleMode::Layerwise => ticket
            .mask
            .layer_counts()
            .into_iter()
            .zip(&sizes)
            .map(|(ones, &size)| random_mask(size, ones, &mut rng))
            .collect(),
    };
    Ticket {
        config: ticket.config.clone(),
        mask: PruneMask {
            layers,
            level: ticket.mask.level,
            lineage: mode.lineage(),
        },
        init: ticket.init.clone(),
        score: ticket.score,
    }
}

/// Bayesian ticket whose means are the deterministic `trained` weights under `mask`.
///
/// `rho` stays at its initialization; biases and affine parameters are copied.
pub fn transplant(
    source: &ModelConfig,
    mask: &PruneMask,
    trained: &ParamState,
    bayes: &ModelConfig,
    seed: u64,
) -> Result<Ticket> {
    if source.bayesian || !bayes.bayesian || source.with_bayesian(true) != *bayes {
        return Err(Error::invalid(
            "transplant needs a deterministic source and a Bayesian target of the same architecture",
        ));
    }
    let mut model = Model::build(bayes, seed)?;
    let mut state = model.state();
    if trained.weights.len() != state.weights.len() || trained.aux.len() != state.aux.len() {
        return Err(Error::Shape {
            op: "transplant",
            lhs: vec![state.weights.len(), state.aux.len()],
            rhs: vec![trained.weights.len(), trained.aux.len()],
        });
    }
    for ((mu, _), (src, _)) in state.weights.iter_mut().zip(&trained.weights) {
        if mu.len() != src.len() {
            return Err(Error::Shape {
                op: "transplant",
                lhs: vec![mu.len()],
                rhs: vec![src.len()],
            });
        }
        mu.copy_from_slice(src);
    }
    state.aux.clone_from(&trained.aux);
    model.load_initial_state(&state)?;
    commit_mask(&mut model, mask)?;
    for layer in model.layers_mut() {
        let masked = layer.weight.effective_mean();
        layer.weight.mu.copy_from_slice(&masked);
    }
    model.snapshot();
    let mut mask = mask.clone();
    mask.lineage = Lineage::Transplant;
    Ok(Ticket {
        config: bayes.clone(),
        mask,
        init: model.state(),
        score: ScoreKind::Magnitude,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransplantOutcome {
    pub deterministic: Vec<LevelResult>,
    pub transplanted: Vec<LevelResult>,
}

impl TransplantOutcome {
    /// Training time of the whole pipeline, deterministic levels included.
    pub fn wall_seconds(&self) -> f64 {
        self.deterministic
            .iter()
            .chain(&self.transplanted)
            .map(|r| r.record.wall_seconds)
            .sum()
    }
}

/// Deterministic IMP followed by one variational phase per transplanted level.
///
/// Only the deepest level is transplanted unless `all_levels` is set.
pub fn transplant_pipeline(cfg: &PipelineConfig, data: &Dataset, test: &Dataset, all_levels: bool) -> Result<TransplantOutcome> {
    let bayes = cfg.model.with_bayesian(true);
    let det_cfg = PipelineConfig {
        model: cfg.model.with_bayesian(false),
        score: ScoreKind::Magnitude,
        ..cfg.clone()
    };
    let deterministic = imp(&det_cfg, data, test)?;
    let chosen: Vec<&LevelResult> = if all_levels {
        deterministic.iter().collect()
    } else {
        deterministic.last().into_iter().collect()
    };
    let mut transplanted = Vec::with_capacity(chosen.len());
    for src in chosen {
        let level = src.level() as u64;
        let ticket = transplant(&det_cfg.model, &src.ticket.mask, &src.best, &bayes, cfg.seed)?;
        transplanted.push(train_ticket(
            &ticket,
            data,
            test,
            &cfg.train,
            derive_seed(cfg.seed, "transplant", level),
        )?);
    }
    Ok(TransplantOutcome {
        deterministic,
        transplanted,
    })
}
