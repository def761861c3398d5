//! Pipeline orchestration and on-disk outputs (config copy, CSVs, checkpoints).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, EntryKind};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{LayerSparsity, SparsityProfile};
use crate::models::{Arch, Model};
use crate::pruning::Lineage;
use crate::rng::derive_seed;
use crate::tickets::{self, LevelResult, ShuffleMode, Ticket};
use crate::train::{self, TrainRecord};

pub const EPOCHS_HEADER: &str = "level,remaining_fraction,epoch,lr,total,nll,kl,test_acc,mace";
pub const SUMMARY_HEADER: &str = "level,remaining_fraction,max_test_acc,mace_at_max,wall_seconds";
pub const ANALYSIS_HEADER: &str = "level,remaining_fraction,max_test_acc,mace_at_max";
pub const SPARSITY_HEADER: &str = "checkpoint,level,layer,size,zeros,sparsity";

/// Training and test sets described by the config, checked against the model shape.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let test_seed = derive_seed(cfg.data_seed, "test", 0);
    let (train, test) = match cfg.dataset {
        DatasetKind::Blobs => (
            data::synth_blobs(cfg.n_train, cfg.num_classes, cfg.spread, cfg.data_seed)?,
            data::synth_blobs(cfg.n_test, cfg.num_classes, cfg.spread, test_seed)?,
        ),
        DatasetKind::Moons => (
            data::synth_moons(cfg.n_train, cfg.noise, cfg.data_seed)?,
            data::synth_moons(cfg.n_test, cfg.noise, test_seed)?,
        ),
        DatasetKind::Patterns => (
            data::synth_patterns(cfg.n_train, cfg.num_classes, cfg.in_channels, cfg.image_side, cfg.noise, cfg.data_seed)?,
            data::synth_patterns(cfg.n_test, cfg.num_classes, cfg.in_channels, cfg.image_side, cfg.noise, test_seed)?,
        ),
        DatasetKind::Cifar10 => {
            let (mut train, mut test) = data::load_cifar10_dir(&cfg.cifar_dir)?;
            if cfg.n_train > 0 {
                train.records.truncate(cfg.n_train);
            }
            if cfg.n_test > 0 {
                test.records.truncate(cfg.n_test);
            }
            (train, test)
        }
    };
    if train.num_classes != cfg.num_classes {
        return Err(Error::config(
            "num_classes",
            format!("dataset has {} classes", train.num_classes),
        ));
    }
    match cfg.arch {
        Arch::Mlp => {
            let width: usize = train.feature_shape.iter().product();
            if cfg.widths[0] != width {
                return Err(Error::config("widths", format!("input width must be {width} for this dataset")));
            }
        }
        Arch::MiniResnet => {
            if !train.is_image() || train.feature_shape[0] != cfg.in_channels {
                return Err(Error::config(
                    "in_channels",
                    format!("mini_resnet needs image input with {} channels", cfg.in_channels),
                ));
            }
        }
    }
    Ok((train, test))
}

/// Writes `config.txt`, `epochs.csv`, `summary.csv` and per-level checkpoints into one directory.
pub struct RunWriter {
    dir: PathBuf,
    epochs: BufWriter<File>,
    summary: BufWriter<File>,
}

impl RunWriter {
    pub fn create(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), cfg.to_text())?;
        let mut epochs = BufWriter::new(File::create(dir.join("epochs.csv"))?);
        writeln!(epochs, "{EPOCHS_HEADER}")?;
        let mut summary = BufWriter::new(File::create(dir.join("summary.csv"))?);
        writeln!(summary, "{SUMMARY_HEADER}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            epochs,
            summary,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn record(&mut self, result: &LevelResult, run_seed: u64) -> Result<()> {
        let level = result.level();
        let frac = result.remaining_fraction();
        let rec = &result.record;
        for e in &rec.epochs {
            writeln!(
                self.epochs,
                "{level},{frac},{},{},{},{},{},{},{}",
                e.epoch, e.lr, e.total, e.nll, e.kl, e.test_acc, e.mace
            )?;
        }
        writeln!(
            self.summary,
            "{level},{frac},{},{},{}",
            rec.max_test_acc, rec.mace_at_max, rec.wall_seconds
        )?;
        self.epochs.flush()?;
        self.summary.flush()?;
        let model = result.ticket.build()?;
        let lineage = result.ticket.lineage();
        Checkpoint::from_state(&model, &result.best, rec.eval_seed, level, lineage)?
            .save(&self.dir.join(format!("L{level}.bltk")))?;
        Checkpoint::from_model(&model, run_seed, level, lineage).save(&self.dir.join(format!("L{level}.ticket.bltk")))?;
        Ok(())
    }

    pub fn record_all(&mut self, results: &[LevelResult], run_seed: u64) -> Result<()> {
        results.iter().try_for_each(|r| self.record(r, run_seed))
    }
}

/// Ticket stored in a checkpoint, interpreted with the config's architecture.
pub fn load_ticket(cfg: &ExperimentConfig, path: &Path) -> Result<Ticket> {
    let ck = Checkpoint::load(path)?;
    let mut model = Model::build(&cfg.model(), cfg.seed)?;
    ck.apply(&mut model)?;
    Ok(Ticket {
        config: cfg.model(),
        mask: ck.mask(),
        init: ck.state(),
        score: cfg.score,
    })
}

/// Dense training only (level 0).
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<LevelResult> {
    let (train_set, test_set) = load_data(cfg)?;
    let mut writer = RunWriter::create(out, cfg)?;
    let model = Model::build(&cfg.model(), cfg.seed)?;
    let ticket = Ticket {
        config: cfg.model(),
        mask: crate::pruning::PruneMask::of(&model, 0, Lineage::Imp),
        init: model.state(),
        score: cfg.score,
    };
    let result = tickets::train_ticket(&ticket, &train_set, &test_set, &cfg.train(), derive_seed(cfg.seed, "train", 0))?;
    writer.record(&result, cfg.seed)?;
    Ok(result)
}

pub fn run_imp(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<LevelResult>> {
    let (train_set, test_set) = load_data(cfg)?;
    let mut writer = RunWriter::create(out, cfg)?;
    let results = tickets::imp(&cfg.pipeline(), &train_set, &test_set)?;
    writer.record_all(&results, cfg.seed)?;
    Ok(results)
}

pub fn run_lrr(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<LevelResult>> {
    let (train_set, test_set) = load_data(cfg)?;
    let mut writer = RunWriter::create(out, cfg)?;
    let results = tickets::lrr(&cfg.pipeline(), &train_set, &test_set)?;
    writer.record_all(&results, cfg.seed)?;
    Ok(results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Shuffle(ShuffleMode),
    Reinit,
}

/// Applies a randomization baseline to one ticket checkpoint, or to every
/// pruned level of a fresh IMP run (written to `out/source`).
/// With `train_after`, each transformed ticket is trained.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    out: &Path,
    baseline: Baseline,
    checkpoint: Option<&Path>,
    train_after: bool,
) -> Result<Vec<Ticket>> {
    let sources: Vec<Ticket> = match checkpoint {
        Some(path) => vec![load_ticket(cfg, path)?],
        None => run_imp(cfg, &out.join("source"))?
            .into_iter()
            .filter(|r| r.level() > 0)
            .map(|r| r.ticket)
            .collect(),
    };
    let transformed = sources
        .iter()
        .map(|t| {
            let seed = derive_seed(cfg.seed, "baseline", t.level() as u64);
            match baseline {
                Baseline::Shuffle(mode) => Ok(tickets::shuffle_mask(t, mode, seed)),
                Baseline::Reinit => tickets::reinit_weights(t, cfg.reinit_dist, seed),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if train_after {
        let (train_set, test_set) = load_data(cfg)?;
        let mut writer = RunWriter::create(out, cfg)?;
        for t in &transformed {
            let seed = derive_seed(cfg.seed, "train", t.level() as u64);
            let result = tickets::train_ticket(t, &train_set, &test_set, &cfg.train(), seed)?;
            writer.record(&result, cfg.seed)?;
        }
    } else {
        fs::create_dir_all(out)?;
        fs::write(out.join("config.txt"), cfg.to_text())?;
        for t in &transformed {
            let model = t.build()?;
            Checkpoint::from_model(&model, cfg.seed, t.level(), t.lineage())
                .save(&out.join(format!("L{}.ticket.bltk", t.level())))?;
        }
    }
    Ok(transformed)
}

/// Deterministic IMP (written to `out/source`) then variational training of transplanted tickets.
pub fn run_transplant(cfg: &ExperimentConfig, out: &Path) -> Result<tickets::TransplantOutcome> {
    let (train_set, test_set) = load_data(cfg)?;
    let mut bayes_cfg = cfg.clone();
    bayes_cfg.bayesian = true;
    let mut det_cfg = cfg.clone();
    det_cfg.bayesian = false;
    det_cfg.score = crate::pruning::ScoreKind::Magnitude;
    let outcome = tickets::transplant_pipeline(&bayes_cfg.pipeline(), &train_set, &test_set, cfg.transplant_all)?;
    RunWriter::create(&out.join("source"), &det_cfg)?.record_all(&outcome.deterministic, cfg.seed)?;
    RunWriter::create(out, &bayes_cfg)?.record_all(&outcome.transplanted, cfg.seed)?;
    Ok(outcome)
}

/// Sparsity straight from a checkpoint's prunable entries.
pub fn checkpoint_profile(ck: &Checkpoint) -> SparsityProfile {
    let layers: Vec<LayerSparsity> = ck
        .entries
        .iter()
        .filter(|e| e.prunable && e.kind != EntryKind::Vector)
        .map(|e| {
            let size = e.mask.len();
            let zeros = e.mask.iter().filter(|&&m| !m).count();
            LayerSparsity {
                name: e.name.clone(),
                size,
                zeros,
                ratio: if size == 0 { 0.0 } else { zeros as f64 / size as f64 },
            }
        })
        .collect();
    let size: usize = layers.iter().map(|l| l.size).sum();
    let zeros: usize = layers.iter().map(|l| l.zeros).sum();
    SparsityProfile {
        global: if size == 0 { 0.0 } else { zeros as f64 / size as f64 },
        layers,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisRow {
    pub checkpoint: PathBuf,
    pub level: u32,
    pub profile: SparsityProfile,
    /// `(remaining_fraction, test_acc, mace)` when a config was supplied.
    pub metrics: Option<(f64, f64, f64)>,
}

/// Writes `sparsity.csv` and, given a config, re-evaluates each checkpoint into `analysis.csv`.
pub fn run_analyze(checkpoints: &[PathBuf], cfg: Option<&ExperimentConfig>, out: &Path) -> Result<Vec<AnalysisRow>> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("analyze needs at least one checkpoint"));
    }
    let test_set = match cfg {
        Some(c) => Some(load_data(c)?.1),
        None => None,
    };
    let mut rows = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let ck = Checkpoint::load(path)?;
        let profile = checkpoint_profile(&ck);
        let metrics = match (cfg, &test_set) {
            (Some(c), Some(test)) => {
                let mut model = Model::build(&c.model(), c.seed)?;
                ck.apply(&mut model)?;
                let (acc, mace) = train::evaluate(&model, test, c.eval_samples, c.bins, ck.seed)?;
                Some((model.remaining_fraction(), acc, mace))
            }
            _ => None,
        };
        rows.push(AnalysisRow {
            checkpoint: path.clone(),
            level: ck.level,
            profile,
            metrics,
        });
    }
    fs::create_dir_all(out)?;
    let mut sp = BufWriter::new(File::create(out.join("sparsity.csv"))?);
    writeln!(sp, "{SPARSITY_HEADER}")?;
    for r in &rows {
        let name = r.checkpoint.display();
        for l in &r.profile.layers {
            writeln!(sp, "{name},{},{},{},{},{}", r.level, l.name, l.size, l.zeros, l.ratio)?;
        }
        let size: usize = r.profile.layers.iter().map(|l| l.size).sum();
        let zeros: usize = r.profile.layers.iter().map(|l| l.zeros).sum();
        writeln!(sp, "{name},{},global,{size},{zeros},{}", r.level, r.profile.global)?;
    }
    sp.flush()?;
    if cfg.is_some() {
        let mut an = BufWriter::new(File::create(out.join("analysis.csv"))?);
        writeln!(an, "{ANALYSIS_HEADER}")?;
        for r in &rows {
            if let Some((frac, acc, mace)) = r.metrics {
                writeln!(an, "{},{frac},{acc},{mace}", r.level)?;
            }
        }
        an.flush()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub samples: usize,
    pub levels: usize,
    pub deterministic_seconds: f64,
    pub bayesian_seconds: f64,
    pub bayesian_single_sample_seconds: f64,
}

impl BenchReport {
    pub fn ratio(&self) -> f64 {
        self.bayesian_seconds / self.deterministic_seconds
    }

    pub fn single_sample_ratio(&self) -> f64 {
        self.bayesian_single_sample_seconds / self.deterministic_seconds
    }

    /// Training time of a full Bayesian IMP run (`levels + 1` trainings).
    pub fn projected_bayesian_imp(&self) -> f64 {
        (self.levels + 1) as f64 * self.bayesian_seconds
    }

    /// Deterministic IMP plus one variational phase.
    pub fn projected_transplant(&self) -> f64 {
        (self.levels + 1) as f64 * self.deterministic_seconds + self.bayesian_seconds
    }
}

/// Time of one training level of the given variant.
pub fn time_level(cfg: &ExperimentConfig, bayesian: bool, samples: usize, train_set: &Dataset, test_set: &Dataset) -> Result<TrainRecord> {
    let mut c = cfg.clone();
    c.bayesian = bayesian;
    c.samples = samples;
    c.eval_samples = samples;
    let mut model = Model::build(&c.model(), c.seed)?;
    Ok(train::train(&mut model, train_set, test_set, &c.train(), derive_seed(c.seed, "bench", 0))?.record)
}

/// Per-level wall time of matched deterministic and Bayesian runs; writes `bench.csv` when `out` is given.
pub fn run_bench(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<BenchReport> {
    let (train_set, test_set) = load_data(cfg)?;
    let det = time_level(cfg, false, cfg.samples, &train_set, &test_set)?;
    let bay = time_level(cfg, true, cfg.samples, &train_set, &test_set)?;
    let bay1 = time_level(cfg, true, 1, &train_set, &test_set)?;
    let report = BenchReport {
        samples: cfg.samples,
        levels: cfg.levels,
        deterministic_seconds: det.wall_seconds,
        bayesian_seconds: bay.wall_seconds,
        bayesian_single_sample_seconds: bay1.wall_seconds,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(File::create(dir.join("bench.csv"))?);
        writeln!(f, "variant,samples,wall_seconds,ratio_to_deterministic")?;
        writeln!(f, "deterministic,1,{},1", report.deterministic_seconds)?;
        writeln!(f, "bayesian,{},{},{}", report.samples, report.bayesian_seconds, report.ratio())?;
        writeln!(f, "bayesian,1,{},{}", report.bayesian_single_sample_seconds, report.single_sample_ratio())?;
        writeln!(f, "projected_bayesian_imp,{},{},", report.samples, report.projected_bayesian_imp())?;
        writeln!(f, "projected_transplant,{},{},", report.samples, report.projected_transplant())?;
        f.flush()?;
    }
    Ok(report)
}
