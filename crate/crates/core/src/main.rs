use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bayes_lth::config::ExperimentConfig;
use bayes_lth::experiment::{self, Baseline};
use bayes_lth::pruning::ScoreKind;
use bayes_lth::tickets::{LevelResult, ShuffleMode};
use bayes_lth::Error;

#[derive(Parser)]
#[command(name = "bayes-lth", version, about = "Lottery tickets for mean-field variational networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model once.
    Train(Common),
    /// Iterative magnitude pruning with rewinding to initialization.
    Imp(Common),
    /// Iterative pruning with learning-rate rewinding.
    Lrr(Common),
    /// Randomly reshuffle ticket masks.
    Shuffle {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        #[command(flatten)]
        source: Source,
    },
    /// Redraw ticket weights, keeping masks.
    Reinit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Transplant deterministic tickets into variational networks.
    Transplant {
        #[command(flatten)]
        common: Common,
        /// Transplant every level instead of only the deepest.
        #[arg(long)]
        all_levels: bool,
    },
    /// Sparsity profile (and, with --config, test metrics) of checkpoints.
    Analyze {
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative cost of variational versus deterministic training.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum)]
    score: Option<Score>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Source {
    /// Ticket checkpoint to transform; without it a fresh IMP run supplies every level.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Only write the transformed tickets.
    #[arg(long)]
    no_train: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Score {
    Magnitude,
    Snr,
    Square,
    Mu,
}

impl From<Score> for ScoreKind {
    fn from(s: Score) -> Self {
        match s {
            Score::Magnitude => ScoreKind::Magnitude,
            Score::Snr => ScoreKind::Snr,
            Score::Square => ScoreKind::Square,
            Score::Mu => ScoreKind::MuMagnitude,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Global,
    Even,
    Layerwise,
}

impl From<Mode> for ShuffleMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Global => ShuffleMode::Global,
            Mode::Even => ShuffleMode::Even,
            Mode::Layerwise => ShuffleMode::Layerwise,
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.levels {
        cfg.levels = v;
    }
    if let Some(v) = common.rate {
        cfg.rate = v;
    }
    if let Some(v) = common.score {
        cfg.score = v.into();
    }
    if let Some(v) = &common.out {
        cfg.out.clone_from(v);
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config { key: kv.clone(), message: "expected KEY=VALUE".into() })?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(results: &[LevelResult]) {
    for r in results {
        println!(
            "level {:>2}  remaining {:.4}  max_acc {:.4}  mace {:.4}  {:.2}s",
            r.level(),
            r.remaining_fraction(),
            r.record.max_test_acc,
            r.record.mace_at_max,
            r.record.wall_seconds
        );
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            report(&[experiment::run_train(&cfg, &cfg.out)?]);
        }
        Command::Imp(c) => {
            let cfg = resolve(&c)?;
            report(&experiment::run_imp(&cfg, &cfg.out)?);
        }
        Command::Lrr(c) => {
            let cfg = resolve(&c)?;
            report(&experiment::run_lrr(&cfg, &cfg.out)?);
        }
        Command::Shuffle { common, mode, source } => {
            let cfg = resolve(&common)?;
            let tickets = experiment::run_baseline(
                &cfg,
                &cfg.out,
                Baseline::Shuffle(mode.into()),
                source.checkpoint.as_deref(),
                !source.no_train,
            )?;
            println!("wrote {} shuffled ticket(s) to {}", tickets.len(), cfg.out.display());
        }
        Command::Reinit { common, source } => {
            let cfg = resolve(&common)?;
            let tickets =
                experiment::run_baseline(&cfg, &cfg.out, Baseline::Reinit, source.checkpoint.as_deref(), !source.no_train)?;
            println!("wrote {} reinitialized ticket(s) to {}", tickets.len(), cfg.out.display());
        }
        Command::Transplant { common, all_levels } => {
            let mut cfg = resolve(&common)?;
            cfg.transplant_all |= all_levels;
            let outcome = experiment::run_transplant(&cfg, &cfg.out)?;
            report(&outcome.transplanted);
            println!("pipeline training time {:.2}s", outcome.wall_seconds());
        }
        Command::Analyze { checkpoints, config, out } => {
            let cfg = config.as_deref().map(ExperimentConfig::load).transpose()?;
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            for row in experiment::run_analyze(&checkpoints, cfg.as_ref(), &out)? {
                print!("{}  level {}  global sparsity {:.6}", row.checkpoint.display(), row.level, row.profile.global);
                if let Some((_, acc, mace)) = row.metrics {
                    print!("  test_acc {acc:.4}  mace {mace:.4}");
                }
                println!();
            }
        }
        Command::Bench(c) => {
            let cfg = resolve(&c)?;
            let out: &Path = &cfg.out;
            let r = experiment::run_bench(&cfg, Some(out))?;
            println!("deterministic        {:.3}s", r.deterministic_seconds);
            println!("bayesian (S={:<2})      {:.3}s  ratio {:.2}", r.samples, r.bayesian_seconds, r.ratio());
            println!("bayesian (S=1)       {:.3}s  ratio {:.2}", r.bayesian_single_sample_seconds, r.single_sample_ratio());
            println!(
                "projected {} levels: bayesian imp {:.1}s, transplant {:.1}s",
                r.levels,
                r.projected_bayesian_imp(),
                r.projected_transplant()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
