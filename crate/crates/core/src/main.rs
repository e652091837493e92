//! Command-line front end for the replay experiments.
//!
//! Every subcommand reads an optional flat JSON config, applies the shared
//! flags on top, and writes CSV or JSON to `--out` (stdout by default).
//! Failures exit with status 1 and a single `error: <kind>: <message>` line
//! on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use memreplay::harness::{
    aer_vs_fixed, compare_per, emit, fork_compare_seeds, run_aer, run_analytic, run_dqn, run_linesearch,
    run_ode, sweep_measure, Environment, ExperimentConfig, Format, Mode, ReplayKind, SweepGrid, Trace,
};
use memreplay::neural_control::{BufferPolicy, EnvKind};
use memreplay::{Error, Result};

#[derive(Parser)]
#[command(name = "memreplay", version, about = "Experience replay experiments on LineSearch and classic control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed (repetitions use seed, seed + 1, ...).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seeded repetitions.
    #[arg(long)]
    repetitions: Option<usize>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output format: csv or json.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Seed-averaged LineSearch simulation trace.
    Run(Common),
    /// Integrated theory curve.
    Ode(Common),
    /// Closed-form stage approximation.
    Analytic(Common),
    /// Final measure over a memory-size by minibatch-size grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Average simulated agents instead of integrating the theory.
        #[arg(long)]
        simulate: bool,
    },
    /// ER minus pER final measure per grid cell.
    ComparePer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        simulate: bool,
    },
    /// Adaptive-memory runs (LineSearch or a control task).
    Aer {
        #[command(flatten)]
        common: Common,
        /// Also write the adjustment log of the first seed here.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Compare against fixed memory seed by seed.
        #[arg(long)]
        compare: bool,
    },
    /// Q-network training on a control task.
    Dqn {
        #[command(flatten)]
        common: Common,
        /// Branch a shared warm-up into fixed and adaptive memory.
        #[arg(long)]
        compare: bool,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Format)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(r) = common.repetitions {
        cfg.repetitions = r;
    }
    cfg.validate()?;
    Ok((cfg, common.format.parse()?))
}

fn control_kind(cfg: &ExperimentConfig) -> Result<EnvKind> {
    cfg.environment
        .control()
        .ok_or_else(|| Error::Config("this command needs a control environment".into()))
}

fn fork(cfg: &ExperimentConfig, common: &Common, format: Format) -> Result<()> {
    let kind = control_kind(cfg)?;
    let fixed = ExperimentConfig {
        replay: ReplayKind::Er,
        ..cfg.clone()
    }
    .dqn_config(kind)?;
    let adaptive = ExperimentConfig {
        replay: ReplayKind::Aer,
        ..cfg.clone()
    }
    .dqn_config(kind)?;
    let BufferPolicy::Adaptive(aer) = adaptive.buffer else {
        return Err(Error::Config("adaptive memory settings missing".into()));
    };
    let out = fork_compare_seeds(kind, &fixed, aer, &cfg.seeds())?;
    emit(out.as_slice(), common.out.as_deref(), format)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, f) = load(&c)?;
            let cfg = ExperimentConfig {
                mode: Mode::Simulate,
                ..cfg
            };
            emit(&run_linesearch(&cfg)?, c.out.as_deref(), f)
        }
        Command::Ode(c) => {
            let (cfg, f) = load(&c)?;
            let cfg = ExperimentConfig { mode: Mode::Ode, ..cfg };
            emit(&run_ode(&cfg)?, c.out.as_deref(), f)
        }
        Command::Analytic(c) => {
            let (cfg, f) = load(&c)?;
            let cfg = ExperimentConfig {
                mode: Mode::Analytic,
                ..cfg
            };
            emit(&run_analytic(&cfg)?, c.out.as_deref(), f)
        }
        Command::Sweep { common, simulate } => {
            let (cfg, f) = load(&common)?;
            let mode = if simulate { Mode::Simulate } else { Mode::Ode };
            let cfg = ExperimentConfig { mode, ..cfg };
            emit(&sweep_measure(&SweepGrid::from_config(&cfg), &cfg)?, common.out.as_deref(), f)
        }
        Command::ComparePer { common, simulate } => {
            let (cfg, f) = load(&common)?;
            let mode = if simulate { Mode::Simulate } else { Mode::Ode };
            let cfg = ExperimentConfig { mode, ..cfg };
            emit(&compare_per(&SweepGrid::from_config(&cfg), &cfg)?, common.out.as_deref(), f)
        }
        Command::Aer {
            common,
            events,
            compare,
        } => {
            let (cfg, f) = load(&common)?;
            let cfg = ExperimentConfig {
                mode: Mode::Simulate,
                replay: ReplayKind::Aer,
                ..cfg
            };
            if cfg.environment != Environment::LineSearch {
                if compare {
                    return fork(&cfg, &common, f);
                }
                let runs = run_dqn(&cfg)?;
                if let (Some(p), Some(first)) = (&events, runs.first()) {
                    emit(first.events.as_slice(), Some(p), f)?;
                }
                return emit(runs.as_slice(), common.out.as_deref(), f);
            }
            if compare {
                return emit(aer_vs_fixed(&cfg)?.as_slice(), common.out.as_deref(), f);
            }
            let runs = run_aer(&cfg)?;
            if let (Some(p), Some(first)) = (&events, runs.first()) {
                emit(first.events.as_slice(), Some(p), f)?;
            }
            emit(&Trace::average(&runs)?, common.out.as_deref(), f)
        }
        Command::Dqn { common, compare } => {
            let (cfg, f) = load(&common)?;
            control_kind(&cfg)?;
            if compare {
                return fork(&cfg, &common, f);
            }
            emit(run_dqn(&cfg)?.as_slice(), common.out.as_deref(), f)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
