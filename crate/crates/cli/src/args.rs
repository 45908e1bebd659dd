//! Command-line surface and its resolution into [`Job`]s.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lowflow::diagnostics::ProbeConfig;
use lowflow::schedules::Schedule;
use lowflow::trainer::{Mode, TrainConfig};

use crate::error::{usage, CliError};
use crate::job::*;

pub const SEED_ENV: &str = "LOWFLOW_SEED";
const DEFAULT_PROBE_GRID: &str = "0.01,0.05,0.1,0.3,0.6,0.9";
const FIGURE1_MIN_SEEDS: usize = 5;
const FIGURE1_STEPS: usize = 2000;

#[derive(Debug, Parser)]
#[command(name = "lowflow", version, about = "Flow-matching conditioning experiments")]
pub struct Cli {
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Where to write the run manifest (default: next to the outputs).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact and Monte-Carlo condition ratios along a grid of noise levels.
    SweepKappa(SweepArgs),
    /// Train a velocity network from a run config.
    Train(TrainArgs),
    /// Linear-probe accuracy of checkpoint features versus t.
    Probe(ProbeArgs),
    /// Euler probability-flow samples from a checkpoint or the exact Gaussian field.
    Sample(SampleArgs),
    #[command(subcommand)]
    Diagnose(Diagnose),
    /// Baseline vs LCF over several seeds: loss, conditioning and probe curves.
    Figure1(Figure1Args),
    /// Rerun the job recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum Diagnose {
    /// Gauss-Newton condition number on a window of noise levels.
    Gn(GnArgs),
    /// Same as the top-level `probe`.
    Probe(ProbeArgs),
    /// Fuzz the Jacobian-reallocation (4) or class-separation (5) bound.
    Prop(PropArgs),
    /// Gradient-descent iterations on a quadratic with condition number kappa.
    Gdk(GdkArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// rectified, cosine or power:<p>
    #[arg(long, default_value = "rectified")]
    pub schedule: Schedule,
    /// Strictly descending noise levels in (0, 1].
    #[arg(long, value_delimiter = ',', required = true)]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    /// Norm of x0, which is spread evenly over all coordinates.
    #[arg(long, default_value_t = 1.0)]
    pub x0_norm: f64,
    /// Monte-Carlo pairs per grid point; 0 leaves the MC columns empty.
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Run config giving the dataset, schedule and seed (defaults otherwise).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_PROBE_GRID)]
    pub t_grid: Vec<f64>,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    pub probe_lr: f64,
    /// CSV destination (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, conflicts_with = "gaussian_sigma", required_unless_present = "gaussian_sigma")]
    pub ckpt: Option<PathBuf>,
    /// Use the exact velocity of N(0, sigma² I) data instead of a network.
    #[arg(long)]
    pub gaussian_sigma: Option<f64>,
    /// Dimension for --gaussian-sigma.
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    /// Schedule for --gaussian-sigma.
    #[arg(long, default_value = "rectified")]
    pub schedule: Schedule,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = lowflow::flowcore::DEFAULT_T_STOP)]
    pub t_stop: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GnArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], required = true)]
    pub window: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PropArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["4", "5"]))]
    pub which: String,
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GdkArgs {
    #[arg(long)]
    pub kappa: f64,
    #[arg(long)]
    pub eps: f64,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Figure1Args {
    /// Baseline run config (default: built-in defaults, 2000 steps).
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// LCF run config (default: built-in defaults, 2000 steps).
    #[arg(long)]
    pub lcf: Option<PathBuf>,
    #[arg(long, default_value_t = FIGURE1_MIN_SEEDS)]
    pub n_seeds: usize,
    /// First seed of the shared seed set.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_PROBE_GRID)]
    pub probe_grid: Vec<f64>,
    /// Gauss-Newton windows as lo:hi pairs.
    #[arg(long, value_delimiter = ',', default_value = "0.01:0.02,0.05:0.1,0.2:0.3,0.4:0.5")]
    pub windows: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub gn_samples: usize,
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    pub probe_epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    pub probe_lr: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Manifest of the run to repeat.
    pub manifest_file: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reads `$LOWFLOW_SEED`.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
    }
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            TrainConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Config text with the seed override applied.
fn resolved_config(path: Option<&Path>, seed: Option<u64>) -> Result<String, CliError> {
    let mut cfg = read_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg.to_config_string())
}

fn parse_window(s: &str) -> Result<[f64; 2], CliError> {
    let bad = || usage(format!("window `{s}` is not lo:hi"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let w = [a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?];
    if !(w[0] > 0.0 && w[0] < w[1] && w[1] <= 1.0) {
        return Err(usage(format!("window `{s}` must satisfy 0 < lo < hi <= 1")));
    }
    Ok(w)
}

fn probe_job(a: ProbeArgs, seed: Option<u64>) -> Result<ProbeJob, CliError> {
    Ok(ProbeJob {
        config: resolved_config(a.config.as_deref(), seed)?,
        ckpt: a.ckpt,
        t_grid: a.t_grid,
        probe_epochs: a.probe_epochs,
        probe_lr: a.probe_lr,
        out: a.out,
    })
}

/// Turns parsed flags into a job. `env_seed` replaces every seed the
/// command would otherwise take from flags or config files.
pub fn resolve(cmd: Command, env_seed: Option<u64>) -> Result<Job, CliError> {
    let pick = |flag: Option<u64>| env_seed.or(flag).unwrap_or(0);
    Ok(match cmd {
        Command::SweepKappa(a) => Job::SweepKappa(SweepJob {
            schedule: a.schedule.to_string(),
            t_grid: a.t_grid,
            dim: a.dim,
            x0_norm: a.x0_norm,
            mc_samples: a.mc_samples,
            seed: pick(a.seed),
            out: a.out,
        }),
        Command::Train(a) => Job::Train(TrainJob {
            config: resolved_config(Some(&a.config), env_seed)?,
            out: a.out,
        }),
        Command::Probe(a) => Job::Probe(probe_job(a, env_seed)?),
        Command::Sample(a) => {
            let source = match (a.ckpt, a.gaussian_sigma) {
                (Some(path), _) => SampleSource::Checkpoint { path },
                (None, Some(sigma)) => SampleSource::Gaussian {
                    sigma,
                    dim: a.dim,
                    schedule: a.schedule.to_string(),
                },
                (None, None) => return Err(usage("sample needs --ckpt or --gaussian-sigma")),
            };
            Job::Sample(SampleJob {
                source,
                n: a.n,
                steps: a.steps,
                t_stop: a.t_stop,
                seed: pick(a.seed),
                out: a.out,
            })
        }
        Command::Diagnose(Diagnose::Gn(a)) => {
            let window = [a.window[0], a.window[1]];
            Job::DiagnoseGn(GnJob {
                ckpt: a.ckpt,
                config: resolved_config(a.config.as_deref(), env_seed)?,
                window,
                samples: a.samples,
                out: a.out,
            })
        }
        Command::Diagnose(Diagnose::Probe(a)) => Job::DiagnoseProbe(probe_job(a, env_seed)?),
        Command::Diagnose(Diagnose::Prop(a)) => Job::DiagnoseProp(PropJob {
            which: a.which.parse().map_err(|_| usage("--which must be 4 or 5"))?,
            trials: a.trials,
            seed: pick(a.seed),
            out: a.out,
        }),
        Command::Diagnose(Diagnose::Gdk(a)) => Job::DiagnoseGdk(GdkJob {
            kappa: a.kappa,
            eps: a.eps,
            dim: a.dim,
            out: a.out,
        }),
        Command::Figure1(a) => {
            if a.n_seeds < FIGURE1_MIN_SEEDS {
                return Err(usage(format!("figure1 needs at least {FIGURE1_MIN_SEEDS} seeds")));
            }
            let base = pick(a.seed);
            let load = |p: Option<&Path>, mode: Mode| -> Result<String, CliError> {
                let mut cfg = match p {
                    Some(_) => read_config(p)?,
                    None => TrainConfig {
                        steps: Some(FIGURE1_STEPS),
                        ..TrainConfig::default()
                    },
                };
                cfg.mode = mode;
                cfg.seed = base;
                Ok(cfg.to_config_string())
            };
            Job::Figure1(Figure1Job {
                baseline: load(a.baseline.as_deref(), Mode::Baseline)?,
                lcf: load(a.lcf.as_deref(), Mode::Lcf)?,
                seeds: (0..a.n_seeds as u64).map(|i| base.wrapping_add(i)).collect(),
                probe_grid: a.probe_grid,
                windows: a.windows.iter().map(|w| parse_window(w)).collect::<Result<_, _>>()?,
                gn_samples: a.gn_samples,
                probe_epochs: a.probe_epochs,
                probe_lr: a.probe_lr,
                out: a.out,
            })
        }
        Command::Replay(_) => return Err(usage("replay is not a job")),
    })
}
