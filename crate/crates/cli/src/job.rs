//! Fully resolved runs. A [`Job`] depends on nothing outside itself except
//! the input files it names (checkpoints, CSV datasets).

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lowflow::conditioning::{divergence_sweep, write_sweep_csv};
use lowflow::diagnostics::{
    check_prop4, check_prop5, fuzz, gd_complexity, gn_conditioning, probe_vs_t, slow_mode_iterations, ProbeConfig,
};
use lowflow::flowcore::{euler_sample, gaussian_velocity, noise_matrix, write_samples_csv, SamplerConfig};
use lowflow::netopt::{load_checkpoint, VelocityNet, DEFAULT_RANK_TOL};
use lowflow::rng::tag;
use lowflow::schedules::Schedule;
use lowflow::trainer::{self, Mode, TrainConfig};

use crate::error::{usage, CliError};
use crate::figure1::{self, Figure1Spec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepJob {
    pub schedule: String,
    pub t_grid: Vec<f64>,
    pub dim: usize,
    pub x0_norm: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    /// Resolved run configuration text.
    pub config: String,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeJob {
    pub ckpt: PathBuf,
    /// Run configuration supplying the dataset, schedule and seed.
    pub config: String,
    pub t_grid: Vec<f64>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SampleSource {
    Checkpoint { path: PathBuf },
    /// Exact velocity of `x0 ~ N(0, sigma² I)`.
    Gaussian { sigma: f64, dim: usize, schedule: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleJob {
    pub source: SampleSource,
    pub n: usize,
    pub steps: usize,
    pub t_stop: f64,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnJob {
    pub ckpt: PathBuf,
    pub config: String,
    pub window: [f64; 2],
    pub samples: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropJob {
    pub which: u8,
    pub trials: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdkJob {
    pub kappa: f64,
    pub eps: f64,
    pub dim: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure1Job {
    pub baseline: String,
    pub lcf: String,
    pub seeds: Vec<u64>,
    pub probe_grid: Vec<f64>,
    pub windows: Vec<[f64; 2]>,
    pub gn_samples: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand")]
pub enum Job {
    #[serde(rename = "sweep-kappa")]
    SweepKappa(SweepJob),
    #[serde(rename = "train")]
    Train(TrainJob),
    #[serde(rename = "probe")]
    Probe(ProbeJob),
    #[serde(rename = "sample")]
    Sample(SampleJob),
    #[serde(rename = "diagnose gn")]
    DiagnoseGn(GnJob),
    #[serde(rename = "diagnose probe")]
    DiagnoseProbe(ProbeJob),
    #[serde(rename = "diagnose prop")]
    DiagnoseProp(PropJob),
    #[serde(rename = "diagnose gdk")]
    DiagnoseGdk(GdkJob),
    #[serde(rename = "figure1")]
    Figure1(Figure1Job),
}

fn config_seed(text: &str) -> Option<u64> {
    TrainConfig::parse(text).ok().map(|c| c.seed)
}

fn parse_config(text: &str) -> Result<TrainConfig, CliError> {
    Ok(TrainConfig::parse(text)?)
}

/// Writes to `out`, or to stdout when `None`; returns the files written.
fn emit<F>(out: Option<&Path>, body: F) -> Result<Vec<PathBuf>, CliError>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(File::create(path)?);
            body(&mut w)?;
            w.flush()?;
            Ok(vec![path.to_path_buf()])
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush()?;
            Ok(Vec::new())
        }
    }
}

fn net_and_data(ckpt: &Path, config: &str) -> Result<(VelocityNet, TrainConfig, lowflow::data::SyntheticDataset), CliError> {
    let cfg = parse_config(config)?;
    let net = load_checkpoint(ckpt)?;
    let data = cfg.build_dataset()?;
    if net.data_dim() != data.dim() {
        return Err(usage(format!(
            "checkpoint expects {}-dimensional data, the configured dataset has {}",
            net.data_dim(),
            data.dim()
        )));
    }
    Ok((net, cfg, data))
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::SweepKappa(_) => "sweep-kappa",
            Job::Train(_) => "train",
            Job::Probe(_) => "probe",
            Job::Sample(_) => "sample",
            Job::DiagnoseGn(_) => "diagnose gn",
            Job::DiagnoseProbe(_) => "diagnose probe",
            Job::DiagnoseProp(_) => "diagnose prop",
            Job::DiagnoseGdk(_) => "diagnose gdk",
            Job::Figure1(_) => "figure1",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::SweepKappa(j) => Some(j.seed),
            Job::Train(j) => config_seed(&j.config),
            Job::Probe(j) | Job::DiagnoseProbe(j) => config_seed(&j.config),
            Job::Sample(j) => Some(j.seed),
            Job::DiagnoseGn(j) => config_seed(&j.config),
            Job::DiagnoseProp(j) => Some(j.seed),
            Job::DiagnoseGdk(_) => None,
            Job::Figure1(j) => j.seeds.first().copied(),
        }
    }

    /// Output file or directory; `None` means stdout.
    pub fn out(&self) -> Option<&Path> {
        match self {
            Job::SweepKappa(j) => Some(&j.out),
            Job::Train(j) => Some(&j.out),
            Job::Probe(j) | Job::DiagnoseProbe(j) => j.out.as_deref(),
            Job::Sample(j) => Some(&j.out),
            Job::DiagnoseGn(j) => j.out.as_deref(),
            Job::DiagnoseProp(j) => j.out.as_deref(),
            Job::DiagnoseGdk(j) => j.out.as_deref(),
            Job::Figure1(j) => Some(&j.out),
        }
    }

    fn writes_directory(&self) -> bool {
        matches!(self, Job::Train(_) | Job::Figure1(_))
    }

    pub fn with_out(mut self, path: PathBuf) -> Self {
        match &mut self {
            Job::SweepKappa(j) => j.out = path,
            Job::Train(j) => j.out = path,
            Job::Probe(j) | Job::DiagnoseProbe(j) => j.out = Some(path),
            Job::Sample(j) => j.out = path,
            Job::DiagnoseGn(j) => j.out = Some(path),
            Job::DiagnoseProp(j) => j.out = Some(path),
            Job::DiagnoseGdk(j) => j.out = Some(path),
            Job::Figure1(j) => j.out = path,
        }
        self
    }

    /// `<dir>/manifest.json` for directory outputs, `<file>.manifest.json`
    /// for single files, nothing for stdout.
    pub fn default_manifest_path(&self) -> Option<PathBuf> {
        let out = self.out()?;
        if self.writes_directory() {
            Some(out.join("manifest.json"))
        } else {
            let mut s = out.as_os_str().to_owned();
            s.push(".manifest.json");
            Some(PathBuf::from(s))
        }
    }

    pub fn run(&self) -> Result<Vec<PathBuf>, CliError> {
        match self {
            Job::SweepKappa(j) => run_sweep(j),
            Job::Train(j) => {
                let cfg = parse_config(&j.config)?;
                let (_, net, log) = trainer::run(&cfg)?;
                let mut files = trainer::write_outputs(&j.out, &net, &log)?;
                let resolved = j.out.join("config.txt");
                std::fs::write(&resolved, &j.config)?;
                files.push(resolved);
                Ok(files)
            }
            Job::Probe(j) | Job::DiagnoseProbe(j) => run_probe(j),
            Job::Sample(j) => run_sample(j),
            Job::DiagnoseGn(j) => run_gn(j),
            Job::DiagnoseProp(j) => run_prop(j),
            Job::DiagnoseGdk(j) => {
                let k = gd_complexity(j.kappa, j.eps, j.dim)?;
                let closed = slow_mode_iterations(j.kappa, j.eps);
                emit(j.out.as_deref(), |w| {
                    writeln!(w, "kappa,eps,dim,iterations,slow_mode_iterations")?;
                    writeln!(w, "{},{},{},{k},{closed}", j.kappa, j.eps, j.dim)
                })
            }
            Job::Figure1(j) => run_figure1_job(j),
        }
    }
}

fn run_sweep(j: &SweepJob) -> Result<Vec<PathBuf>, CliError> {
    let schedule: Schedule = j.schedule.parse()?;
    if j.dim == 0 {
        return Err(usage("--dim must be positive"));
    }
    let x0 = vec![j.x0_norm / (j.dim as f64).sqrt(); j.dim];
    let reports = divergence_sweep(schedule, &x0, &j.t_grid, j.mc_samples, j.seed)?;
    emit(Some(&j.out), |w| write_sweep_csv(w, &reports))
}

fn run_probe(j: &ProbeJob) -> Result<Vec<PathBuf>, CliError> {
    let (net, cfg, data) = net_and_data(&j.ckpt, &j.config)?;
    let probe = ProbeConfig {
        epochs: j.probe_epochs,
        lr: j.probe_lr,
    };
    let acc = probe_vs_t(&net, cfg.schedule, &data.x0, &data.labels, &j.t_grid, probe, cfg.seed)?;
    emit(j.out.as_deref(), |w| {
        writeln!(w, "t,accuracy")?;
        for (t, a) in &acc {
            writeln!(w, "{t},{a}")?;
        }
        Ok(())
    })
}

fn run_sample(j: &SampleJob) -> Result<Vec<PathBuf>, CliError> {
    let sampler = SamplerConfig {
        steps: j.steps,
        t_stop: j.t_stop,
    };
    let samples = match &j.source {
        SampleSource::Checkpoint { path } => {
            let net = load_checkpoint(path)?;
            let d = net.data_dim();
            let x1 = noise_matrix(j.seed, tag::SAMPLE, j.n, d);
            euler_sample(|x, t| net.velocity(x, t).unwrap_or_else(|_| vec![f64::NAN; d]), &x1, sampler)?
        }
        SampleSource::Gaussian { sigma, dim, schedule } => {
            let schedule: Schedule = schedule.parse()?;
            let x1 = noise_matrix(j.seed, tag::SAMPLE, j.n, *dim);
            euler_sample(|x, t| gaussian_velocity(schedule, *sigma, x, t), &x1, sampler)?
        }
    };
    emit(Some(&j.out), |w| write_samples_csv(w, &samples))
}

fn run_gn(j: &GnJob) -> Result<Vec<PathBuf>, CliError> {
    let (net, cfg, data) = net_and_data(&j.ckpt, &j.config)?;
    let [lo, hi] = j.window;
    let r = gn_conditioning(&net, cfg.schedule, &data.x0, (lo, hi), j.samples, cfg.seed)?;
    let cut = DEFAULT_RANK_TOL * r.spectrum[0];
    let kept: Vec<f64> = r.spectrum.iter().copied().filter(|&l| l > cut).collect();
    let lmin = kept.last().copied().unwrap_or(f64::NAN);
    emit(j.out.as_deref(), |w| {
        writeln!(w, "t_lo,t_hi,n_samples,kappa,lambda_max,lambda_min,rank")?;
        writeln!(w, "{lo},{hi},{},{:e},{:e},{:e},{}", j.samples, r.kappa, r.spectrum[0], lmin, kept.len())
    })
}

fn run_prop(j: &PropJob) -> Result<Vec<PathBuf>, CliError> {
    let results = match j.which {
        4 => fuzz(check_prop4, j.trials, j.seed)?,
        5 => fuzz(check_prop5, j.trials, j.seed)?,
        other => return Err(usage(format!("--which must be 4 or 5, got {other}"))),
    };
    let violations = results.iter().filter(|r| !r.holds).count();
    let files = emit(j.out.as_deref(), |w| {
        writeln!(w, "trial,instance_seed,lhs,rhs,margin,holds")?;
        for (i, r) in results.iter().enumerate() {
            writeln!(w, "{i},{},{:e},{:e},{:e},{}", r.instance_seed, r.lhs, r.rhs, r.margin, r.holds)?;
        }
        Ok(())
    })?;
    eprintln!("check {}: {violations} violations in {} trials", j.which, j.trials);
    Ok(files)
}

fn run_figure1_job(j: &Figure1Job) -> Result<Vec<PathBuf>, CliError> {
    let mut baseline = parse_config(&j.baseline)?;
    let mut lcf = parse_config(&j.lcf)?;
    baseline.mode = Mode::Baseline;
    lcf.mode = Mode::Lcf;
    let spec = Figure1Spec {
        baseline,
        lcf,
        seeds: j.seeds.clone(),
        probe_grid: j.probe_grid.clone(),
        windows: j.windows.iter().map(|w| (w[0], w[1])).collect(),
        gn_samples: j.gn_samples,
        probe: ProbeConfig {
            epochs: j.probe_epochs,
            lr: j.probe_lr,
        },
    };
    let fig = figure1::run_figure1(&spec)?;
    std::fs::create_dir_all(&j.out)?;
    let mut files = Vec::new();
    for (name, cells) in [
        (figure1::LOSS_FILE, &fig.loss),
        (figure1::CONVERGENCE_FILE, &fig.convergence),
        (figure1::PROBE_FILE, &fig.probe),
    ] {
        files.extend(emit(Some(&j.out.join(name)), |w| figure1::write_cells(w, cells))?);
    }
    files.extend(emit(Some(&j.out.join(figure1::RUNS_FILE)), |w| figure1::write_runs(w, &fig.runs))?);
    Ok(files)
}
