//! Seeded training loop for flow matching with optional low-noise contrastive
//! alignment, per-noise-level loss tracking and run configuration.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::KeyValues;
use crate::data::{self, MixtureConfig, SyntheticDataset};
use crate::error::{Error, Result};
use crate::flowcore::{make_batch, NoisyBatch};
use crate::linalg::{dist_sq, Matrix};
use crate::losses::{lcf_loss_and_grad, ConsDenominator, FlowMatching, LcfConfig, PositiveAt};
use crate::netopt::{grad, opt_step, Activation, OptState, OptimizerKind, VelocityNet, T_EMBED_DIM};
use crate::rng::{self, tag};
use crate::schedules::Schedule;

pub use crate::netopt::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Lcf,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Lcf => "lcf",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Mode::Baseline),
            "lcf" => Ok(Mode::Lcf),
            other => Err(Error::invalid(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Mixture(MixtureConfig),
    TwoMoons { n: usize, noise_std: f64 },
    Csv { path: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Mixture(MixtureConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub schedule: Schedule,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub lcf: LcfConfig,
    /// Defaults to `[d + 3, 64, 64, d]`.
    pub layer_sizes: Option<Vec<usize>>,
    pub feature_layer: usize,
    pub activation: Activation,
    pub dataset: DatasetConfig,
    /// Dataset seed; the root seed when unset.
    pub dataset_seed: Option<u64>,
    pub eval_bins: usize,
    pub eval_samples_per_bin: usize,
    /// Evaluate every this many epochs, besides the start and the end; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Baseline,
            schedule: Schedule::Rectified,
            epochs: 50,
            steps: None,
            batch_size: 128,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            lcf: LcfConfig::default(),
            layer_sizes: None,
            feature_layer: 1,
            activation: Activation::Tanh,
            dataset: DatasetConfig::default(),
            dataset_seed: None,
            eval_bins: 10,
            eval_samples_per_bin: 256,
            eval_every: 0,
        }
    }
}

const KNOWN_KEYS: &[&str] = &[
    "mode",
    "schedule",
    "epochs",
    "steps",
    "batch_size",
    "lr",
    "optimizer",
    "seed",
    "t_min",
    "tau",
    "lambda",
    "cons_denominator",
    "positive_at",
    "reuse_eps_for_anchor_positive",
    "layer_sizes",
    "feature_layer",
    "activation",
    "eval.n_bins",
    "eval.samples_per_bin",
    "eval.every",
    "dataset.*",
];

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(KNOWN_KEYS)?;
        let d = Self::default();
        let dl = d.lcf;
        let lcf = LcfConfig {
            t_min: kv.get_or("t_min", dl.t_min)?,
            tau: kv.get_or("tau", dl.tau)?,
            lambda: kv.get_or("lambda", dl.lambda)?,
            reuse_eps_for_anchor_positive: kv.get_or("reuse_eps_for_anchor_positive", dl.reuse_eps_for_anchor_positive)?,
            cons_denominator: kv.get_or::<ConsDenominator>("cons_denominator", dl.cons_denominator)?,
            positive_at: kv.get_or::<PositiveAt>("positive_at", dl.positive_at)?,
        };
        if let Err(e) = lcf.validate() {
            let key = match &e {
                Error::Domain { what, .. } => *what,
                _ => "t_min",
            };
            return Err(kv.error(key, e.to_string()));
        }

        let kind: String = kv.get_or("dataset.kind", "gaussian_mixture".to_string())?;
        let dm = MixtureConfig::default();
        let dataset = match kind.as_str() {
            "gaussian_mixture" => DatasetConfig::Mixture(MixtureConfig {
                n: kv.get_or("dataset.n", dm.n)?,
                d: kv.get_or("dataset.d", dm.d)?,
                k: kv.get_or("dataset.k", dm.k)?,
                sem_dims: kv.get_list("dataset.sem_dims")?.unwrap_or(dm.sem_dims),
                mean_scale: kv.get_or("dataset.mean_scale", dm.mean_scale)?,
                within_std: kv.get_or("dataset.within_std", dm.within_std)?,
                noise_std: kv.get("dataset.noise_std")?.or(dm.noise_std),
                seed: 0,
            }),
            "two_moons" => DatasetConfig::TwoMoons {
                n: kv.get_or("dataset.n", 1000)?,
                noise_std: kv.get_or("dataset.noise_std", 0.1)?,
            },
            "csv" => DatasetConfig::Csv {
                path: PathBuf::from(
                    kv.raw("dataset.path")
                        .ok_or_else(|| kv.error("dataset.kind", "csv datasets need dataset.path"))?,
                ),
            },
            other => return Err(kv.error("dataset.kind", format!("unknown dataset kind `{other}`"))),
        };

        let cfg = Self {
            mode: kv.get_or("mode", d.mode)?,
            schedule: kv.get_or("schedule", d.schedule)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            steps: kv.get("steps")?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            lr: kv.get_or("lr", d.lr)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            seed: kv.get_or("seed", d.seed)?,
            lcf,
            layer_sizes: kv.get_list("layer_sizes")?,
            feature_layer: kv.get_or("feature_layer", d.feature_layer)?,
            activation: kv.get_or("activation", d.activation)?,
            dataset,
            dataset_seed: kv.get("dataset.seed")?,
            eval_bins: kv.get_or("eval.n_bins", d.eval_bins)?,
            eval_samples_per_bin: kv.get_or("eval.samples_per_bin", d.eval_samples_per_bin)?,
            eval_every: kv.get_or("eval.every", d.eval_every)?,
        };
        let checks: [(&str, bool, &str); 5] = [
            ("epochs", cfg.epochs >= 1, "must be at least 1"),
            ("steps", cfg.steps != Some(0), "must be at least 1"),
            ("batch_size", cfg.batch_size >= 1, "must be at least 1"),
            ("lr", cfg.lr.is_finite() && cfg.lr >= 0.0, "must be finite and non-negative"),
            ("eval.n_bins", cfg.eval_bins >= 2, "must be at least 2"),
        ];
        for (key, ok, msg) in checks {
            if !ok {
                return Err(kv.error(key, msg));
            }
        }
        Ok(cfg)
    }

    /// Fully resolved configuration in the same `key = value` format.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        put("schedule", self.schedule.to_string());
        put("epochs", self.epochs.to_string());
        if let Some(steps) = self.steps {
            put("steps", steps.to_string());
        }
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("optimizer", self.optimizer.to_string());
        put("seed", self.seed.to_string());
        put("t_min", self.lcf.t_min.to_string());
        put("tau", self.lcf.tau.to_string());
        put("lambda", self.lcf.lambda.to_string());
        put("cons_denominator", self.lcf.cons_denominator.to_string());
        put("positive_at", self.lcf.positive_at.to_string());
        put("reuse_eps_for_anchor_positive", self.lcf.reuse_eps_for_anchor_positive.to_string());
        if let Some(sizes) = &self.layer_sizes {
            put("layer_sizes", join(sizes));
        }
        put("feature_layer", self.feature_layer.to_string());
        put("activation", self.activation.to_string());
        put("eval.n_bins", self.eval_bins.to_string());
        put("eval.samples_per_bin", self.eval_samples_per_bin.to_string());
        put("eval.every", self.eval_every.to_string());
        match &self.dataset {
            DatasetConfig::Mixture(m) => {
                put("dataset.kind", "gaussian_mixture".into());
                put("dataset.n", m.n.to_string());
                put("dataset.d", m.d.to_string());
                put("dataset.k", m.k.to_string());
                put("dataset.sem_dims", join(&m.sem_dims));
                put("dataset.mean_scale", m.mean_scale.to_string());
                put("dataset.within_std", m.within_std.to_string());
                if let Some(ns) = m.noise_std {
                    put("dataset.noise_std", ns.to_string());
                }
            }
            DatasetConfig::TwoMoons { n, noise_std } => {
                put("dataset.kind", "two_moons".into());
                put("dataset.n", n.to_string());
                put("dataset.noise_std", noise_std.to_string());
            }
            DatasetConfig::Csv { path } => {
                put("dataset.kind", "csv".into());
                put("dataset.path", path.display().to_string());
            }
        }
        if let Some(ds) = self.dataset_seed {
            put("dataset.seed", ds.to_string());
        }
        s
    }

    pub fn resolved_dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.seed)
    }

    pub fn build_dataset(&self) -> Result<SyntheticDataset> {
        let seed = self.resolved_dataset_seed();
        match &self.dataset {
            DatasetConfig::Mixture(m) => MixtureConfig { seed, ..m.clone() }.generate(),
            DatasetConfig::TwoMoons { n, noise_std } => data::two_moons(*n, *noise_std, seed),
            DatasetConfig::Csv { path } => data::load_dataset(path),
        }
    }

    pub fn resolved_layer_sizes(&self, d: usize) -> Vec<usize> {
        self.layer_sizes.clone().unwrap_or_else(|| vec![d + T_EMBED_DIM, 64, 64, d])
    }

    /// Freshly initialized network for data of dimension `d`.
    pub fn build_net(&self, d: usize) -> Result<VelocityNet> {
        let sizes = self.resolved_layer_sizes(d);
        if sizes[0] != d + T_EMBED_DIM || *sizes.last().unwrap() != d {
            return Err(Error::Config {
                key: "layer_sizes".into(),
                line: 0,
                message: format!("data dimension {d} needs layer_sizes = {}, ..., {d}", d + T_EMBED_DIM),
            });
        }
        VelocityNet::new(&sizes, self.activation, self.feature_layer, self.seed)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub fm_loss: f64,
    pub cons_loss: f64,
    pub total_loss: f64,
    /// Wall time of the step; excluded from equality.
    pub wall_ms: f64,
}

impl PartialEq for StepRecord {
    fn eq(&self, o: &Self) -> bool {
        (self.step, self.epoch) == (o.step, o.epoch)
            && self.fm_loss.to_bits() == o.fm_loss.to_bits()
            && self.cons_loss.to_bits() == o.cons_loss.to_bits()
            && self.total_loss.to_bits() == o.total_loss.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinLoss {
    pub t_lo: f64,
    pub t_hi: f64,
    pub mean_mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub bin: BinLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    pub config: String,
    pub seed: u64,
}

impl TrainLog {
    /// Eval records taken after `epoch` epochs.
    pub fn bins_at(&self, epoch: usize) -> Vec<BinLoss> {
        self.evals.iter().filter(|e| e.epoch == epoch).map(|e| e.bin).collect()
    }

    pub fn last_eval_epoch(&self) -> Option<usize> {
        self.evals.last().map(|e| e.epoch)
    }
}

/// Mean `|v_θ − v*|²` in `n_bins` equal slices of `[0, 1]`, with `t`
/// stratified inside each slice and data rows drawn uniformly.
pub fn eval_loss_by_tbin(
    net: &VelocityNet,
    schedule: Schedule,
    x0: &Matrix,
    n_bins: usize,
    samples_per_bin: usize,
    seed: u64,
) -> Result<Vec<BinLoss>> {
    eval_velocity_by_tbin(|x, t| net.velocity(x, t), schedule, x0, n_bins, samples_per_bin, seed)
}

/// [`eval_loss_by_tbin`] for any velocity field.
pub fn eval_velocity_by_tbin<F>(
    v_fn: F,
    schedule: Schedule,
    x0: &Matrix,
    n_bins: usize,
    samples_per_bin: usize,
    seed: u64,
) -> Result<Vec<BinLoss>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>> + Sync,
{
    if n_bins < 2 {
        return Err(Error::invalid(format!("need at least 2 bins, got {n_bins}")));
    }
    if samples_per_bin == 0 || x0.rows() == 0 {
        return Err(Error::invalid("evaluation needs data and samples"));
    }
    (0..n_bins)
        .into_par_iter()
        .map(|b| {
            let lo = b as f64 / n_bins as f64;
            let hi = (b + 1) as f64 / n_bins as f64;
            let mut pick = rng::substream(seed, tag::EVAL, b as u64);
            let rows: Vec<usize> = (0..samples_per_bin).map(|_| pick.random_range(0..x0.rows())).collect();
            let mut u = rng::substream(seed, tag::TIMES, b as u64);
            let t: Vec<f64> = (0..samples_per_bin)
                .map(|j| lo + (hi - lo) * (j as f64 + u.random::<f64>()) / samples_per_bin as f64)
                .collect();
            let batch = make_batch(
                schedule,
                x0.select_rows(&rows),
                vec![0; samples_per_bin],
                t,
                rng::derive(seed, tag::NOISE, b as u64),
            )?;
            let mut total = 0.0;
            for i in 0..batch.len() {
                total += dist_sq(&v_fn(batch.xt.row(i), batch.t[i])?, batch.vstar.row(i));
            }
            Ok(BinLoss {
                t_lo: lo,
                t_hi: hi,
                mean_mse: total / samples_per_bin as f64,
            })
        })
        .collect()
}

/// The batch used at optimizer step `step`.
pub fn step_batch(cfg: &TrainConfig, data: &SyntheticDataset, perm: &[usize], step: usize) -> Result<(NoisyBatch, u64)> {
    let n = data.len();
    let spe = cfg.steps_per_epoch(n);
    let pos = step % spe;
    let rows = &perm[pos * cfg.batch_size..((pos + 1) * cfg.batch_size).min(n)];
    let (x0, labels) = data.subset(rows);
    let mut times = rng::substream(cfg.seed, tag::TIMES, step as u64);
    let t: Vec<f64> = (0..rows.len()).map(|_| times.random::<f64>()).collect();
    let batch_seed = rng::derive(cfg.seed, tag::BATCH, step as u64);
    Ok((make_batch(cfg.schedule, x0, labels, t, batch_seed)?, batch_seed))
}

fn diverged(step: usize, batch_seed: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::TrainingDiverged { .. } => Error::TrainingDiverged {
            step,
            batch_seed,
            reason: e.to_string(),
        },
        other => other,
    }
}

/// Trains `net` on `data` and returns it with the full log.
///
/// Each step draws its rows from a per-epoch seeded shuffle and its times and
/// noise from per-step substreams, so the run is a pure function of the
/// configuration.
pub fn train(cfg: &TrainConfig, data: &SyntheticDataset, mut net: VelocityNet) -> Result<(VelocityNet, TrainLog)> {
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if net.data_dim() != data.dim() || net.output_dim() != data.dim() {
        return Err(Error::shape(format!(
            "net maps R^{} to R^{}, data lives in R^{}",
            net.data_dim(),
            net.output_dim(),
            data.dim()
        )));
    }
    let n = data.len();
    let spe = cfg.steps_per_epoch(n);
    let total = cfg.total_steps(n);
    let last_epoch = total.div_ceil(spe);
    let eval_seed = rng::derive(cfg.seed, tag::EVAL, 0);
    let mut opt = OptState::new(cfg.optimizer, cfg.lr, net.n_params());
    let mut log = TrainLog {
        steps: Vec::with_capacity(total),
        evals: Vec::new(),
        config: cfg.to_config_string(),
        seed: cfg.seed,
    };
    let evaluate = |net: &VelocityNet, epoch: usize, log: &mut TrainLog| -> Result<()> {
        let bins = eval_loss_by_tbin(net, cfg.schedule, &data.x0, cfg.eval_bins, cfg.eval_samples_per_bin, eval_seed)?;
        log.evals.extend(bins.into_iter().map(|bin| EvalRecord { epoch, bin }));
        Ok(())
    };
    evaluate(&net, 0, &mut log)?;

    // λ = 0 reduces to plain flow matching over the whole batch
    let contrastive = cfg.mode == Mode::Lcf && cfg.lcf.lambda != 0.0;
    let mut perm = Vec::new();
    for step in 0..total {
        let epoch = step / spe;
        if step % spe == 0 {
            perm = rng::permutation(&mut rng::substream(cfg.seed, tag::SHUFFLE, epoch as u64), n);
        }
        let start = Instant::now();
        let (batch, batch_seed) = step_batch(cfg, data, &perm, step)?;
        let (fm, cons, total_loss, g) = if contrastive {
            let (l, g) = lcf_loss_and_grad(&net, &batch, &cfg.lcf).map_err(|e| diverged(step, batch_seed, e))?;
            (l.fm_part, l.cons_part, l.total, g)
        } else {
            let (l, g) = grad(&net, &batch, &FlowMatching::default()).map_err(|e| diverged(step, batch_seed, e))?;
            (l, 0.0, l, g)
        };
        if !total_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                batch_seed,
                reason: format!("loss = {total_loss}"),
            });
        }
        opt_step(&mut opt, &mut net, &g).map_err(|e| diverged(step, batch_seed, e))?;
        if !net.params_finite() {
            return Err(Error::TrainingDiverged {
                step,
                batch_seed,
                reason: "non-finite parameters after update".into(),
            });
        }
        log.steps.push(StepRecord {
            step,
            epoch,
            fm_loss: fm,
            cons_loss: cons,
            total_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let done = step + 1;
        if done % spe == 0 || done == total {
            let completed = done.div_ceil(spe);
            if completed == last_epoch || (cfg.eval_every > 0 && completed % cfg.eval_every == 0) {
                evaluate(&net, completed, &mut log)?;
            }
        }
    }
    Ok((net, log))
}

/// Builds the dataset and network from `cfg` and trains.
pub fn run(cfg: &TrainConfig) -> Result<(SyntheticDataset, VelocityNet, TrainLog)> {
    let data = cfg.build_dataset()?;
    let net = cfg.build_net(data.dim())?;
    let (net, log) = train(cfg, &data, net)?;
    Ok((data, net, log))
}

pub const TRAIN_LOG_HEADER: &str = "step,epoch,fm_loss,cons_loss,total_loss";
pub const LOSS_BINS_HEADER: &str = "epoch,t_lo,t_hi,mean_mse";

/// Per-step losses. Wall times are left out so the file is reproducible.
pub fn write_train_log_csv<W: Write>(mut w: W, log: &TrainLog) -> std::io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in &log.steps {
        writeln!(w, "{},{},{:e},{:e},{:e}", r.step, r.epoch, r.fm_loss, r.cons_loss, r.total_loss)?;
    }
    Ok(())
}

pub fn write_loss_bins_csv<W: Write>(mut w: W, log: &TrainLog) -> std::io::Result<()> {
    writeln!(w, "{LOSS_BINS_HEADER}")?;
    for e in &log.evals {
        writeln!(w, "{},{},{},{:e}", e.epoch, e.bin.t_lo, e.bin.t_hi, e.bin.mean_mse)?;
    }
    Ok(())
}

/// Writes `train_log.csv`, `loss_bins.csv` and `ckpt.txt` into `dir` and
/// returns their paths.
pub fn write_outputs(dir: &Path, net: &VelocityNet, log: &TrainLog) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let train_log = dir.join("train_log.csv");
    let bins = dir.join("loss_bins.csv");
    let ckpt = dir.join("ckpt.txt");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&train_log)?);
    write_train_log_csv(&mut w, log)?;
    w.flush()?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(&bins)?);
    write_loss_bins_csv(&mut w, log)?;
    w.flush()?;
    save_checkpoint(net, &ckpt)?;
    Ok(vec![train_log, bins, ckpt])
}
