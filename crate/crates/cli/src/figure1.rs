//! Multi-seed baseline vs LCF comparison: loss by noise level, Gauss-Newton
//! conditioning by window, and probe accuracy by noise level.

use std::io::Write;

use rayon::prelude::*;

use lowflow::diagnostics::{gn_conditioning, probe_vs_t, ProbeConfig};
use lowflow::trainer::{self, Mode, TrainConfig};
use lowflow::Result;

pub const HEADER: &str = "t,mean,std,mode";
pub const LOSS_FILE: &str = "loss_vs_t.csv";
pub const CONVERGENCE_FILE: &str = "convergence_vs_window.csv";
pub const PROBE_FILE: &str = "probe_vs_t.csv";
pub const RUNS_FILE: &str = "runs.csv";

#[derive(Debug, Clone)]
pub struct Figure1Spec {
    pub baseline: TrainConfig,
    pub lcf: TrainConfig,
    pub seeds: Vec<u64>,
    pub probe_grid: Vec<f64>,
    pub windows: Vec<(f64, f64)>,
    pub gn_samples: usize,
    pub probe: ProbeConfig,
}

/// Measurements of one trained run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPoints {
    pub mode: Mode,
    pub seed: u64,
    /// `(bin midpoint, final mean squared error)`.
    pub loss: Vec<(f64, f64)>,
    /// `(window midpoint, κ(G))`.
    pub kappa: Vec<(f64, f64)>,
    /// `(t, accuracy)`.
    pub probe: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub t: f64,
    pub mean: f64,
    pub std: f64,
    pub mode: Mode,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure1 {
    pub runs: Vec<RunPoints>,
    pub loss: Vec<Cell>,
    pub convergence: Vec<Cell>,
    pub probe: Vec<Cell>,
}

impl Figure1 {
    pub fn cell(cells: &[Cell], mode: Mode, t: f64) -> Option<&Cell> {
        cells.iter().find(|c| c.mode == mode && c.t == t)
    }
}

fn one_run(spec: &Figure1Spec, mode: Mode, seed: u64) -> Result<RunPoints> {
    let mut cfg = match mode {
        Mode::Baseline => spec.baseline.clone(),
        Mode::Lcf => spec.lcf.clone(),
    };
    cfg.seed = seed;
    let (data, net, log) = trainer::run(&cfg)?;
    let last = log.last_eval_epoch().unwrap_or(0);
    let loss = log.bins_at(last).iter().map(|b| (0.5 * (b.t_lo + b.t_hi), b.mean_mse)).collect();
    let kappa = spec
        .windows
        .iter()
        .map(|&(lo, hi)| {
            let r = gn_conditioning(&net, cfg.schedule, &data.x0, (lo, hi), spec.gn_samples, seed)?;
            Ok((0.5 * (lo + hi), r.kappa))
        })
        .collect::<Result<Vec<_>>>()?;
    let probe = probe_vs_t(&net, cfg.schedule, &data.x0, &data.labels, &spec.probe_grid, spec.probe, seed)?;
    Ok(RunPoints {
        mode,
        seed,
        loss,
        kappa,
        probe,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(runs: &[RunPoints], pick: fn(&RunPoints) -> &[(f64, f64)]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for mode in [Mode::Baseline, Mode::Lcf] {
        let mine: Vec<&RunPoints> = runs.iter().filter(|r| r.mode == mode).collect();
        let Some(first) = mine.first() else { continue };
        for (k, &(t, _)) in pick(first).iter().enumerate() {
            let vals: Vec<f64> = mine.iter().map(|r| pick(r)[k].1).collect();
            let (mean, std) = mean_std(&vals);
            cells.push(Cell {
                t,
                mean,
                std,
                mode,
                n: vals.len(),
            });
        }
    }
    cells
}

/// Trains both modes on every seed and aggregates per `(t, mode)`.
pub fn run_figure1(spec: &Figure1Spec) -> Result<Figure1> {
    let work: Vec<(Mode, u64)> = [Mode::Baseline, Mode::Lcf]
        .into_iter()
        .flat_map(|m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let runs = work
        .par_iter()
        .map(|&(m, s)| one_run(spec, m, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure1 {
        loss: aggregate(&runs, |r| &r.loss),
        convergence: aggregate(&runs, |r| &r.kappa),
        probe: aggregate(&runs, |r| &r.probe),
        runs,
    })
}

pub fn write_cells<W: Write>(mut w: W, cells: &[Cell]) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    for c in cells {
        writeln!(w, "{},{:e},{:e},{}", c.t, c.mean, c.std, c.mode)?;
    }
    Ok(())
}

/// Every per-run point behind the aggregates.
pub fn write_runs<W: Write>(mut w: W, runs: &[RunPoints]) -> std::io::Result<()> {
    writeln!(w, "panel,mode,seed,t,value")?;
    for r in runs {
        for (panel, pts) in [("loss", &r.loss), ("kappa", &r.kappa), ("probe", &r.probe)] {
            for (t, v) in pts {
                writeln!(w, "{panel},{},{},{t},{v:e}", r.mode, r.seed)?;
            }
        }
    }
    Ok(())
}
