//! Interpolated samples, velocity targets, algebraic inversion and
//! probability-flow ODE integration.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, tag};
use crate::schedules::Schedule;

/// Default stopping time of the reverse-time integrator. The sampler never
/// reaches `t = 0`, where `beta'/beta` diverges.
pub const DEFAULT_T_STOP: f64 = 1e-3;

/// A batch of `(x0, label, eps, t, x_t, v*)` tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyBatch {
    pub x0: Matrix,
    pub labels: Vec<usize>,
    pub eps: Matrix,
    pub t: Vec<f64>,
    pub xt: Matrix,
    pub vstar: Matrix,
    /// Seed the noise was drawn from; further per-row draws (e.g. fresh
    /// positives) derive their substreams from it.
    pub seed: u64,
    pub schedule: Schedule,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.cols()
    }

    /// Builds a batch from explicit noise.
    pub fn with_noise(
        schedule: Schedule,
        x0: Matrix,
        labels: Vec<usize>,
        t: Vec<f64>,
        eps: Matrix,
        seed: u64,
    ) -> Result<Self> {
        let n = x0.rows();
        if labels.len() != n || t.len() != n {
            return Err(Error::shape(format!(
                "x0 has {n} rows but {} labels and {} times",
                labels.len(),
                t.len()
            )));
        }
        if eps.rows() != n || eps.cols() != x0.cols() {
            return Err(Error::shape(format!(
                "noise is {}x{}, data is {n}x{}",
                eps.rows(),
                eps.cols(),
                x0.cols()
            )));
        }
        if let Some(i) = x0.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { what: "x0", index: i });
        }
        let coeffs = t
            .iter()
            .map(|&ti| schedule.eval(ti))
            .collect::<Result<Vec<_>>>()?;
        let d = x0.cols();
        let mut xt = Matrix::zeros(n, d);
        let mut vstar = Matrix::zeros(n, d);
        for (i, c) in coeffs.iter().enumerate() {
            let (x, e) = (x0.row(i), eps.row(i));
            for k in 0..d {
                xt[(i, k)] = c.alpha * x[k] + c.beta * e[k];
                vstar[(i, k)] = c.alpha_dot * x[k] + c.beta_dot * e[k];
            }
        }
        Ok(Self {
            x0,
            labels,
            eps,
            t,
            xt,
            vstar,
            seed,
            schedule,
        })
    }
}

/// Draws per-row standard normal noise from `(seed, row)` substreams and
/// fills in `x_t` and `v*`.
pub fn make_batch(
    schedule: Schedule,
    x0: Matrix,
    labels: Vec<usize>,
    t: Vec<f64>,
    seed: u64,
) -> Result<NoisyBatch> {
    if labels.len() != x0.rows() || t.len() != x0.rows() {
        return Err(Error::shape(format!(
            "x0 has {} rows but {} labels and {} times",
            x0.rows(),
            labels.len(),
            t.len()
        )));
    }
    let eps = noise_matrix(seed, tag::NOISE, x0.rows(), x0.cols());
    NoisyBatch::with_noise(schedule, x0, labels, t, eps, seed)
}

/// Row `i` drawn from substream `(seed, tag, i)`.
pub fn noise_matrix(seed: u64, stream: u64, rows: usize, cols: usize) -> Matrix {
    let data: Vec<Vec<f64>> = (0..rows)
        .into_par_iter()
        .map(|i| rng::normal_vec(&mut rng::substream(seed, stream, i as u64), cols))
        .collect();
    let mut m = Matrix::zeros(rows, cols);
    for (i, r) in data.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    m
}

/// Solves `x_t = alpha x0 + beta eps`, `v = alpha' x0 + beta' eps` for `(x0, eps)`.
pub fn invert_velocity(
    schedule: Schedule,
    xt: &[f64],
    v: &[f64],
    t: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if xt.len() != v.len() {
        return Err(Error::shape(format!(
            "x_t has {} entries, v has {}",
            xt.len(),
            v.len()
        )));
    }
    let c = schedule.eval(t)?;
    let det = c.discriminant();
    if det.abs() <= 1e-9 {
        return Err(Error::DegenerateSchedule {
            t,
            discriminant: det.abs(),
        });
    }
    let x0 = xt
        .iter()
        .zip(v)
        .map(|(&x, &u)| (c.beta_dot * x - c.beta * u) / det)
        .collect();
    let eps = xt
        .iter()
        .zip(v)
        .map(|(&x, &u)| (c.alpha * u - c.alpha_dot * x) / det)
        .collect();
    Ok((x0, eps))
}

/// Exact marginal velocity `E[v* | x_t = x]` when `x0 ~ N(0, sigma^2 I)`.
pub fn gaussian_velocity(schedule: Schedule, sigma: f64, x: &[f64], t: f64) -> Vec<f64> {
    let c = schedule.eval_unchecked(t);
    let s2 = sigma * sigma;
    let gain = (c.alpha_dot * c.alpha * s2 + c.beta_dot * c.beta)
        / (c.alpha * c.alpha * s2 + c.beta * c.beta);
    x.iter().map(|v| gain * v).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub t_stop: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            t_stop: DEFAULT_T_STOP,
        }
    }
}

/// Integrates `dx/dt = v(x, t)` from `t = 1` down to `t_stop` with uniform
/// explicit Euler steps, independently per row of `x1`.
pub fn euler_sample<F>(v_fn: F, x1: &Matrix, cfg: SamplerConfig) -> Result<Matrix>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    if cfg.steps == 0 {
        return Err(Error::invalid("euler_sample needs at least one step"));
    }
    if !(0.0..1.0).contains(&cfg.t_stop) {
        return Err(Error::Domain {
            what: "t_stop",
            value: cfg.t_stop,
            domain: "[0, 1)",
        });
    }
    let dt = (1.0 - cfg.t_stop) / cfg.steps as f64;
    let rows: Vec<std::result::Result<Vec<f64>, usize>> = x1
        .iter_rows()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|row| {
            let mut x = row.to_vec();
            for k in 0..cfg.steps {
                let t = 1.0 - k as f64 * dt;
                let v = v_fn(&x, t);
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi -= dt * vi;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(k);
                }
            }
            Ok(x)
        })
        .collect();
    if let Some(step) = rows.iter().filter_map(|r| r.as_ref().err()).min() {
        return Err(Error::IntegrationDiverged { step: *step });
    }
    let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.unwrap()).collect();
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, x1.cols()));
    }
    Matrix::from_rows(&rows)
}

/// Writes `row,dim0,...,dim{d-1}`.
pub fn write_samples_csv<W: Write>(mut w: W, samples: &Matrix) -> std::io::Result<()> {
    let header: Vec<String> = (0..samples.cols()).map(|k| format!("dim{k}")).collect();
    writeln!(w, "row,{}", header.join(","))?;
    for (i, r) in samples.iter_rows().enumerate() {
        let vals: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{i},{}", vals.join(","))?;
    }
    Ok(())
}
