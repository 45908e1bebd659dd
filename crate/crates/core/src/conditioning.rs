//! Expected local condition ratio of the flow-matching target.
//!
//! For a fixed `x0` and two independent noise draws at times `t1`, `t2`,
//! `E|Δv|² = (α'(t1) − α'(t2))²|x0|² + d(β'(t1)² + β'(t2)²)` and
//! `E|Δx|² = (α(t1) − α(t2))²|x0|² + d(β(t1)² + β(t2)²)`. Their ratio diverges
//! like `β'/β` as both times go to zero.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::norm_sq;
use crate::rng::{self, tag};
use crate::schedules::Schedule;

const MC_BLOCK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningReport {
    pub t1: f64,
    pub t2: f64,
    pub dv2_exact: f64,
    pub dx2_exact: f64,
    pub kappa_exact: f64,
    pub kappa_lb: f64,
    /// Monte-Carlo fields are NaN when `n_samples == 0`.
    pub dv2_mc: f64,
    pub dx2_mc: f64,
    pub kappa_mc: f64,
    /// Delta-method standard error of `kappa_mc`.
    pub mc_stderr: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub dv2: f64,
    pub dx2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloMoments {
    pub dv2: f64,
    pub dx2: f64,
    pub stderr_dv2: f64,
    pub stderr_dx2: f64,
    /// Covariance of the two sample means.
    pub cov_means: f64,
    pub n: usize,
}

impl MonteCarloMoments {
    pub fn kappa(&self) -> f64 {
        (self.dv2 / self.dx2).sqrt()
    }

    pub fn kappa_stderr(&self) -> f64 {
        let rel_var = 0.25
            * (self.stderr_dv2.powi(2) / self.dv2.powi(2) + self.stderr_dx2.powi(2) / self.dx2.powi(2)
                - 2.0 * self.cov_means / (self.dv2 * self.dx2));
        self.kappa() * rel_var.max(0.0).sqrt()
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(0, 1]",
        })
    }
}

fn check_inputs(x0: &[f64], t1: f64, t2: f64) -> Result<()> {
    if x0.is_empty() {
        return Err(Error::invalid("dimension d must be positive"));
    }
    check_time(t1)?;
    check_time(t2)
}

pub fn moments_exact(s: Schedule, x0: &[f64], t1: f64, t2: f64) -> Result<Moments> {
    check_inputs(x0, t1, t2)?;
    let (c1, c2) = (s.eval_unchecked(t1), s.eval_unchecked(t2));
    let d = x0.len() as f64;
    let r2 = norm_sq(x0);
    Ok(Moments {
        dv2: (c1.alpha_dot - c2.alpha_dot).powi(2) * r2 + d * (c1.beta_dot.powi(2) + c2.beta_dot.powi(2)),
        dx2: (c1.alpha - c2.alpha).powi(2) * r2 + d * (c1.beta.powi(2) + c2.beta.powi(2)),
    })
}

/// `sqrt(E|Δv|² / E|Δx|²)`.
pub fn kappa_e(s: Schedule, x0: &[f64], t1: f64, t2: f64) -> Result<f64> {
    let m = moments_exact(s, x0, t1, t2)?;
    if m.dx2 <= 0.0 {
        return Err(Error::Divergent { t1, t2 });
    }
    Ok((m.dv2 / m.dx2).sqrt())
}

/// `min(β'(t1), β'(t2)) / sqrt(β(t1)² + β(t2)² + |x0|²(α(t1) − α(t2))²/d)`.
pub fn kappa_lower_bound(s: Schedule, x0: &[f64], t1: f64, t2: f64) -> Result<f64> {
    check_inputs(x0, t1, t2)?;
    let (c1, c2) = (s.eval_unchecked(t1), s.eval_unchecked(t2));
    let d = x0.len() as f64;
    let denom2 = c1.beta.powi(2) + c2.beta.powi(2) + norm_sq(x0) * (c1.alpha - c2.alpha).powi(2) / d;
    if denom2 <= 0.0 {
        return Err(Error::Divergent { t1, t2 });
    }
    Ok(c1.beta_dot.min(c2.beta_dot) / denom2.sqrt())
}

#[derive(Default, Clone, Copy)]
struct Sums {
    v: f64,
    x: f64,
    vv: f64,
    xx: f64,
    vx: f64,
}

impl Sums {
    fn add(self, o: Sums) -> Sums {
        Sums {
            v: self.v + o.v,
            x: self.x + o.x,
            vv: self.vv + o.vv,
            xx: self.xx + o.xx,
            vx: self.vx + o.vx,
        }
    }
}

/// Monte-Carlo estimate of the two moments from `n` independent `(ε1, ε2)` pairs.
///
/// Samples are drawn in fixed blocks, each from its own `(seed, block)`
/// substream, and block sums are combined in block order.
pub fn mc_moments(s: Schedule, x0: &[f64], t1: f64, t2: f64, n: usize, seed: u64) -> Result<MonteCarloMoments> {
    check_inputs(x0, t1, t2)?;
    if n < 100 {
        return Err(Error::invalid(format!("Monte-Carlo needs n >= 100, got {n}")));
    }
    let (c1, c2) = (s.eval_unchecked(t1), s.eval_unchecked(t2));
    let d = x0.len();
    let blocks = n.div_ceil(MC_BLOCK);
    let partial: Vec<Sums> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::substream(seed, tag::MC_PAIRS, b as u64);
            let count = MC_BLOCK.min(n - b * MC_BLOCK);
            let mut acc = Sums::default();
            let mut e1 = vec![0.0; d];
            let mut e2 = vec![0.0; d];
            for _ in 0..count {
                e1.iter_mut().for_each(|e| *e = rng::normal(&mut rng));
                e2.iter_mut().for_each(|e| *e = rng::normal(&mut rng));
                let (mut dv2, mut dx2) = (0.0, 0.0);
                for k in 0..d {
                    let dv = (c1.alpha_dot - c2.alpha_dot) * x0[k] + c1.beta_dot * e1[k] - c2.beta_dot * e2[k];
                    let dx = (c1.alpha - c2.alpha) * x0[k] + c1.beta * e1[k] - c2.beta * e2[k];
                    dv2 += dv * dv;
                    dx2 += dx * dx;
                }
                acc.v += dv2;
                acc.x += dx2;
                acc.vv += dv2 * dv2;
                acc.xx += dx2 * dx2;
                acc.vx += dv2 * dx2;
            }
            acc
        })
        .collect();
    let tot = partial.into_iter().fold(Sums::default(), Sums::add);
    let nf = n as f64;
    let (mv, mx) = (tot.v / nf, tot.x / nf);
    let var_v = (tot.vv - nf * mv * mv) / (nf - 1.0);
    let var_x = (tot.xx - nf * mx * mx) / (nf - 1.0);
    let cov = (tot.vx - nf * mv * mx) / (nf - 1.0);
    Ok(MonteCarloMoments {
        dv2: mv,
        dx2: mx,
        stderr_dv2: (var_v.max(0.0) / nf).sqrt(),
        stderr_dx2: (var_x.max(0.0) / nf).sqrt(),
        cov_means: cov / nf,
        n,
    })
}

/// One report per grid time with `t1 = t2 = t`. Pass `n_mc = 0` to skip the
/// Monte-Carlo columns.
pub fn divergence_sweep(
    s: Schedule,
    x0: &[f64],
    t_grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<ConditioningReport>> {
    if t_grid.is_empty() {
        return Err(Error::invalid("t grid is empty"));
    }
    if let Some(&t) = t_grid.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Domain {
            what: "t",
            value: t,
            domain: "(0, 1]",
        });
    }
    if t_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("t grid must be strictly descending"));
    }
    t_grid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let exact = moments_exact(s, x0, t, t)?;
            let kappa_exact = kappa_e(s, x0, t, t)?;
            let kappa_lb = kappa_lower_bound(s, x0, t, t)?;
            let mc = if n_mc > 0 {
                Some(mc_moments(s, x0, t, t, n_mc, rng::derive(seed, tag::MC_PAIRS, i as u64))?)
            } else {
                None
            };
            Ok(ConditioningReport {
                t1: t,
                t2: t,
                dv2_exact: exact.dv2,
                dx2_exact: exact.dx2,
                kappa_exact,
                kappa_lb,
                dv2_mc: mc.map_or(f64::NAN, |m| m.dv2),
                dx2_mc: mc.map_or(f64::NAN, |m| m.dx2),
                kappa_mc: mc.map_or(f64::NAN, |m| m.kappa()),
                mc_stderr: mc.map_or(f64::NAN, |m| m.kappa_stderr()),
                n_samples: n_mc,
            })
        })
        .collect()
}

/// True when `kappa_exact` strictly increases along the (descending) grid.
pub fn is_divergent(reports: &[ConditioningReport]) -> bool {
    reports.windows(2).all(|w| w[1].kappa_exact > w[0].kappa_exact)
}

pub const SWEEP_HEADER: &str = "t,kappa_exact,kappa_mc,mc_stderr,kappa_lb,dv2_exact,dx2_exact";

pub fn write_sweep_csv<W: Write>(mut w: W, reports: &[ConditioningReport]) -> std::io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.t1, r.kappa_exact, r.kappa_mc, r.mc_stderr, r.kappa_lb, r.dv2_exact, r.dx2_exact
        )?;
    }
    Ok(())
}
