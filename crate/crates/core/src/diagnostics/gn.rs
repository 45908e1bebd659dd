//! Gauss-Newton conditioning of a network on a band of noise levels.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::flowcore::make_batch;
use crate::linalg::Matrix;
use crate::netopt::{condition_number_from_values, stacked_jacobian, sym_eigvals, ParamJacobian, DEFAULT_RANK_TOL};
use crate::rng::{self, tag};
use crate::schedules::Schedule;

#[derive(Debug, Clone, PartialEq)]
pub struct GnReport {
    pub kappa: f64,
    /// Nonzero-side spectrum of `G`, descending. When the stacked Jacobian
    /// has fewer rows than parameters this is the spectrum of `(2/n) J Jᵀ`,
    /// which carries every nonzero eigenvalue of `G`.
    pub spectrum: Vec<f64>,
}

/// Spectrum of `(2/n) JᵀJ` from whichever Gram matrix of `J` is smaller.
pub fn gn_spectrum(j: &Matrix, n_samples: usize) -> Result<Vec<f64>> {
    if n_samples == 0 {
        return Err(Error::invalid("Gauss-Newton spectrum of an empty batch"));
    }
    let mut g = if j.rows() < j.cols() { j.transpose().gram() } else { j.gram() };
    g.scale(2.0 / n_samples as f64);
    sym_eigvals(&g)
}

/// Draws `n_samples` data rows with `t ~ U(lo, hi)` and returns the condition
/// number and spectrum of the Gauss-Newton matrix there.
pub fn gn_conditioning<M: ParamJacobian + ?Sized>(
    model: &M,
    schedule: Schedule,
    x0: &Matrix,
    window: (f64, f64),
    n_samples: usize,
    seed: u64,
) -> Result<GnReport> {
    let (lo, hi) = window;
    if !(lo > 0.0 && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!("window ({lo}, {hi}) is not inside (0, 1]")));
    }
    if x0.rows() == 0 || n_samples == 0 {
        return Err(Error::invalid("Gauss-Newton conditioning needs data and samples"));
    }
    let mut pick = rng::substream(seed, tag::EVAL, 0);
    let rows: Vec<usize> = (0..n_samples).map(|_| pick.random_range(0..x0.rows())).collect();
    let mut times = rng::substream(seed, tag::TIMES, 0);
    let t: Vec<f64> = (0..n_samples).map(|_| times.random_range(lo..hi)).collect();
    let batch = make_batch(schedule, x0.select_rows(&rows), vec![0; n_samples], t, seed)?;
    let j = stacked_jacobian(model, &batch)?;
    let spectrum = gn_spectrum(&j, n_samples)?;
    let kappa = condition_number_from_values(&spectrum, DEFAULT_RANK_TOL)?;
    Ok(GnReport { kappa, spectrum })
}
