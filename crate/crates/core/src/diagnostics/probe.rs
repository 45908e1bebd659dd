//! Linear probes and class separation of learned features.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flowcore::make_batch;
use crate::linalg::{dist_sq, Matrix};
use crate::netopt::VelocityNet;
use crate::rng::{self, tag};
use crate::schedules::Schedule;

/// Fraction of rows used for fitting; the rest are scored.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.5 }
    }
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut seen: Vec<usize> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Seeded 80/20 split of `0..n` as `(train, test)`.
pub fn probe_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(&mut rng::substream(seed, tag::PROBE, 0), n);
    let n_train = ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n.saturating_sub(1));
    let (a, b) = perm.split_at(n_train);
    (a.to_vec(), b.to_vec())
}

/// Softmax regression on `features`, fitted by full-batch gradient descent
/// from zero on a seeded 80% split; returns accuracy on the remaining 20%.
///
/// Features are centred on the training mean and divided by one scalar RMS,
/// which keeps the whole procedure equivariant under rotations of the
/// feature space.
pub fn linear_probe(features: &Matrix, labels: &[usize], epochs: usize, lr: f64, seed: u64) -> Result<f64> {
    let n = features.rows();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} feature rows, {} labels", labels.len())));
    }
    if distinct_classes(labels) < 2 {
        return Err(Error::invalid("linear probe needs at least two classes"));
    }
    if !features.all_finite() {
        return Err(Error::NonFinite {
            what: "probe features",
            index: features
                .iter_rows()
                .position(|r| r.iter().any(|v| !v.is_finite()))
                .unwrap_or(0),
        });
    }
    let (train, test) = probe_split(n, seed);
    let f = features.cols();
    let c = labels.iter().max().unwrap() + 1;

    let mut mean = vec![0.0; f];
    for &i in &train {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let centred = |i: usize| -> Vec<f64> { features.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect() };
    let mut rms = 0.0;
    for &i in &train {
        rms += centred(i).iter().map(|v| v * v).sum::<f64>();
    }
    rms = (rms / (train.len() * f.max(1)) as f64).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    let prep = |idx: &[usize]| -> Matrix {
        let data = idx.iter().flat_map(|&i| centred(i).into_iter().map(|v| v * scale)).collect();
        Matrix::from_vec(idx.len(), f, data).expect("sized")
    };
    let xtr = prep(&train);
    let xte = prep(&test);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();

    let mut w = Matrix::zeros(c, f);
    let mut b = vec![0.0; c];
    let logits = |w: &Matrix, b: &[f64], x: &[f64]| -> Vec<f64> {
        w.matvec(x).iter().zip(b).map(|(z, bb)| z + bb).collect()
    };
    let inv_n = 1.0 / train.len() as f64;
    for _ in 0..epochs {
        let mut gw = Matrix::zeros(c, f);
        let mut gb = vec![0.0; c];
        for (x, &y) in xtr.iter_rows().zip(&ytr) {
            let mut p = logits(&w, &b, x);
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            p.iter_mut().for_each(|z| *z = (*z - m).exp());
            let s: f64 = p.iter().sum();
            for k in 0..c {
                let r = p[k] / s - if k == y { 1.0 } else { 0.0 };
                gb[k] += r;
                gw.row_mut(k).iter_mut().zip(x).for_each(|(g, v)| *g += r * v);
            }
        }
        for k in 0..c {
            b[k] -= lr * inv_n * gb[k];
            w.row_mut(k).iter_mut().zip(gw.row(k)).for_each(|(a, g)| *a -= lr * inv_n * g);
        }
    }

    let correct = xte
        .iter_rows()
        .zip(&test)
        .filter(|(x, &i)| {
            let z = logits(&w, &b, x);
            let arg = (0..c).fold(0, |best, k| if z[k] > z[best] { k } else { best });
            arg == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Feature rows `h_ℓ(x_t)` for a fresh seeded noise draw at a single `t`.
pub fn features_at(net: &VelocityNet, schedule: Schedule, x0: &Matrix, labels: &[usize], t: f64, seed: u64) -> Result<Matrix> {
    let batch = make_batch(schedule, x0.clone(), labels.to_vec(), vec![t; x0.rows()], seed)?;
    let rows = (0..batch.len())
        .into_par_iter()
        .map(|i| net.features(batch.xt.row(i), t))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Probe accuracy of `h_ℓ(x_t)` at each `t`. Noise is drawn per grid point,
/// the train/test split is shared across the grid.
pub fn probe_vs_t(
    net: &VelocityNet,
    schedule: Schedule,
    x0: &Matrix,
    labels: &[usize],
    t_grid: &[f64],
    cfg: ProbeConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if let Some(&bad) = t_grid.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Domain {
            what: "probe t",
            value: bad,
            domain: "(0, 1]",
        });
    }
    t_grid
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let feats = features_at(net, schedule, x0, labels, t, rng::derive(seed, tag::EVAL, i as u64))?;
            Ok((t, linear_probe(&feats, labels, cfg.epochs, cfg.lr, seed)?))
        })
        .collect()
}

/// Per-class mean feature rows, indexed by label; `None` for absent labels.
pub fn class_means(features: &Matrix, labels: &[usize]) -> Vec<Option<Vec<f64>>> {
    let c = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; features.cols()]; c];
    let mut counts = vec![0usize; c];
    for (row, &l) in features.iter_rows().zip(labels) {
        counts[l] += 1;
        sums[l].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

/// Smallest distance between two class-mean feature vectors.
pub fn class_separation(features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != features.rows() {
        return Err(Error::shape(format!("{} feature rows, {} labels", features.rows(), labels.len())));
    }
    let means: Vec<Vec<f64>> = class_means(features, labels).into_iter().flatten().collect();
    if means.len() < 2 {
        return Err(Error::invalid("class separation needs at least two classes"));
    }
    let mut q = f64::INFINITY;
    for a in 0..means.len() {
        for b in a + 1..means.len() {
            q = q.min(dist_sq(&means[a], &means[b]).sqrt());
        }
    }
    Ok(q)
}
