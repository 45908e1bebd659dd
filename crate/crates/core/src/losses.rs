//! Flow-matching regression, low-noise contrastive alignment and their
//! weighted combination.
//!
//! Rows with `t ≥ t_min` are regressed onto `v*`. Rows with `t < t_min` become
//! anchors `z_i = h_ℓ(x_{t_i})`, pulled toward the positive
//! `a_i = h_ℓ(x_{t_min})` of the same sample and pushed away from the other
//! in-batch features. Positives and the negative bank are detached: only the
//! anchors receive gradient.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flowcore::{noise_matrix, NoisyBatch};
use crate::linalg::{dist_sq, Matrix};
use crate::netopt::{backprop_rows, ForwardTrace, Objective, TracedRow, VelocityNet};
use crate::rng::tag;

/// Which terms the contrastive softmax denominator sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConsDenominator {
    /// Positive plus every bank entry except the anchor's own row.
    #[default]
    InfoNce,
    /// Bank entries except the anchor's own row, no positive. Unbounded below.
    NegativesOnly,
    /// Every bank entry including the anchor's own row, no positive.
    WholeBank,
}

impl fmt::Display for ConsDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConsDenominator::InfoNce => "infonce",
            ConsDenominator::NegativesOnly => "paper_s5",
            ConsDenominator::WholeBank => "paper_alg1",
        })
    }
}

impl FromStr for ConsDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "infonce" => Ok(ConsDenominator::InfoNce),
            "paper_s5" => Ok(ConsDenominator::NegativesOnly),
            "paper_alg1" => Ok(ConsDenominator::WholeBank),
            other => Err(Error::invalid(format!("unknown cons_denominator `{other}`"))),
        }
    }
}

/// Where the anchor's positive is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PositiveAt {
    /// `h_ℓ(α(t_min) x0 + β(t_min) ε)` at time `t_min`.
    #[default]
    TMin,
    /// `h_ℓ(x0)` at time 0.
    Zero,
}

impl fmt::Display for PositiveAt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositiveAt::TMin => "t_min",
            PositiveAt::Zero => "zero",
        })
    }
}

impl FromStr for PositiveAt {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "t_min" => Ok(PositiveAt::TMin),
            "zero" => Ok(PositiveAt::Zero),
            other => Err(Error::invalid(format!("unknown positive_at `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcfConfig {
    pub t_min: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Build the positive from the anchor's own noise draw instead of a fresh one.
    pub reuse_eps_for_anchor_positive: bool,
    pub cons_denominator: ConsDenominator,
    pub positive_at: PositiveAt,
}

impl Default for LcfConfig {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            tau: 0.5,
            lambda: 1.0,
            reuse_eps_for_anchor_positive: true,
            cons_denominator: ConsDenominator::InfoNce,
            positive_at: PositiveAt::TMin,
        }
    }
}

impl LcfConfig {
    pub fn new(t_min: f64, tau: f64, lambda: f64) -> Result<Self> {
        let cfg = Self {
            t_min,
            tau,
            lambda,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Domain {
                what: "t_min",
                value: self.t_min,
                domain: "(0, 1)",
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::Domain {
                what: "tau",
                value: self.tau,
                domain: "(0, inf)",
            });
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Domain {
                what: "lambda",
                value: self.lambda,
                domain: "[0, inf)",
            });
        }
        Ok(())
    }
}

/// `(fm, lcf)`: rows with `t ≥ t_min` and rows with `t < t_min`.
pub fn split_batch(batch: &NoisyBatch, t_min: f64) -> (Vec<usize>, Vec<usize>) {
    (0..batch.len()).partition(|&i| batch.t[i] >= t_min)
}

fn traces(net: &VelocityNet, x: &Matrix, t: &[f64]) -> Result<Vec<ForwardTrace>> {
    (0..t.len())
        .into_par_iter()
        .map(|i| net.trace(x.row(i), t[i]))
        .collect()
}

fn check_output_dim(net: &VelocityNet, batch: &NoisyBatch) -> Result<()> {
    if net.output_dim() != batch.dim() {
        return Err(Error::shape(format!(
            "net outputs {} values, data has dimension {}",
            net.output_dim(),
            batch.dim()
        )));
    }
    Ok(())
}

/// Mean of `|v_θ − v*|²` over `(batch row, v_θ, v*)` items and the matching
/// `∂/∂v` cotangents.
fn fm_terms(items: &[(usize, &[f64], &[f64])]) -> Result<(f64, Vec<Vec<f64>>)> {
    if items.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scale = 1.0 / items.len() as f64;
    let mut total = 0.0;
    let mut cot = Vec::with_capacity(items.len());
    for &(i, v, target) in items {
        let err = dist_sq(v, target);
        if !err.is_finite() {
            return Err(Error::NonFinite { what: "loss", index: i });
        }
        total += err;
        cot.push(v.iter().zip(target).map(|(a, b)| 2.0 * scale * (a - b)).collect());
    }
    Ok((total * scale, cot))
}

/// Flow-matching loss over `indices`; 0 when the set is empty.
pub fn fm_loss(net: &VelocityNet, batch: &NoisyBatch, indices: &[usize]) -> Result<f64> {
    Ok(FlowMatching {
        indices: Some(indices.to_vec()),
    }
    .evaluate(net, batch)?
    .0)
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss and its gradient with respect to the anchors.
///
/// `self_index[i]` names the bank row holding anchor `i` itself. It is left out
/// of the denominator except under [`ConsDenominator::WholeBank`].
pub fn contrastive_loss_grad(
    anchors: &Matrix,
    positives: &Matrix,
    bank: &Matrix,
    self_index: &[Option<usize>],
    tau: f64,
    denominator: ConsDenominator,
) -> Result<(f64, Matrix)> {
    if !(tau > 0.0) {
        return Err(Error::Domain {
            what: "tau",
            value: tau,
            domain: "(0, inf)",
        });
    }
    if bank.rows() == 0 {
        return Err(Error::invalid("contrastive bank is empty"));
    }
    let n = anchors.rows();
    if positives.rows() != n || self_index.len() != n {
        return Err(Error::shape(format!(
            "{n} anchors, {} positives, {} self indices",
            positives.rows(),
            self_index.len()
        )));
    }
    if positives.cols() != anchors.cols() || bank.cols() != anchors.cols() {
        return Err(Error::shape("anchor, positive and bank widths differ"));
    }
    let mut grad = Matrix::zeros(n, anchors.cols());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for i in 0..n {
        let z = anchors.row(i);
        let a = positives.row(i);
        let sp = -dist_sq(z, a) / tau;
        // candidate rows of the denominator: None = the positive
        let mut cands: Vec<Option<usize>> = Vec::with_capacity(bank.rows() + 1);
        if denominator == ConsDenominator::InfoNce {
            cands.push(None);
        }
        for j in 0..bank.rows() {
            if denominator != ConsDenominator::WholeBank && self_index[i] == Some(j) {
                continue;
            }
            cands.push(Some(j));
        }
        if cands.is_empty() {
            return Err(Error::invalid(format!("anchor {i} has no negatives in the bank")));
        }
        let row = |c: Option<usize>| c.map_or(a, |j| bank.row(j));
        let scores: Vec<f64> = cands.iter().map(|&c| -dist_sq(z, row(c)) / tau).collect();
        let lse = log_sum_exp(&scores);
        let li = lse - sp;
        if !li.is_finite() {
            return Err(Error::NonFinite { what: "contrastive loss", index: i });
        }
        total += li;
        let g = grad.row_mut(i);
        for k in 0..z.len() {
            g[k] = 2.0 * (z[k] - a[k]) / tau;
        }
        for (&c, &s) in cands.iter().zip(&scores) {
            let w = (s - lse).exp();
            let cr = row(c);
            for k in 0..z.len() {
                g[k] -= w * 2.0 * (z[k] - cr[k]) / tau;
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Mean contrastive loss over the anchors; see [`contrastive_loss_grad`].
pub fn contrastive_loss(
    anchors: &Matrix,
    positives: &Matrix,
    bank: &Matrix,
    self_index: &[Option<usize>],
    tau: f64,
    denominator: ConsDenominator,
) -> Result<f64> {
    Ok(contrastive_loss_grad(anchors, positives, bank, self_index, tau, denominator)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcfLoss {
    pub total: f64,
    pub fm_part: f64,
    pub cons_part: f64,
}

/// Inputs `(x, t)` of the positive rows for the given anchors.
pub fn positive_inputs(batch: &NoisyBatch, anchors: &[usize], cfg: &LcfConfig) -> Result<(Matrix, Vec<f64>)> {
    let d = batch.dim();
    let mut x = Matrix::zeros(anchors.len(), d);
    match cfg.positive_at {
        PositiveAt::Zero => {
            for (r, &i) in anchors.iter().enumerate() {
                x.row_mut(r).copy_from_slice(batch.x0.row(i));
            }
            Ok((x, vec![0.0; anchors.len()]))
        }
        PositiveAt::TMin => {
            let c = batch.schedule.eval(cfg.t_min)?;
            let fresh = if cfg.reuse_eps_for_anchor_positive {
                None
            } else {
                Some(noise_matrix(batch.seed, tag::POSITIVE_NOISE, batch.len(), d))
            };
            for (r, &i) in anchors.iter().enumerate() {
                let eps = fresh.as_ref().map_or(batch.eps.row(i), |m| m.row(i));
                let x0 = batch.x0.row(i);
                for k in 0..d {
                    x[(r, k)] = c.alpha * x0[k] + c.beta * eps[k];
                }
            }
            Ok((x, vec![cfg.t_min; anchors.len()]))
        }
    }
}

fn lcf_evaluate(net: &VelocityNet, batch: &NoisyBatch, cfg: &LcfConfig) -> Result<(LcfLoss, Vec<TracedRow>)> {
    check_output_dim(net, batch)?;
    if !(cfg.t_min >= 0.0 && cfg.t_min < 1.0) {
        return Err(Error::Domain {
            what: "t_min",
            value: cfg.t_min,
            domain: "[0, 1)",
        });
    }
    let (fm_idx, lcf_idx) = split_batch(batch, cfg.t_min);
    let tr = traces(net, &batch.xt, &batch.t)?;
    let items: Vec<_> = fm_idx
        .iter()
        .map(|&i| (i, tr[i].output.as_slice(), batch.vstar.row(i)))
        .collect();
    let (fm_part, fm_cot) = fm_terms(&items)?;

    let mut d_feature: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
    let mut cons_part = 0.0;
    if !lcf_idx.is_empty() {
        let layer = net.feature_layer();
        let (px, pt) = positive_inputs(batch, &lcf_idx, cfg)?;
        let pos_tr = traces(net, &px, &pt)?;
        let width = net.feature_dim();
        let collect = |rows: &mut dyn Iterator<Item = &ForwardTrace>| -> Matrix {
            let data: Vec<f64> = rows.flat_map(|t| t.features(layer).iter().copied()).collect();
            let n = data.len() / width;
            Matrix::from_vec(n, width, data).expect("feature widths agree")
        };
        let anchors = collect(&mut lcf_idx.iter().map(|&i| &tr[i]));
        let positives = collect(&mut pos_tr.iter());
        let bank = collect(&mut tr.iter());
        let self_index: Vec<Option<usize>> = lcf_idx.iter().map(|&i| Some(i)).collect();
        let (loss, dz) =
            contrastive_loss_grad(&anchors, &positives, &bank, &self_index, cfg.tau, cfg.cons_denominator)?;
        cons_part = loss;
        if cfg.lambda != 0.0 {
            for (r, &i) in lcf_idx.iter().enumerate() {
                d_feature[i] = Some(dz.row(r).iter().map(|g| cfg.lambda * g).collect());
            }
        }
    }
    let total = fm_part + cfg.lambda * cons_part;
    if !total.is_finite() {
        return Err(Error::NonFinite { what: "loss", index: 0 });
    }

    let mut d_out: Vec<Option<Vec<f64>>> = vec![None; batch.len()];
    for (&i, c) in fm_idx.iter().zip(fm_cot) {
        d_out[i] = Some(c);
    }
    let rows = tr
        .into_iter()
        .zip(d_out.into_iter().zip(d_feature))
        .filter(|(_, (o, f))| o.is_some() || f.is_some())
        .map(|(trace, (d_out, d_feature))| TracedRow {
            trace,
            d_out,
            d_feature,
        })
        .collect();
    Ok((
        LcfLoss {
            total,
            fm_part,
            cons_part,
        },
        rows,
    ))
}

/// `fm_part + λ · cons_part`, with anchors below `t_min` and FM on the rest.
pub fn lcf_loss(net: &VelocityNet, batch: &NoisyBatch, cfg: &LcfConfig) -> Result<LcfLoss> {
    Ok(lcf_evaluate(net, batch, cfg)?.0)
}

/// [`lcf_loss`] together with its parameter gradient.
pub fn lcf_loss_and_grad(net: &VelocityNet, batch: &NoisyBatch, cfg: &LcfConfig) -> Result<(LcfLoss, Vec<f64>)> {
    let (l, rows) = lcf_evaluate(net, batch, cfg)?;
    Ok((l, backprop_rows(net, &rows)))
}

/// Flow matching over a subset of rows, or every row when `indices` is `None`.
#[derive(Debug, Clone, Default)]
pub struct FlowMatching {
    pub indices: Option<Vec<usize>>,
}

impl Objective for FlowMatching {
    fn evaluate(&self, net: &VelocityNet, batch: &NoisyBatch) -> Result<(f64, Vec<TracedRow>)> {
        check_output_dim(net, batch)?;
        let all: Vec<usize>;
        let rows = match &self.indices {
            Some(idx) => idx.as_slice(),
            None => {
                all = (0..batch.len()).collect();
                &all
            }
        };
        if let Some(&bad) = rows.iter().find(|&&i| i >= batch.len()) {
            return Err(Error::shape(format!("row index {bad} out of range")));
        }
        let tr = rows
            .par_iter()
            .map(|&i| net.trace(batch.xt.row(i), batch.t[i]))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<_> = rows
            .iter()
            .zip(&tr)
            .map(|(&i, t)| (i, t.output.as_slice(), batch.vstar.row(i)))
            .collect();
        let (loss, cot) = fm_terms(&items)?;
        let traced = tr
            .into_iter()
            .zip(cot)
            .map(|(trace, c)| TracedRow {
                trace,
                d_out: Some(c),
                d_feature: None,
            })
            .collect();
        Ok((loss, traced))
    }
}

#[derive(Debug, Clone)]
pub struct LocalContrastiveFlow {
    pub cfg: LcfConfig,
}

impl Objective for LocalContrastiveFlow {
    fn evaluate(&self, net: &VelocityNet, batch: &NoisyBatch) -> Result<(f64, Vec<TracedRow>)> {
        let (l, rows) = lcf_evaluate(net, batch, &self.cfg)?;
        Ok((l.total, rows))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netopt::{grad, Activation, Layer};
    use crate::schedules::Schedule;
    use proptest::prelude::*;

    fn batch(x0: Vec<Vec<f64>>, eps: Vec<Vec<f64>>, t: Vec<f64>) -> NoisyBatch {
        let n = x0.len();
        NoisyBatch::with_noise(
            Schedule::Rectified,
            Matrix::from_rows(&x0).unwrap(),
            vec![0; n],
            t,
            Matrix::from_rows(&eps).unwrap(),
            3,
        )
        .unwrap()
    }

    fn random_batch(n: usize, d: usize, seed: u64) -> NoisyBatch {
        let mut r = crate::rng::substream(seed, tag::FUZZ, 0);
        let x0 = Matrix::from_vec(n, d, crate::rng::normal_vec(&mut r, n * d)).unwrap();
        // a spread of times on both sides of the default t_min
        let t: Vec<f64> = (0..n)
            .map(|i| if i % 3 == 0 { 0.002 + 0.015 * (i as f64 / n as f64) } else { 0.05 + 0.9 * (i as f64 / n as f64) })
            .collect();
        crate::flowcore::make_batch(Schedule::Rectified, x0, vec![0; n], t, seed).unwrap()
    }

    #[test]
    fn split_examples() {
        let b = batch(vec![vec![0.0]; 2], vec![vec![0.0]; 2], vec![0.01, 0.5]);
        assert_eq!(split_batch(&b, 0.02), (vec![1], vec![0]));
        assert_eq!(split_batch(&b, 0.005), (vec![0, 1], vec![]));
        let b = batch(vec![vec![0.0]; 2], vec![vec![0.0]; 2], vec![0.02, 0.01]);
        assert_eq!(split_batch(&b, 0.02), (vec![0], vec![1]));
    }

    #[test]
    fn fm_examples() {
        // zero net: all weights and biases zero
        let zero = VelocityNet::from_layers(
            vec![
                Layer { weight: Matrix::zeros(3, 5), bias: vec![0.0; 3] },
                Layer { weight: Matrix::zeros(2, 3), bias: vec![0.0; 2] },
            ],
            Activation::Tanh,
            1,
        )
        .unwrap();
        // v* = eps - x0 = (3, 4)
        let b = batch(vec![vec![1.0, -1.0]], vec![vec![4.0, 3.0]], vec![0.4]);
        assert!((fm_loss(&zero, &b, &[0]).unwrap() - 25.0).abs() < 1e-12);
        assert_eq!(fm_loss(&zero, &b, &[]).unwrap(), 0.0);

        // a net whose output bias equals the constant target
        let b = batch(vec![vec![1.0, -1.0], vec![0.0, 0.0]], vec![vec![4.0, 3.0], vec![3.0, 4.0]], vec![0.4, 0.9]);
        let mut oracle = zero.clone();
        oracle.layers_mut()[1].bias = vec![3.0, 4.0];
        assert_eq!(fm_loss(&oracle, &b, &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_examples() {
        let one = |v: &[f64]| Matrix::from_rows(&[v.to_vec()]).unwrap();
        let z = one(&[0.5, -0.25]);
        let cases = [
            (vec![1e3, 0.0], 0.0, 1e-300),
            (vec![0.5, -0.25], 2f64.ln(), 1e-15),
            (vec![0.5 + (0.5 * 3f64.ln()).sqrt(), -0.25], (4.0f64 / 3.0).ln(), 1e-15),
        ];
        for (neg, want, tol) in cases {
            let l = contrastive_loss(&z, &z, &one(&neg), &[None], 0.5, ConsDenominator::InfoNce).unwrap();
            assert!((l - want).abs() <= tol, "{l} vs {want}");
        }
        let empty = Matrix::zeros(0, 2);
        assert!(contrastive_loss(&z, &z, &empty, &[None], 0.5, ConsDenominator::InfoNce).is_err());
        assert!(contrastive_loss(&z, &z, &z, &[None], 0.0, ConsDenominator::InfoNce).is_err());
        assert!(contrastive_loss(&z, &z, &z, &[Some(0)], 0.5, ConsDenominator::NegativesOnly).is_err());
    }

    #[test]
    fn denominator_variants() {
        let z = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let a = Matrix::from_rows(&[vec![0.1], vec![1.2]]).unwrap();
        let sidx = [Some(0), Some(1)];
        let tau = 0.5;
        let e = |d2: f64| (-d2 / tau).exp();
        // hand sums for anchor 0 (self 0, other 1.0) and anchor 1 (self 1, other 0.0)
        let pos = [e(0.01), e(0.04)];
        let other = [e(1.0), e(1.0)];
        let want = |f: &dyn Fn(usize) -> f64| 0.5 * (f(0) + f(1));
        let cases: [(ConsDenominator, f64); 3] = [
            (ConsDenominator::InfoNce, want(&|i| -(pos[i] / (pos[i] + other[i])).ln())),
            (ConsDenominator::NegativesOnly, want(&|i| -(pos[i] / other[i]).ln())),
            (ConsDenominator::WholeBank, want(&|i| -(pos[i] / (1.0 + other[i])).ln())),
        ];
        for (den, w) in cases {
            let l = contrastive_loss(&z, &a, &z, &sidx, tau, den).unwrap();
            assert!((l - w).abs() < 1e-12, "{den}: {l} vs {w}");
        }
    }

    #[test]
    fn hand_traced_lcf() {
        let w1 = [[0.3, -0.2, 0.5, 0.1], [-0.4, 0.6, -0.1, 0.2]];
        let b1 = [0.05, -0.1];
        let w2 = [0.7, -0.3];
        let b2 = 0.2;
        let net = VelocityNet::from_layers(
            vec![
                Layer {
                    weight: Matrix::from_rows(&[w1[0].to_vec(), w1[1].to_vec()]).unwrap(),
                    bias: b1.to_vec(),
                },
                Layer { weight: Matrix::from_rows(&[w2.to_vec()]).unwrap(), bias: vec![b2] },
            ],
            Activation::Tanh,
            1,
        )
        .unwrap();
        let b = batch(vec![vec![1.0], vec![-0.5]], vec![vec![0.3], vec![0.8]], vec![0.01, 0.5]);
        let cfg = LcfConfig { t_min: 0.02, tau: 0.5, lambda: 1.0, ..LcfConfig::default() };

        let tp = std::f64::consts::TAU;
        let hidden = |x: f64, t: f64| -> [f64; 2] {
            let inp = [x, t, (tp * t).sin(), (tp * t).cos()];
            let mut h = [0.0; 2];
            for j in 0..2 {
                let z: f64 = (0..4).map(|k| w1[j][k] * inp[k]).sum::<f64>() + b1[j];
                h[j] = z.tanh();
            }
            h
        };
        let out = |h: [f64; 2]| w2[0] * h[0] + w2[1] * h[1] + b2;
        let sq = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);

        let xt0 = 0.99 * 1.0 + 0.01 * 0.3;
        let xt1 = 0.5 * -0.5 + 0.5 * 0.8;
        let h0 = hidden(xt0, 0.01);
        let h1 = hidden(xt1, 0.5);
        let fm = (out(h1) - (0.8 + 0.5)).powi(2);
        let hp = hidden(0.98 * 1.0 + 0.02 * 0.3, 0.02);
        let sp = (-sq(h0, hp) / 0.5).exp();
        let sn = (-sq(h0, h1) / 0.5).exp();
        let cons = -(sp / (sp + sn)).ln();

        let l = lcf_loss(&net, &b, &cfg).unwrap();
        assert!((l.fm_part - fm).abs() < 1e-9);
        assert!((l.cons_part - cons).abs() < 1e-9);
        assert!((l.total - (fm + cons)).abs() < 1e-9);
    }

    #[test]
    fn lcf_examples() {
        let net = VelocityNet::new(&[5, 6, 2], Activation::Tanh, 1, 2).unwrap();
        let b = random_batch(12, 2, 5);
        let cfg = LcfConfig { lambda: 0.0, ..LcfConfig::default() };
        let l = lcf_loss(&net, &b, &cfg).unwrap();
        assert_eq!(l.total, l.fm_part);
        assert!(l.cons_part > 0.0);

        let low = NoisyBatch::with_noise(
            Schedule::Rectified,
            b.x0.clone(),
            b.labels.clone(),
            vec![0.01; 12],
            b.eps.clone(),
            b.seed,
        )
        .unwrap();
        let cfg = LcfConfig { lambda: 2.5, ..LcfConfig::default() };
        let l = lcf_loss(&net, &low, &cfg).unwrap();
        assert_eq!(l.fm_part, 0.0);
        assert_eq!(l.total, 2.5 * l.cons_part);

        let cfg = LcfConfig { t_min: 0.0, ..LcfConfig::default() };
        let l = lcf_loss(&net, &b, &cfg).unwrap();
        assert_eq!(l.total, fm_loss(&net, &b, &(0..12).collect::<Vec<_>>()).unwrap());
        assert_eq!(l.cons_part, 0.0);
    }

    #[test]
    fn fresh_positive_noise_changes_only_cons() {
        let net = VelocityNet::new(&[5, 6, 2], Activation::Tanh, 1, 2).unwrap();
        let b = random_batch(12, 2, 5);
        let shared = lcf_loss(&net, &b, &LcfConfig::default()).unwrap();
        let cfg = LcfConfig { reuse_eps_for_anchor_positive: false, ..LcfConfig::default() };
        let fresh = lcf_loss(&net, &b, &cfg).unwrap();
        assert_eq!(shared.fm_part, fresh.fm_part);
        assert_ne!(shared.cons_part, fresh.cons_part);
        assert_eq!(fresh, lcf_loss(&net, &b, &cfg).unwrap());
    }

    fn fd_grad(net: &VelocityNet, f: &dyn Fn(&VelocityNet) -> f64) -> Vec<f64> {
        let p0 = net.params();
        let h = 1e-6;
        (0..p0.len())
            .map(|k| {
                let mut n = net.clone();
                let mut p = p0.clone();
                p[k] = p0[k] + h;
                n.set_params(&p).unwrap();
                let up = f(&n);
                p[k] = p0[k] - h;
                n.set_params(&p).unwrap();
                (up - f(&n)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (k, den) in [ConsDenominator::InfoNce, ConsDenominator::NegativesOnly, ConsDenominator::WholeBank]
            .into_iter()
            .enumerate()
        {
            let net = VelocityNet::new(&[6, 7, 5, 3], Activation::Tanh, 2, 10 + k as u64).unwrap();
            let b = random_batch(9, 3, 20 + k as u64);
            let cfg = LcfConfig { cons_denominator: den, lambda: 0.7, ..LcfConfig::default() };
            let obj = LocalContrastiveFlow { cfg };
            let (_, g) = grad(&net, &b, &obj).unwrap();

            // positives and bank frozen at the current parameters
            let frozen = net.clone();
            let lcf_idx = split_batch(&b, cfg.t_min).1;
            let (px, pt) = positive_inputs(&b, &lcf_idx, &cfg).unwrap();
            let feats = |n: &VelocityNet, x: &Matrix, t: &[f64]| {
                let rows: Vec<Vec<f64>> = (0..t.len()).map(|i| n.features(x.row(i), t[i]).unwrap()).collect();
                Matrix::from_rows(&rows).unwrap()
            };
            let pos = feats(&frozen, &px, &pt);
            let bank = feats(&frozen, &b.xt, &b.t);
            let sidx: Vec<Option<usize>> = lcf_idx.iter().map(|&i| Some(i)).collect();
            let at: Vec<f64> = lcf_idx.iter().map(|&i| b.t[i]).collect();
            let ax = b.xt.select_rows(&lcf_idx);
            let fm_idx = split_batch(&b, cfg.t_min).0;
            let f = |n: &VelocityNet| {
                let cons = contrastive_loss(&feats(n, &ax, &at), &pos, &bank, &sidx, cfg.tau, den).unwrap();
                fm_loss(n, &b, &fm_idx).unwrap() + cfg.lambda * cons
            };
            let fd = fd_grad(&net, &f);
            assert!(max_rel_err(&g, &fd) < 1e-4, "{den}: {}", max_rel_err(&g, &fd));

            // the fully coupled loss would have a different gradient
            let coupled = fd_grad(&net, &|n: &VelocityNet| lcf_loss(n, &b, &cfg).unwrap().total);
            assert!(max_rel_err(&g, &coupled) > 1e-3);
        }
    }

    #[test]
    fn non_finite_loss_names_the_row() {
        let net = VelocityNet::new(&[4, 3, 1], Activation::Tanh, 1, 0).unwrap();
        let mut b = batch(vec![vec![0.0]; 3], vec![vec![0.0]; 3], vec![0.3, 0.4, 0.5]);
        b.vstar[(2, 0)] = f64::INFINITY;
        assert!(matches!(
            grad(&net, &b, &FlowMatching::default()),
            Err(Error::NonFinite { index: 2, .. })
        ));
    }

    #[test]
    fn config_parsing_and_validation() {
        assert!(LcfConfig::new(0.02, 0.5, 1.0).is_ok());
        assert!(LcfConfig::new(0.0, 0.5, 1.0).is_err());
        assert!(LcfConfig::new(0.02, 0.0, 1.0).is_err());
        assert!(LcfConfig::new(0.02, 0.5, -1.0).is_err());
        for d in ["infonce", "paper_s5", "paper_alg1"] {
            assert_eq!(d.parse::<ConsDenominator>().unwrap().to_string(), d);
        }
        for p in ["t_min", "zero"] {
            assert_eq!(p.parse::<PositiveAt>().unwrap().to_string(), p);
        }
        assert!("other".parse::<PositiveAt>().is_err());
    }

    fn feature_rows(n: usize, w: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-3.0..3.0f64, n * w).prop_map(move |v| Matrix::from_vec(n, w, v).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn infonce_is_nonnegative(z in feature_rows(3, 2), a in feature_rows(3, 2), bank in feature_rows(5, 2), tau in 0.05..5.0f64) {
            let l = contrastive_loss(&z, &a, &bank, &[Some(0), None, Some(4)], tau, ConsDenominator::InfoNce).unwrap();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn bank_permutation_invariance(z in feature_rows(2, 3), a in feature_rows(2, 3), bank in feature_rows(6, 3), seed in any::<u64>()) {
            let perm = crate::rng::permutation(&mut crate::rng::substream(seed, tag::FUZZ, 1), 6);
            let shuffled = bank.select_rows(&perm);
            let inv = |j: usize| perm.iter().position(|&p| p == j);
            for den in [ConsDenominator::InfoNce, ConsDenominator::NegativesOnly, ConsDenominator::WholeBank] {
                let l0 = contrastive_loss(&z, &a, &bank, &[Some(1), Some(3)], 0.7, den).unwrap();
                let l1 = contrastive_loss(&z, &a, &shuffled, &[inv(1), inv(3)], 0.7, den).unwrap();
                prop_assert!((l0 - l1).abs() <= 1e-12 * l0.abs().max(1.0));
            }
        }

        #[test]
        fn pushing_a_negative_away_never_increases_loss(z in feature_rows(1, 2), a in feature_rows(1, 2), bank in feature_rows(4, 2), j in 0usize..4, step in 0.0..2.0f64) {
            let l0 = contrastive_loss(&z, &a, &bank, &[None], 0.5, ConsDenominator::InfoNce).unwrap();
            // move bank row j along the ray from z
            let mut moved = bank.clone();
            let dir: Vec<f64> = (0..2).map(|k| bank[(j, k)] - z[(0, k)]).collect();
            let norm = crate::linalg::norm(&dir).max(1e-12);
            for k in 0..2 {
                moved.row_mut(j)[k] += step * if norm > 1e-12 { dir[k] / norm } else { 1.0 };
            }
            let l1 = contrastive_loss(&z, &a, &moved, &[None], 0.5, ConsDenominator::InfoNce).unwrap();
            prop_assert!(l1 <= l0 + 1e-12);
        }
    }
}
