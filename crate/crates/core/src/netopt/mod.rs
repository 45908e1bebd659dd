//! Dense MLP, exact gradients and Jacobians, Gauss-Newton matrices, the
//! symmetric eigensolver and first-order optimizers.

mod checkpoint;
mod eig;
mod mlp;
mod optim;

use rayon::prelude::*;

pub use checkpoint::{from_checkpoint_str, load_checkpoint, save_checkpoint, to_checkpoint_string, CHECKPOINT_VERSION};
pub use eig::{condition_number, condition_number_from_values, sym_eig, sym_eigvals, SymEig, DEFAULT_RANK_TOL};
pub use mlp::{time_embedding, Activation, ForwardTrace, JacobianTarget, Layer, VelocityNet, T_EMBED_DIM};
pub use optim::{opt_step, OptState, OptimizerKind};

use crate::error::Result;
use crate::flowcore::NoisyBatch;
use crate::linalg::Matrix;

/// Rows accumulated sequentially before partial gradients are summed; fixed
/// so the reduction order never depends on the thread pool.
const GRAD_CHUNK: usize = 16;

/// One forward evaluation together with the loss cotangents flowing into it.
#[derive(Debug, Clone)]
pub struct TracedRow {
    pub trace: ForwardTrace,
    /// `∂loss/∂v` for this row.
    pub d_out: Option<Vec<f64>>,
    /// `∂loss/∂h_ℓ` for this row.
    pub d_feature: Option<Vec<f64>>,
}

/// A scalar objective evaluated on a batch, exposing the cotangents needed for
/// reverse-mode differentiation.
pub trait Objective: Sync {
    /// Returns the loss and every traced row that receives gradient.
    fn evaluate(&self, net: &VelocityNet, batch: &NoisyBatch) -> Result<(f64, Vec<TracedRow>)>;

    fn loss(&self, net: &VelocityNet, batch: &NoisyBatch) -> Result<f64> {
        Ok(self.evaluate(net, batch)?.0)
    }
}

/// Loss and exact parameter gradient, summed in a thread-count independent order.
pub fn grad(net: &VelocityNet, batch: &NoisyBatch, objective: &dyn Objective) -> Result<(f64, Vec<f64>)> {
    let (loss, rows) = objective.evaluate(net, batch)?;
    Ok((loss, backprop_rows(net, &rows)))
}

pub fn backprop_rows(net: &VelocityNet, rows: &[TracedRow]) -> Vec<f64> {
    let p = net.n_params();
    let partial: Vec<Vec<f64>> = rows
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; p];
            for r in chunk {
                net.backward(&r.trace, r.d_out.as_deref(), r.d_feature.as_deref(), &mut g);
            }
            g
        })
        .collect();
    let mut total = vec![0.0; p];
    for g in partial {
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    total
}

/// Models exposing a per-sample parameter Jacobian `∂v/∂θ`.
pub trait ParamJacobian: Sync {
    fn n_params(&self) -> usize;
    fn param_jacobian(&self, x: &[f64], t: f64) -> Result<Matrix>;
}

impl ParamJacobian for VelocityNet {
    fn n_params(&self) -> usize {
        VelocityNet::n_params(self)
    }

    fn param_jacobian(&self, x: &[f64], t: f64) -> Result<Matrix> {
        VelocityNet::param_jacobian(self, x, t)
    }
}

/// Stacked per-sample Jacobians at `(x_t, t)` of every batch row.
pub fn stacked_jacobian<M: ParamJacobian + ?Sized>(model: &M, batch: &NoisyBatch) -> Result<Matrix> {
    let blocks = (0..batch.len())
        .into_par_iter()
        .map(|i| model.param_jacobian(batch.xt.row(i), batch.t[i]))
        .collect::<Result<Vec<_>>>()?;
    let rows: usize = blocks.iter().map(Matrix::rows).sum();
    let p = model.n_params();
    let mut data = Vec::with_capacity(rows * p);
    for b in &blocks {
        data.extend_from_slice(b.as_slice());
    }
    Matrix::from_vec(rows, p, data)
}

/// `G = (2/n) Σ_i J_θ(x_i, t_i)ᵀ J_θ(x_i, t_i)`.
pub fn gauss_newton<M: ParamJacobian + ?Sized>(model: &M, batch: &NoisyBatch) -> Result<Matrix> {
    if batch.is_empty() {
        return Err(crate::error::Error::invalid("Gauss-Newton matrix of an empty batch"));
    }
    let jt = stacked_jacobian(model, batch)?.transpose();
    let p = jt.rows();
    let scale = 2.0 / batch.len() as f64;
    let upper: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let ri = jt.row(i);
            (i..p).map(|j| scale * crate::linalg::dot(ri, jt.row(j))).collect()
        })
        .collect();
    let mut g = Matrix::zeros(p, p);
    for (i, row) in upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            g[(i, i + k)] = v;
            g[(i + k, i)] = v;
        }
    }
    Ok(g)
}
