//! Checks of the encoder-gain and class-separation inequalities, subspace
//! gains and the gradient-descent iteration count on a quadratic.

use rand::Rng as _;
use rayon::prelude::*;

use crate::data::SubspaceSpec;
use crate::error::{Error, Result};
use crate::linalg::{random_orthogonal, Matrix};
use crate::netopt::{sym_eig, sym_eigvals};
use crate::rng::{self, tag};

/// Slack allowed before an inequality counts as violated.
pub const HOLD_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Sem,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropCheckResult {
    pub lhs: f64,
    pub rhs: f64,
    /// Positive when the inequality holds with room to spare.
    pub margin: f64,
    pub holds: bool,
    pub instance_seed: u64,
}

impl PropCheckResult {
    fn new(lhs: f64, rhs: f64, margin: f64, instance_seed: u64) -> Self {
        Self {
            lhs,
            rhs,
            margin,
            holds: margin >= -HOLD_TOL,
            instance_seed,
        }
    }
}

/// Orthonormal basis of the coordinate subspace `dims` of `R^d`, as `d × |dims|`.
pub fn coordinate_basis(d: usize, dims: &[usize]) -> Matrix {
    let mut b = Matrix::zeros(d, dims.len());
    for (j, &i) in dims.iter().enumerate() {
        b[(i, j)] = 1.0;
    }
    b
}

/// Largest singular value of `a`.
pub fn op_norm(a: &Matrix) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(0.0);
    }
    // the smaller Gram matrix has the same top eigenvalue
    let g = if a.cols() <= a.rows() { a.gram() } else { a.transpose().gram() };
    Ok(sym_eigvals(&g)?[0].max(0.0).sqrt())
}

/// `sup { |J v| : v in span(basis), |v| = 1 }` for an orthonormal `d × r` basis.
pub fn gain_on_basis(j: &Matrix, basis: &Matrix) -> Result<f64> {
    if basis.cols() == 0 {
        return Ok(0.0);
    }
    op_norm(&j.matmul(basis)?)
}

/// Largest singular value of `j` restricted to the semantic or noise
/// coordinates of `spec`.
pub fn subspace_gain(j: &Matrix, spec: &SubspaceSpec, which: Which) -> Result<f64> {
    if j.cols() != spec.d() {
        return Err(Error::shape(format!("J has {} columns, subspace lives in R^{}", j.cols(), spec.d())));
    }
    let dims = match which {
        Which::Sem => spec.sem_dims(),
        Which::Noise => spec.noise_dims(),
    };
    if dims.is_empty() {
        return Ok(0.0);
    }
    op_norm(&j.select_columns(dims))
}

/// Encoder gain needed along the noise directions: `(|M| - r) / L_u`.
pub fn g_req(m_noise_opnorm: f64, r_t: f64, l_u: f64) -> Result<f64> {
    if !(l_u > 0.0) {
        return Err(Error::Domain {
            what: "L_u",
            value: l_u,
            domain: "(0, inf)",
        });
    }
    Ok((m_noise_opnorm - r_t) / l_u)
}

/// Encoder-gain inequality for `v ≈ J_u J_g` approximating a target Jacobian
/// `M` on the subspace spanned by `basis`:
/// `gain(J_g) ≥ (gain(M) − gain(M − J_u J_g)) / |J_u|`.
pub fn prop4_instance(jg: &Matrix, ju: &Matrix, m: &Matrix, basis: &Matrix, instance_seed: u64) -> Result<PropCheckResult> {
    let fit = ju.matmul(jg)?;
    if fit.rows() != m.rows() || fit.cols() != m.cols() {
        return Err(Error::shape("J_u J_g and M differ in shape"));
    }
    let r_t = gain_on_basis(&m.sub(&fit), basis)?;
    let lhs = gain_on_basis(jg, basis)?;
    let rhs = g_req(gain_on_basis(m, basis)?, r_t, op_norm(ju)?)?;
    Ok(PropCheckResult::new(lhs, rhs, lhs - rhs, instance_seed))
}

/// Bound on encoded class separation from a Frobenius budget:
/// `sqrt(max(B² − g², 0)) · δ_max`.
pub fn prop5_bound(frob_budget: f64, noise_gain: f64, delta_max: f64) -> f64 {
    (frob_budget * frob_budget - noise_gain * noise_gain).max(0.0).sqrt() * delta_max
}

/// Realized encoded separation `min |J_g (μ_c − μ_c')|` against
/// [`prop5_bound`], with the noise gain measured on `noise_basis`.
pub fn prop5_instance(
    jg: &Matrix,
    means: &Matrix,
    noise_basis: &Matrix,
    frob_budget: f64,
    instance_seed: u64,
) -> Result<PropCheckResult> {
    if jg.frobenius() > frob_budget * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "encoder Frobenius norm {} exceeds the budget {frob_budget}",
            jg.frobenius()
        )));
    }
    if means.rows() < 2 {
        return Err(Error::invalid("need at least two class means"));
    }
    let mut q = f64::INFINITY;
    let mut delta_max: f64 = 0.0;
    for a in 0..means.rows() {
        for b in a + 1..means.rows() {
            let diff: Vec<f64> = means.row(a).iter().zip(means.row(b)).map(|(x, y)| x - y).collect();
            delta_max = delta_max.max(crate::linalg::norm(&diff));
            q = q.min(crate::linalg::norm(&jg.matvec(&diff)));
        }
    }
    let g = gain_on_basis(jg, noise_basis)?;
    let bound = prop5_bound(frob_budget, g, delta_max);
    Ok(PropCheckResult::new(q, bound, bound - q, instance_seed))
}

fn gaussian_matrix(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = rng::normal_vec(r, rows * cols).into_iter().map(|v| scale * v).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Random split of `0..d` into a non-empty `S` and its complement, and the
/// matching orthonormal bases. One time in ten both bases are rotated by a
/// shared random orthogonal matrix.
fn random_subspaces(r: &mut rng::Rng, d: usize, min_complement: usize) -> (Matrix, Matrix) {
    let perm = rng::permutation(r, d);
    let size = r.random_range(1..=d - min_complement);
    let dims = &perm[..size];
    let rest = &perm[size..];
    let mut s = coordinate_basis(d, dims);
    let mut c = coordinate_basis(d, rest);
    if r.random_range(0..10) == 0 {
        let q = random_orthogonal(r, d);
        s = q.matmul(&s).expect("sized");
        c = q.matmul(&c).expect("sized");
    }
    (s, c)
}

/// Moore-Penrose pseudo-inverse of a full-column-rank `a` via `(AᵀA)⁻¹Aᵀ`.
fn left_inverse(a: &Matrix) -> Result<Matrix> {
    let e = sym_eig(&a.gram())?;
    let n = a.cols();
    let mut inv = Matrix::zeros(n, n);
    for k in 0..n {
        let v = e.vectors.row(k);
        let w = 1.0 / e.values[k];
        for i in 0..n {
            for j in 0..n {
                inv[(i, j)] += w * v[i] * v[j];
            }
        }
    }
    inv.matmul(&a.transpose())
}

/// One random instance of the encoder-gain inequality. Half the instances fit
/// the target closely so the bound is not vacuous.
pub fn check_prop4(seed: u64) -> Result<PropCheckResult> {
    let mut r = rng::substream(seed, tag::FUZZ, 4);
    let d = r.random_range(1..=8usize);
    let m_feat = r.random_range(1..=8usize);
    let c = r.random_range(1.0..100.0);
    let mut m = gaussian_matrix(&mut r, d, d, 0.05 * c);
    for i in 0..d {
        m[(i, i)] += c;
    }
    let scale = r.random_range(0.1..10.0);
    let jg = gaussian_matrix(&mut r, m_feat, d, scale);
    let ju = if m_feat >= d && r.random_bool(0.5) {
        // J_u J_g = M, then perturbed
        let mut ju = m.matmul(&left_inverse(&jg)?)?;
        let eta = 10f64.powf(r.random_range(-6.0..0.0));
        ju.add_assign(&gaussian_matrix(&mut r, d, m_feat, eta * ju.max_abs()));
        ju
    } else {
        let scale = r.random_range(0.1..10.0);
        gaussian_matrix(&mut r, d, m_feat, scale)
    };
    let (s, _) = random_subspaces(&mut r, d, 0);
    prop4_instance(&jg, &ju, &m, &s, seed)
}

/// One random instance of the Frobenius-budget separation bound. Some
/// instances put the whole budget on the noise directions.
pub fn check_prop5(seed: u64) -> Result<PropCheckResult> {
    let mut r = rng::substream(seed, tag::FUZZ, 5);
    let d = r.random_range(2..=8usize);
    let m_feat = r.random_range(1..=8usize);
    let (sem, noise) = random_subspaces(&mut r, d, 1);
    let k = r.random_range(2..=5usize);

    // class means inside the semantic span
    let spread = r.random_range(0.1..3.0);
    let coeffs = gaussian_matrix(&mut r, k, sem.cols(), spread);
    let means = coeffs.matmul(&sem.transpose())?;

    let mut jg = gaussian_matrix(&mut r, m_feat, d, 1.0);
    if r.random_range(0..10) == 0 {
        // no budget left for semantic directions
        let p_noise = noise.matmul(&noise.transpose())?;
        jg = jg.matmul(&p_noise)?;
    }
    let budget = r.random_range(0.1..5.0);
    let fro = jg.frobenius();
    if fro > 0.0 {
        jg.scale(budget * r.random_range(0.5..1.0) / fro);
    }
    prop5_instance(&jg, &means, &noise, budget, seed)
}

/// Runs `check` on seeds `0..trials` derived from `seed` and returns every result.
pub fn fuzz<F>(check: F, trials: usize, seed: u64) -> Result<Vec<PropCheckResult>>
where
    F: Fn(u64) -> Result<PropCheckResult> + Sync,
{
    (0..trials)
        .into_par_iter()
        .map(|i| check(rng::derive(seed, tag::FUZZ, i as u64)))
        .collect()
}

/// Gradient-descent iterations with step `1/κ` on
/// `f(θ) = ½ θᵀ diag(λ) θ`, `λ` evenly spaced on `[1, κ]`, from the normalized
/// all-ones vector, until `max_i |θ_i| ≤ eps · max_i |θ0_i|`.
///
/// With equal starting coordinates the slowest mode decays as `(1 − 1/κ)^k`
/// and dominates the sup norm, so the count equals
/// `⌈ln ε / ln(1 − 1/κ)⌉` whenever `dim ≥ 2`.
pub fn gd_complexity(kappa: f64, eps: f64, dim: usize) -> Result<usize> {
    if !(kappa >= 1.0 && kappa.is_finite()) {
        return Err(Error::Domain {
            what: "kappa",
            value: kappa,
            domain: "[1, inf)",
        });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            what: "eps",
            value: eps,
            domain: "(0, 1)",
        });
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let lambda: Vec<f64> = (0..dim)
        .map(|i| if dim == 1 { kappa } else { 1.0 + (kappa - 1.0) * i as f64 / (dim - 1) as f64 })
        .collect();
    let step = 1.0 / kappa;
    let mut theta = vec![1.0 / (dim as f64).sqrt(); dim];
    let start = theta[0];
    let sup = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let mut k = 0;
    while sup(&theta) > eps * start {
        for (th, l) in theta.iter_mut().zip(&lambda) {
            *th -= step * l * *th;
        }
        k += 1;
    }
    Ok(k)
}

/// Closed-form count `⌈ln ε / ln(1 − 1/κ)⌉` matched by [`gd_complexity`].
pub fn slow_mode_iterations(kappa: f64, eps: f64) -> usize {
    if kappa == 1.0 {
        return 1;
    }
    (eps.ln() / (1.0 - 1.0 / kappa).ln()).ceil() as usize
}
